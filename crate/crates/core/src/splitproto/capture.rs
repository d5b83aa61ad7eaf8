use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::frame::{serialize_frame, RepresentationFrame};
use crate::corpus::{Corpus, SplitLabel};
use crate::error::{Error, Result};
use crate::tinylm::{ModelId, RepresentationTrace, TapPoint, VictimModel};

const CAPTURE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureEntry {
    pub frame: String,
    pub record_id: String,
    pub split: SplitLabel,
    /// Ground truth, present only for records the attacker may train on
    /// (aux and train). The server never sees it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub model_id: ModelId,
    pub tap: TapPoint,
    pub d_model: usize,
    pub entries: Vec<CaptureEntry>,
}

/// Captured frames in manifest order, decoded.
#[derive(Clone, Debug)]
pub struct CaptureSet {
    pub manifest: CaptureManifest,
    pub traces: Vec<RepresentationTrace>,
}

fn attacker_visible(split: SplitLabel) -> bool {
    matches!(split, SplitLabel::Aux | SplitLabel::Train)
}

/// Observe `victim` at `tap` on every record of the given splits, in
/// corpus order. Any tap the model defines can be observed; whether the
/// tap is a legal split point matters only for replay through a server.
pub fn capture_dataset(
    victim: &VictimModel,
    tap: TapPoint,
    corpus: &Corpus,
    splits: &[SplitLabel],
) -> Result<CaptureSet> {
    tap.validate(victim.config())?;
    let records = corpus.slice(splits);
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let model_id = victim.model_id();
    let mut traces = Vec::with_capacity(records.len());
    let mut entries = Vec::with_capacity(records.len());
    for chunk in records.chunks(CAPTURE_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|r| r.tokens.as_slice()).collect();
        let out = victim.run_batch(&seqs, &[tap], false)?;
        for (r, states) in chunk.iter().zip(&out.states[0]) {
            let split = corpus.split_of(&r.id).expect("slice only yields split records");
            traces.push(RepresentationTrace::from_tensor(tap, states)?.with_source(r.id.clone()));
            entries.push(CaptureEntry {
                frame: format!("frames/{:06}.slrf", entries.len()),
                record_id: r.id.clone(),
                split,
                text: attacker_visible(split).then(|| r.text.clone()),
            });
        }
    }
    Ok(CaptureSet {
        manifest: CaptureManifest {
            model_id,
            tap,
            d_model: victim.config().d_model,
            entries,
        },
        traces,
    })
}

impl CaptureSet {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn tap(&self) -> TapPoint {
        self.manifest.tap
    }

    pub fn model_id(&self) -> ModelId {
        self.manifest.model_id
    }

    /// Indices of entries in any of `splits`.
    pub fn indices(&self, splits: &[SplitLabel]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| splits.contains(&self.manifest.entries[i].split))
            .collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<SplitLabel, usize> {
        let mut m = BTreeMap::new();
        for e in &self.manifest.entries {
            *m.entry(e.split).or_default() += 1;
        }
        m
    }

    /// Total bytes of the encoded frames.
    pub fn frame_bytes(&self) -> usize {
        self.traces
            .iter()
            .map(|t| RepresentationFrame::from_trace(t, self.model_id()).encoded_len())
            .sum()
    }

    /// Write `frames/*.slrf` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        for (e, t) in self.manifest.entries.iter().zip(&self.traces) {
            fs::write(dir.join(&e.frame), serialize_frame(t, self.model_id())?)?;
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let manifest: CaptureManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let mut traces = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let p = dir.join(&e.frame);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            let f = RepresentationFrame::decode(&fs::read(&p)?)?;
            if f.model_id != manifest.model_id || f.tap != manifest.tap || f.d_model != manifest.d_model {
                return Err(Error::Frame(format!(
                    "{} disagrees with the capture manifest",
                    e.frame
                )));
            }
            traces.push(f.to_trace().with_source(e.record_id.clone()));
        }
        Ok(Self { manifest, traces })
    }
}
