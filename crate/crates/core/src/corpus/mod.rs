//! Text corpora: tokenization, synthetic generation, splits and file IO.

mod synth;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{synth_corpus, Slot, Template, TemplateGrammar};
pub use vocab::{detokenize, normalize, tokenize, Vocab, BOS, EOS, SPECIALS, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    /// Normalized text; `detokenize(tokens)` reproduces it for in-vocab words.
    pub text: String,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub label: Option<u32>,
    #[serde(default)]
    pub entities: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
    Aux,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 4] = [Self::Train, Self::Val, Self::Test, Self::Aux];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::Aux => "aux",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split label {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<TextRecord>,
    /// record id -> split; empty until [`make_splits`] runs.
    pub splits: BTreeMap<String, SplitLabel>,
    pub vocab: Vocab,
    /// Names of the class labels carried by records, if any.
    pub label_names: Vec<String>,
}

impl Corpus {
    pub fn new(records: Vec<TextRecord>, vocab: Vocab, label_names: Vec<String>) -> Self {
        Self {
            records,
            splits: BTreeMap::new(),
            vocab,
            label_names,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, id: &str) -> Option<SplitLabel> {
        self.splits.get(id).copied()
    }

    /// Records carrying any of `labels`, in corpus order.
    pub fn slice(&self, labels: &[SplitLabel]) -> Vec<&TextRecord> {
        self.records
            .iter()
            .filter(|r| self.split_of(&r.id).is_some_and(|l| labels.contains(&l)))
            .collect()
    }

    pub fn record(&self, id: &str) -> Option<&TextRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split_sizes(&self) -> BTreeMap<SplitLabel, usize> {
        let mut m = BTreeMap::new();
        for l in self.splits.values() {
            *m.entry(*l).or_default() += 1;
        }
        m
    }

    pub fn max_token_len(&self) -> usize {
        self.records.iter().map(|r| r.tokens.len()).max().unwrap_or(0)
    }

    /// Mean number of words per record (BOS/EOS excluded).
    pub fn mean_words(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let total: usize = self.records.iter().map(|r| r.tokens.len() - 2).sum();
        total as f64 / self.records.len() as f64
    }

    /// Distinct word ids actually used, specials excluded.
    pub fn used_vocab_size(&self) -> usize {
        let mut seen = vec![false; self.vocab.len()];
        for r in &self.records {
            for &t in &r.tokens {
                seen[t as usize] = true;
            }
        }
        seen.iter().skip(SPECIALS.len()).filter(|&&s| s).count()
    }

    /// Write `corpus.txt`, `records.jsonl`, `vocab.txt`, `splits.json` and
    /// `labels.json`.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut lines = String::new();
        for r in &self.records {
            lines.push_str(&r.text);
            lines.push('\n');
        }
        fs::write(dir.join("corpus.txt"), lines)?;
        let mut jsonl = String::new();
        for r in &self.records {
            jsonl.push_str(&serde_json::to_string(r)?);
            jsonl.push('\n');
        }
        fs::write(dir.join("records.jsonl"), jsonl)?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_lines())?;
        fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&self.splits)?)?;
        let labels: BTreeMap<&str, Option<u32>> =
            self.records.iter().map(|r| (r.id.as_str(), r.label)).collect();
        fs::write(
            dir.join("labels.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "label_names": self.label_names,
                "labels": labels,
            }))?,
        )?;
        Ok(vec![
            "corpus.txt".into(),
            "records.jsonl".into(),
            "vocab.txt".into(),
            "splits.json".into(),
            "labels.json".into(),
        ])
    }

    /// Read a directory written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("records.jsonl");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let vocab = Vocab::from_lines(&fs::read_to_string(dir.join("vocab.txt"))?)?;
        let records = fs::read_to_string(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<TextRecord>(l)?))
            .collect::<Result<Vec<_>>>()?;
        if let Some(r) = records.iter().find(|r| r.tokens.iter().any(|&t| t as usize >= vocab.len())) {
            return Err(Error::invalid(format!("record {} has a token outside the vocabulary", r.id)));
        }
        let labels: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("labels.json"))?)?;
        let label_names = serde_json::from_value(labels["label_names"].clone())?;
        let mut corpus = Corpus::new(records, vocab, label_names);
        corpus.splits = serde_json::from_str(&fs::read_to_string(dir.join("splits.json"))?)?;
        Ok(corpus)
    }
}

/// Load a one-sentence-per-line UTF-8 corpus. Blank lines are skipped.
/// Without a vocabulary one is built from the file, capped at `max_vocab`.
/// Lines longer than `max_seq_len - 2` words are truncated and the stored
/// text reflects the truncation.
pub fn load_lines(
    path: &Path,
    vocab: Option<Vocab>,
    max_vocab: usize,
    max_seq_len: usize,
) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    if max_seq_len < 3 {
        return Err(Error::invalid("max_seq_len must be at least 3"));
    }
    let raw = fs::read_to_string(path)?;
    let texts: Vec<String> = raw
        .lines()
        .map(normalize)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let words: Vec<&str> = t.split(' ').collect();
            if words.len() > max_seq_len - 2 {
                words[..max_seq_len - 2].join(" ")
            } else {
                t
            }
        })
        .collect();
    let vocab = vocab.unwrap_or_else(|| Vocab::build(texts.iter().map(String::as_str), max_vocab));
    let records = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let tokens = tokenize(&text, &vocab)?;
            Ok(TextRecord {
                id: format!("r{i:06}"),
                text,
                tokens,
                label: None,
                entities: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(records, vocab, Vec::new()))
}

/// Assign every record to train/val/test with a seeded shuffle, then move
/// `aux_fraction` of the train portion to `aux`.
pub fn make_splits(
    mut corpus: Corpus,
    ratios: (f64, f64, f64),
    aux_fraction: f64,
    seed: u64,
) -> Result<Corpus> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be non-negative and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    if !(0.0..=1.0).contains(&aux_fraction) {
        return Err(Error::invalid("aux_fraction must be in [0, 1]"));
    }
    let n = corpus.records.len();
    let n_train = (n as f64 * tr).round() as usize;
    let n_val = ((n as f64 * va).round() as usize).min(n - n_train);
    let n_aux = (n_train as f64 * aux_fraction).round() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    corpus.splits.clear();
    for (rank, &idx) in order.iter().enumerate() {
        let label = if rank < n_aux {
            SplitLabel::Aux
        } else if rank < n_train {
            SplitLabel::Train
        } else if rank < n_train + n_val {
            SplitLabel::Val
        } else {
            SplitLabel::Test
        };
        corpus.splits.insert(corpus.records[idx].id.clone(), label);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Corpus {
        synth_corpus(5, 1000, &TemplateGrammar::persona()).unwrap()
    }

    #[test]
    fn ratios_must_sum_to_one() {
        assert!(make_splits(small(), (0.8, 0.1, 0.2), 0.1, 1).is_err());
        assert!(make_splits(small(), (0.8, 0.1, 0.1), 0.1, 1).is_ok());
    }

    #[test]
    fn split_is_partition_and_aux_disjoint_from_test() {
        let c = make_splits(small(), (0.8, 0.1, 0.1), 0.1, 9).unwrap();
        assert_eq!(c.splits.len(), c.records.len());
        let sizes = c.split_sizes();
        assert_eq!(sizes.values().sum::<usize>(), 1000);
        assert_eq!(sizes[&SplitLabel::Aux], 80);
        assert_eq!(sizes[&SplitLabel::Train], 720);
        assert_eq!(sizes[&SplitLabel::Test], 100);
    }

    #[test]
    fn splits_are_seed_deterministic() {
        let a = make_splits(small(), (0.8, 0.1, 0.1), 0.1, 4).unwrap();
        let b = make_splits(small(), (0.8, 0.1, 0.1), 0.1, 4).unwrap();
        let c = make_splits(small(), (0.8, 0.1, 0.1), 0.1, 5).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn load_lines_truncates_and_builds_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "Hello there, friend!\n\n one two three four five six\n").unwrap();
        let c = load_lines(&p, None, 100, 6).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records[0].text, "hello there , friend");
        assert_eq!(c.records[1].tokens.len(), 6);
        assert_eq!(detokenize(&c.records[1].tokens, &c.vocab), c.records[1].text);
        assert!(matches!(
            load_lines(&dir.path().join("nope.txt"), None, 10, 8),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn save_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let a = make_splits(small(), (0.8, 0.1, 0.1), 0.1, 4).unwrap();
        a.save(dir.path()).unwrap();
        let b = Corpus::load(dir.path()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.vocab, b.vocab);
        assert!(matches!(Corpus::load(&dir.path().join("x")), Err(Error::MissingArtifact(_))));
    }
}
