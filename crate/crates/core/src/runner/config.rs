use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_lines, make_splits, synth_corpus, Corpus, SplitLabel, TemplateGrammar};
use crate::error::{Error, Result};
use crate::miprobe::{BinningConfig, ProbeOptions};
use crate::revertlm::{DecodeStrategy, DecoderShape, PurifierConfig, PurifierVariant, TrainRecipe};
use crate::tinylm::{Arch, ModelConfig, TapPoint, TapPosition, VictimTraining};

pub const DEFAULT_CONFIG: &str = include_str!("../../configs/default.toml");
pub const CALIBRATION_CONFIG: &str = include_str!("../../configs/calibration.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    Synth { grammar: String, n_records: usize },
    File { path: PathBuf, max_vocab: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub source: CorpusSource,
    /// train / val / test fractions.
    pub ratios: [f64; 3],
    /// Fraction of the train portion handed to the attacker as aux data.
    pub aux_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSpec {
    pub arch: Arch,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub training: VictimTraining,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    VictimEmbedding,
    TokenCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub purifier: PurifierConfig,
    #[serde(default)]
    pub decoder: DecoderShape,
    #[serde(default)]
    pub recipe: TrainRecipe,
    #[serde(default)]
    pub decode: DecodeStrategy,
    #[serde(default)]
    pub embedder: EmbedderKind,
    /// Keep per-pair rows in evaluation reports.
    #[serde(default = "yes")]
    pub keep_pairs: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiSpec {
    #[serde(default)]
    pub binning: BinningConfig,
    #[serde(default)]
    pub probe: ProbeOptions,
    pub splits: Vec<SplitLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub sublayer_blocks: Vec<usize>,
    pub ablation_tap: TapPoint,
    /// Add an embedding-tap row to the depth sweep.
    pub depth_include_embedding: bool,
}

/// Path overrides; unset paths derive from `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captures: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub victim: VictimSpec,
    /// Taps captured by `capture`; the first is the default attack tap.
    pub taps: Vec<TapPoint>,
    pub attack: AttackSpec,
    pub mi: MiSpec,
    pub sweeps: SweepSpec,
    #[serde(default)]
    pub paths: PathSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn default_config() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled default config is valid")
    }

    pub fn calibration() -> Self {
        Self::from_toml(CALIBRATION_CONFIG).expect("bundled calibration config is valid")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Victim config for a corpus with `vocab_size` entries.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let v = &self.victim;
        ModelConfig {
            arch: v.arch,
            n_blocks: v.n_blocks,
            d_model: v.d_model,
            n_heads: v.n_heads,
            d_ff: v.d_ff,
            vocab_size,
            max_seq_len: v.max_seq_len,
            seed: self.seed,
            n_classes: v.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if (c.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || c.ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::config("corpus ratios must be non-negative and sum to 1"));
        }
        if !(0.0..1.0).contains(&c.aux_fraction) {
            return Err(Error::config("aux_fraction must be in [0, 1)"));
        }
        if let CorpusSource::Synth { grammar, n_records } = &c.source {
            grammar_by_name(grammar)?;
            if *n_records == 0 {
                return Err(Error::config("n_records must be positive"));
            }
        }
        let mc = self.model_config(16);
        mc.validate()?;
        if self.taps.is_empty() {
            return Err(Error::config("at least one tap is required"));
        }
        for t in self.taps.iter().chain([&self.sweeps.ablation_tap]) {
            t.validate(&mc)?;
        }
        if let Some(b) = self.sweeps.sublayer_blocks.iter().find(|&&b| b >= mc.n_blocks) {
            return Err(Error::config(format!("sublayer block {b} out of range")));
        }
        self.attack.recipe.validate()?;
        self.mi.binning.validate()?;
        if self.mi.splits.is_empty() {
            return Err(Error::config("mi.splits must not be empty"));
        }
        Ok(())
    }

    /// Apply the path-only environment overrides.
    pub fn apply_env(&mut self) {
        let var = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        if let Some(p) = var("REVLAB_OUT_DIR") {
            self.out_dir = p;
        }
        if let Some(p) = var("REVLAB_VICTIM") {
            self.paths.victim = Some(p);
        }
        if let Some(p) = var("REVLAB_CAPTURES") {
            self.paths.captures = Some(p);
        }
        if let Some(p) = var("REVLAB_ATTACKER") {
            self.paths.attacker = Some(p);
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out_dir.join("corpus")
    }

    pub fn victim_path(&self) -> PathBuf {
        self.paths.victim.clone().unwrap_or_else(|| self.out_dir.join("victim").join("victim.ckpt"))
    }

    pub fn captures_dir(&self) -> PathBuf {
        self.paths.captures.clone().unwrap_or_else(|| self.out_dir.join("captures"))
    }

    pub fn attack_dir(&self, tap: TapPoint, variant: PurifierVariant) -> PathBuf {
        self.out_dir.join("attacks").join(format!("{}_{}", tap_dir(tap), variant.as_str()))
    }

    pub fn attacker_path(&self, tap: TapPoint, variant: PurifierVariant) -> PathBuf {
        self.paths
            .attacker
            .clone()
            .unwrap_or_else(|| self.attack_dir(tap, variant).join("attacker.ckpt"))
    }

    /// The corpus this config describes, generated or loaded, then split.
    pub fn build_corpus(&self) -> Result<Corpus> {
        let c = &self.corpus;
        let raw = match &c.source {
            CorpusSource::Synth { grammar, n_records } => {
                synth_corpus(self.seed, *n_records, &grammar_by_name(grammar)?)?
            }
            CorpusSource::File { path, max_vocab } => load_lines(path, None, *max_vocab, self.victim.max_seq_len)?,
        };
        make_splits(raw, (c.ratios[0], c.ratios[1], c.ratios[2]), c.aux_fraction, self.seed)
    }
}

fn grammar_by_name(name: &str) -> Result<TemplateGrammar> {
    match name {
        "persona" => Ok(TemplateGrammar::persona()),
        other => Err(Error::config(format!("unknown grammar {other:?}"))),
    }
}

/// Directory-safe tap name, e.g. `0_block_out`.
pub fn tap_dir(tap: TapPoint) -> String {
    if tap.position == TapPosition::Embedding {
        return "embedding".into();
    }
    format!("{}_{}", tap.block_index, tap.position.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_roundtrip() {
        for cfg in [RunConfig::default_config(), RunConfig::calibration()] {
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, back);
            assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{DEFAULT_CONFIG}\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Toml(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::default_config();
        cfg.taps = vec!["9:block_out".parse().unwrap()];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_config();
        cfg.attack.recipe.step2.train_purifier = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
