use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurifierVariant {
    /// Identity; requires the trace width to equal the embedding width.
    None,
    LinearProjection,
    /// Linear projection plus a frozen token probe whose cross-entropy on
    /// the purified rows is added to the step-1 loss.
    LinearWithTester,
    /// `tanh` bottleneck encoder followed by a linear decoder.
    Autoencoder,
}

impl PurifierVariant {
    pub const ALL: [PurifierVariant; 4] = [
        Self::None,
        Self::LinearProjection,
        Self::LinearWithTester,
        Self::Autoencoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LinearProjection => "linear_projection",
            Self::LinearWithTester => "linear_with_tester",
            Self::Autoencoder => "autoencoder",
        }
    }
}

impl std::str::FromStr for PurifierVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown purifier variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpace {
    #[default]
    VictimEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurifierConfig {
    pub variant: PurifierVariant,
    pub target_space: TargetSpace,
    /// Autoencoder only; defaults to the embedding width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bottleneck_dim: Option<usize>,
    /// Linear-with-tester only.
    pub tester_weight: f64,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        Self {
            variant: PurifierVariant::LinearProjection,
            target_space: TargetSpace::VictimEmbedding,
            bottleneck_dim: None,
            tester_weight: 0.1,
        }
    }
}

impl PurifierConfig {
    pub fn of(variant: PurifierVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerConfig {
    /// Width of the captured trace rows.
    pub d_in: usize,
    /// Width of the victim's embedding space (purifier output).
    pub d_embed: usize,
    pub d_att: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest token sequence (BOS and EOS included) the decoder handles.
    pub max_seq_len: usize,
    /// At most this many trace rows condition the decoder.
    pub max_prefix: usize,
    pub purifier: PurifierConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderShape {
    pub d_att: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_prefix: usize,
}

impl Default for DecoderShape {
    fn default() -> Self {
        Self {
            d_att: 64,
            n_blocks: 2,
            n_heads: 4,
            d_ff: 256,
            max_prefix: 32,
        }
    }
}

impl AttackerConfig {
    pub fn new(
        d_in: usize,
        d_embed: usize,
        vocab_size: usize,
        max_seq_len: usize,
        shape: &DecoderShape,
        purifier: PurifierConfig,
        seed: u64,
    ) -> Self {
        Self {
            d_in,
            d_embed,
            d_att: shape.d_att,
            n_blocks: shape.n_blocks,
            n_heads: shape.n_heads,
            d_ff: shape.d_ff,
            vocab_size,
            max_seq_len,
            max_prefix: shape.max_prefix,
            purifier,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_att % self.n_heads != 0 {
            return Err(Error::config("attacker d_att must be divisible by n_heads"));
        }
        if self.n_blocks == 0 || self.max_prefix == 0 || self.max_seq_len < 3 {
            return Err(Error::config("attacker needs blocks, a prefix and max_seq_len >= 3"));
        }
        let p = &self.purifier;
        if p.variant == PurifierVariant::None && self.d_in != self.d_embed {
            return Err(Error::config(format!(
                "purifier none is the identity and needs d_in == d_embed ({} != {})",
                self.d_in, self.d_embed
            )));
        }
        if let Some(b) = p.bottleneck_dim {
            if b == 0 || b > self.d_in {
                return Err(Error::config(format!(
                    "bottleneck_dim {b} must be in 1..={}",
                    self.d_in
                )));
            }
        }
        if !(p.tester_weight >= 0.0) {
            return Err(Error::config("tester_weight must be non-negative"));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        self.purifier.bottleneck_dim.unwrap_or(self.d_embed.min(self.d_in))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step1 {
    pub epochs: usize,
    pub lr: f64,
    pub batch_rows: usize,
    /// Fraction of aux records held out to score the purifier.
    pub holdout_fraction: f64,
    /// Seed the decoder's token table with per-token means of the aux
    /// embedding rows and start the mapper at the identity (needs
    /// `d_att == d_embed`), so the decoder reads the space the purifier
    /// targets.
    pub warm_start_decoder: bool,
}

impl Default for Step1 {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-2,
            batch_rows: 256,
            holdout_fraction: 0.1,
            warm_start_decoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step2 {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub ppl_eval_every: usize,
    /// Weight of the plain language-modelling loss on aux text.
    pub lm_weight: f64,
    pub lm_batch_size: usize,
    /// Must stay false: the purifier is frozen while the decoder trains.
    pub train_purifier: bool,
    /// Fraction of training captures held out for validation.
    pub val_fraction: f64,
}

impl Default for Step2 {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 2e-3,
            batch_size: 32,
            warmup_steps: 50,
            ppl_eval_every: 50,
            lm_weight: 0.1,
            lm_batch_size: 8,
            train_purifier: false,
            val_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step3 {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Allowed relative rise of validation CE over the step-2 value.
    pub regression_tolerance: f64,
}

impl Default for Step3 {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 3e-4,
            batch_size: 32,
            regression_tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub step1: Step1,
    pub step2: Step2,
    pub step3: Step3,
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.step2.train_purifier {
            return Err(Error::config("the purifier must stay frozen during step 2"));
        }
        if self.step1.batch_rows == 0 || self.step2.batch_size == 0 || self.step3.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.step2.ppl_eval_every == 0 {
            return Err(Error::config("ppl_eval_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.step1.holdout_fraction)
            || !(0.0..1.0).contains(&self.step2.val_fraction)
        {
            return Err(Error::config("holdout fractions must be in [0, 1)"));
        }
        if self.step2.lm_weight < 0.0 || self.step3.regression_tolerance < 0.0 {
            return Err(Error::config("weights and tolerances must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
    Sample { temperature: f64, seed: u64 },
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        Self::Greedy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purifier_none_needs_equal_dims() {
        let mut c = AttackerConfig::new(16, 8, 20, 10, &DecoderShape::default(), PurifierConfig::of(PurifierVariant::None), 1);
        assert!(c.validate().is_err());
        c.d_in = 8;
        c.validate().unwrap();
    }

    #[test]
    fn unfrozen_step2_is_a_config_error() {
        let mut r = TrainRecipe::default();
        r.validate().unwrap();
        r.step2.train_purifier = true;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn decode_strategy_toml() {
        #[derive(Deserialize)]
        struct W {
            d: DecodeStrategy,
        }
        assert_eq!(toml::from_str::<W>("d = \"greedy\"").unwrap().d, DecodeStrategy::Greedy);
        assert_eq!(toml::from_str::<W>("d = { beam = 4 }").unwrap().d, DecodeStrategy::Beam(4));
        let s = toml::from_str::<W>("d = { sample = { temperature = 0.7, seed = 3 } }").unwrap().d;
        assert_eq!(s, DecodeStrategy::Sample { temperature: 0.7, seed: 3 });
    }
}
