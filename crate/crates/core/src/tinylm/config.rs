use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Causal language model.
    DecoderOnly,
    /// Bidirectional encoder plus a cross-attending decoder trained to
    /// reconstruct the (noised) encoder input.
    EncoderDecoder,
    /// Bidirectional encoder, mean pooling and a four-layer MLP classifier.
    EncoderMlp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Class count, required by [`Arch::EncoderMlp`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
}

pub const MLP_HEAD_LAYERS: usize = 4;

impl ModelConfig {
    /// The standard toy victim: decoder-only, 4 blocks, d_model 64, 4 heads.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            arch: Arch::DecoderOnly,
            n_blocks: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 32,
            seed,
            n_classes: None,
        }
    }

    /// Encoder followed by a four-layer MLP classifier; attacked right after
    /// the first block (see [`TapPoint::case1_default`]).
    pub fn case1(vocab_size: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            arch: Arch::EncoderMlp,
            n_blocks: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_seq_len: 32,
            seed,
            n_classes: Some(n_classes),
        }
    }

    /// Two blocks at width 8, for gradient checks.
    pub fn micro(arch: Arch, vocab_size: usize, seed: u64) -> Self {
        Self {
            arch,
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size,
            max_seq_len: 12,
            seed,
            n_classes: (arch == Arch::EncoderMlp).then_some(3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 2 {
            return Err(Error::config("n_blocks must be at least 2"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.vocab_size < 4 || self.max_seq_len < 3 {
            return Err(Error::config("d_ff, vocab_size and max_seq_len too small"));
        }
        match (self.arch, self.n_classes) {
            (Arch::EncoderMlp, Some(c)) if c >= 2 => Ok(()),
            (Arch::EncoderMlp, _) => Err(Error::config("encoder_mlp needs n_classes >= 2")),
            _ => Ok(()),
        }
    }

    pub fn is_causal(&self) -> bool {
        self.arch == Arch::DecoderOnly
    }

    /// Width of the output distribution.
    pub fn n_outputs(&self) -> usize {
        match self.arch {
            Arch::EncoderMlp => self.n_classes.unwrap_or(2),
            _ => self.vocab_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPosition {
    /// Token plus position embedding, before block 0.
    Embedding,
    /// Residual stream right after the attention sublayer's residual add.
    AttentionOut,
    /// Raw feed-forward sublayer output, before its residual add.
    FfnOut,
    /// Residual stream at the end of the block.
    BlockOut,
}

impl TapPosition {
    pub const ALL: [TapPosition; 4] = [
        Self::Embedding,
        Self::AttentionOut,
        Self::FfnOut,
        Self::BlockOut,
    ];

    pub fn code(self) -> u8 {
        match self {
            Self::Embedding => 0,
            Self::AttentionOut => 1,
            Self::FfnOut => 2,
            Self::BlockOut => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.code() == c)
            .ok_or_else(|| Error::Frame(format!("unknown tap position code {c}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::AttentionOut => "attention_out",
            Self::FfnOut => "ffn_out",
            Self::BlockOut => "block_out",
        }
    }
}

impl FromStr for TapPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown tap position {s:?}")))
    }
}

/// Where a representation is observed: `BLOCK:POSITION`, e.g. `0:block_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TapPoint {
    pub block_index: usize,
    pub position: TapPosition,
}

impl TapPoint {
    pub fn new(block_index: usize, position: TapPosition) -> Self {
        Self {
            block_index,
            position,
        }
    }

    pub fn embedding() -> Self {
        Self::new(0, TapPosition::Embedding)
    }

    pub fn block_out(block: usize) -> Self {
        Self::new(block, TapPosition::BlockOut)
    }

    pub fn case1_default() -> Self {
        Self::block_out(0)
    }

    /// Embedding tap followed by the three in-block taps of every block.
    pub fn all(config: &ModelConfig) -> Vec<TapPoint> {
        let mut taps = vec![Self::embedding()];
        for b in 0..config.n_blocks {
            for p in [
                TapPosition::AttentionOut,
                TapPosition::FfnOut,
                TapPosition::BlockOut,
            ] {
                taps.push(Self::new(b, p));
            }
        }
        taps
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.block_index >= config.n_blocks {
            return Err(Error::InvalidTap {
                tap: self.to_string(),
                reason: format!("model has {} blocks", config.n_blocks),
            });
        }
        if self.position == TapPosition::Embedding && self.block_index != 0 {
            return Err(Error::InvalidTap {
                tap: self.to_string(),
                reason: "embedding tap only exists at block 0".into(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.block_index, self.position.as_str())
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (b, p) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("tap must be BLOCK:POSITION, got {s:?}")))?;
        let block_index = b
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad block index in tap {s:?}")))?;
        Ok(Self::new(block_index, p.trim().parse()?))
    }
}

impl TryFrom<String> for TapPoint {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TapPoint> for String {
    fn from(t: TapPoint) -> String {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        let mut c = ModelConfig::toy(100, 1);
        c.validate().unwrap();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(100, 1);
        c.n_blocks = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::case1(100, 8, 1);
        c.validate().unwrap();
        c.n_classes = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tap_parse_and_validate() {
        let c = ModelConfig::toy(100, 1);
        let t: TapPoint = "2:attention_out".parse().unwrap();
        assert_eq!(t, TapPoint::new(2, TapPosition::AttentionOut));
        assert_eq!(t.to_string(), "2:attention_out");
        assert!("1:embedding".parse::<TapPoint>().unwrap().validate(&c).is_err());
        assert!("4:block_out".parse::<TapPoint>().unwrap().validate(&c).is_err());
        assert!("x:block_out".parse::<TapPoint>().is_err());
        assert!("0:pooler".parse::<TapPoint>().is_err());
        assert_eq!(TapPoint::all(&c).len(), 13);
    }

    #[test]
    fn position_codes_roundtrip() {
        for p in TapPosition::ALL {
            assert_eq!(TapPosition::from_code(p.code()).unwrap(), p);
        }
        assert!(TapPosition::from_code(9).is_err());
    }
}
