use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    GlobalMinmax,
    PerDimMinmax,
    /// Values outside `[a, b]` fall into the first or last bin.
    Fixed(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimReduction {
    /// Exact joint symbols: one id per distinct bin tuple.
    None,
    PerDimThenJointHash,
    /// Project onto `k` seeded Gaussian directions, then hash.
    RandomProjection(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    pub n_bins: usize,
    pub range_mode: RangeMode,
    pub dim_reduction: DimReduction,
    pub projection_seed: u64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            n_bins: 30,
            range_mode: RangeMode::GlobalMinmax,
            dim_reduction: DimReduction::RandomProjection(10),
            projection_seed: 0,
        }
    }
}

impl BinningConfig {
    /// Defaults for a given width: exact hashing up to 16 dims, a 10-dim
    /// random projection beyond.
    pub fn for_width(d: usize) -> Self {
        Self {
            dim_reduction: if d > 16 {
                DimReduction::RandomProjection(10)
            } else {
                DimReduction::PerDimThenJointHash
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(Error::config("n_bins must be at least 2"));
        }
        if let RangeMode::Fixed(a, b) = self.range_mode {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::config(format!("fixed range ({a}, {b}) is empty")));
            }
        }
        if self.dim_reduction == DimReduction::RandomProjection(0) {
            return Err(Error::config("random projection needs k >= 1"));
        }
        Ok(())
    }

    /// Dimensions that carry bins after reduction.
    pub fn active_dims(&self, d: usize) -> usize {
        match self.dim_reduction {
            DimReduction::RandomProjection(k) => k,
            _ => d,
        }
    }
}

/// Bin of `v` among `n` equal bins over `[lo, hi]`. Bins are right-closed
/// `(e_j, e_{j+1}]` with the first also holding `lo`, so a value sitting on
/// an interior edge goes to the lower bin. Edges are `lo + w * (j / n)`,
/// which makes the partitions for `n` and `2n` nest exactly.
pub fn bin_index(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    if !(hi > lo) {
        return 0;
    }
    let w = hi - lo;
    let edge = |j: usize| lo + w * (j as f64 / n as f64);
    // First j with v <= e_{j+1}.
    let (mut a, mut b) = (0usize, n - 1);
    while a < b {
        let mid = (a + b) / 2;
        if v <= edge(mid + 1) {
            b = mid;
        } else {
            a = mid + 1;
        }
    }
    a
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bins: &[u32]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bins {
        for byte in b.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Discretized rows and bookkeeping about the joint alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub symbols: Vec<u64>,
    /// Distinct bin tuples seen.
    pub distinct_tuples: usize,
    /// Distinct tuples that share a hash with another tuple.
    pub hash_collisions: usize,
    pub active_dims: usize,
}

fn project(rows: &Tensor, k: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rows.cols();
    let scale = 1.0 / (k as f64).sqrt();
    let dirs: Vec<f64> = (0..d * k)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|x: f64| x * scale)
        .collect();
    rows.matmul(&Tensor::from_vec(d, k, dirs))
}

/// Map each row to one joint symbol. Constant dimensions (under per-dim
/// ranges) or a constant matrix (global range) land in bin 0.
pub fn discretize(rows: &Tensor, config: &BinningConfig) -> Result<Discretized> {
    config.validate()?;
    if rows.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if !rows.is_finite() {
        return Err(Error::NonFinite);
    }
    let data = match config.dim_reduction {
        DimReduction::RandomProjection(k) => project(rows, k, config.projection_seed),
        _ => rows.clone(),
    };
    let (n, d) = data.shape();
    let ranges: Vec<(f64, f64)> = match config.range_mode {
        RangeMode::Fixed(a, b) => vec![(a, b); d],
        RangeMode::GlobalMinmax => {
            let lo = data.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vec![(lo, hi); d]
        }
        RangeMode::PerDimMinmax => (0..d)
            .map(|j| {
                (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                    let v = data.get(i, j);
                    (lo.min(v), hi.max(v))
                })
            })
            .collect(),
    };
    let mut tuples: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut symbols = Vec::with_capacity(n);
    let mut bins = vec![0u32; d];
    for i in 0..n {
        for (j, b) in bins.iter_mut().enumerate() {
            let (lo, hi) = ranges[j];
            let v = data.get(i, j).clamp(lo.min(hi), hi.max(lo));
            *b = bin_index(v, lo, hi, config.n_bins) as u32;
        }
        let next = tuples.len() as u64;
        let sym = match config.dim_reduction {
            DimReduction::None => *tuples.entry(bins.clone()).or_insert(next),
            _ => {
                let h = fnv1a(&bins);
                tuples.entry(bins.clone()).or_insert(h);
                h
            }
        };
        symbols.push(sym);
    }
    let distinct_tuples = tuples.len();
    let hash_collisions = match config.dim_reduction {
        DimReduction::None => 0,
        _ => {
            let mut by_hash: HashMap<u64, usize> = HashMap::new();
            for h in tuples.values() {
                *by_hash.entry(*h).or_default() += 1;
            }
            by_hash.values().filter(|&&c| c > 1).sum()
        }
    };
    if hash_collisions > 0 {
        log::warn!("{hash_collisions} bin tuples share a 64-bit hash");
    }
    Ok(Discretized {
        symbols,
        distinct_tuples,
        hash_collisions,
        active_dims: config.active_dims(rows.cols()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_go_to_lower_bin() {
        // Four bins over [0, 1]: edges 0, .25, .5, .75, 1.
        assert_eq!(bin_index(0.0, 0.0, 1.0, 4), 0);
        assert_eq!(bin_index(0.25, 0.0, 1.0, 4), 0);
        assert_eq!(bin_index(0.2500001, 0.0, 1.0, 4), 1);
        assert_eq!(bin_index(0.5, 0.0, 1.0, 4), 1);
        assert_eq!(bin_index(1.0, 0.0, 1.0, 4), 3);
        assert_eq!(bin_index(3.0, 3.0, 3.0, 4), 0);
    }

    #[test]
    fn sign_patterns_with_two_bins() {
        let rows = Tensor::from_vec(4, 2, vec![-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
        let cfg = BinningConfig {
            n_bins: 2,
            range_mode: RangeMode::PerDimMinmax,
            dim_reduction: DimReduction::None,
            projection_seed: 0,
        };
        let d = discretize(&rows, &cfg).unwrap();
        assert_eq!(d.symbols, vec![0, 1, 2, 3]);
        assert_eq!(d.distinct_tuples, 4);
    }

    #[test]
    fn constant_dimension_maps_to_bin_zero() {
        let rows = Tensor::from_vec(3, 2, vec![5.0, 0.0, 5.0, 1.0, 5.0, 2.0]);
        let cfg = BinningConfig {
            n_bins: 3,
            range_mode: RangeMode::PerDimMinmax,
            dim_reduction: DimReduction::None,
            projection_seed: 0,
        };
        assert_eq!(discretize(&rows, &cfg).unwrap().symbols, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_config_and_nan() {
        let rows = Tensor::from_vec(1, 1, vec![f64::NAN]);
        assert!(discretize(&rows, &BinningConfig::default()).is_err());
        let bad = BinningConfig {
            n_bins: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_shapes() {
        let c: BinningConfig = toml::from_str(
            "n_bins = 8\nrange_mode = { fixed = [-1.0, 1.0] }\ndim_reduction = { random_projection = 3 }\n",
        )
        .unwrap();
        assert_eq!(c.range_mode, RangeMode::Fixed(-1.0, 1.0));
        assert_eq!(c.dim_reduction, DimReduction::RandomProjection(3));
        let c: BinningConfig = toml::from_str("dim_reduction = \"none\"").unwrap();
        assert_eq!(c.dim_reduction, DimReduction::None);
        assert_eq!(c.n_bins, 30);
    }

    proptest! {
        #[test]
        fn doubling_bins_refines(v in -5.0f64..5.0, lo in -6.0f64..0.0, w in 0.1f64..12.0, k in 1usize..6) {
            let n = 1usize << k;
            let coarse = bin_index(v, lo, lo + w, n);
            let fine = bin_index(v, lo, lo + w, 2 * n);
            prop_assert_eq!(fine / 2, coarse);
        }
    }
}
