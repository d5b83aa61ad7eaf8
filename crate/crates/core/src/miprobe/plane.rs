use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::{discretize, BinningConfig};
use super::estimator::{entropy, mutual_information, pearson};
use crate::corpus::TextRecord;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::tinylm::{argmax, Arch, TapPoint, TapPosition, VictimModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XSource {
    /// Class labels when every record has one, record ids otherwise.
    Auto,
    Labels,
    RecordIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// The state at the final input position.
    LastRow,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeOptions {
    pub x_source: XSource,
    pub pooling: Pooling,
    /// Feed only the first half of each record (BOS plus half the words)
    /// so the final position predicts a real next word instead of EOS.
    pub half_prefix: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            x_source: XSource::Auto,
            pooling: Pooling::LastRow,
            half_prefix: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub tap: TapPoint,
    pub i_xh: f64,
    pub i_hy: f64,
    pub h_x: f64,
    pub h_h: f64,
    pub h_y: f64,
    pub n_samples: usize,
    pub binning: BinningConfig,
    pub distinct_h: usize,
    pub hash_collisions: usize,
    /// Fewer than `10 * n_bins` samples per active dimension.
    pub undersampled: bool,
}

/// `BOS` plus the first half of the words (at least one).
fn probe_input(tokens: &[u32], half: bool) -> &[u32] {
    if !half || tokens.len() <= 3 {
        return tokens;
    }
    let words = tokens.len() - 2;
    &tokens[..1 + (words / 2).max(1)]
}

fn pool(states: &Tensor, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::LastRow => states.row(states.rows() - 1).to_vec(),
        Pooling::Mean => {
            let mut m = vec![0.0; states.cols()];
            for r in 0..states.rows() {
                for (a, b) in m.iter_mut().zip(states.row(r)) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|v| *v /= states.rows() as f64);
            m
        }
    }
}

/// Output symbol: next-token argmax at the final position (decoder-only),
/// first decoded token (encoder-decoder) or predicted class.
fn output_symbol(arch: Arch, logits: &Tensor) -> u64 {
    let row = match arch {
        Arch::DecoderOnly => logits.rows() - 1,
        Arch::EncoderDecoder | Arch::EncoderMlp => 0,
    };
    argmax(logits.row(row)) as u64
}

/// Estimate `(I(X;H), I(H;Y))` in bits at every tap over `records`.
pub fn information_plane(
    victim: &VictimModel,
    records: &[&TextRecord],
    taps: &[TapPoint],
    binning: &BinningConfig,
    opts: &ProbeOptions,
) -> Result<Vec<MIEstimate>> {
    binning.validate()?;
    if records.is_empty() || taps.is_empty() {
        return Err(Error::EmptyInput);
    }
    let use_labels = match opts.x_source {
        XSource::Labels => {
            if records.iter().any(|r| r.label.is_none()) {
                return Err(Error::invalid("x_source = labels but some records are unlabeled"));
            }
            true
        }
        XSource::RecordIds => false,
        XSource::Auto => records.iter().all(|r| r.label.is_some()),
    };
    let xs: Vec<u64> = records
        .iter()
        .enumerate()
        .map(|(i, r)| if use_labels { r.label.unwrap_or(0) as u64 } else { i as u64 })
        .collect();

    let d = victim.config().d_model;
    let mut pooled: Vec<Vec<f64>> = vec![Vec::with_capacity(records.len() * d); taps.len()];
    let mut ys = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|r| probe_input(&r.tokens, opts.half_prefix)).collect();
        let out = victim.run_batch(&seqs, taps, true)?;
        for (ti, per_seq) in out.states.iter().enumerate() {
            for s in per_seq {
                pooled[ti].extend(pool(s, opts.pooling));
            }
        }
        ys.extend(out.logits.iter().map(|l| output_symbol(victim.config().arch, l)));
    }
    let h_x = entropy(&xs)?;
    let h_y = entropy(&ys)?;
    let n = records.len();
    let estimates = taps
        .par_iter()
        .zip(pooled.into_par_iter())
        .map(|(&tap, rows)| {
            let disc = discretize(&Tensor::from_vec(n, d, rows), binning)?;
            let undersampled = n < 10 * binning.n_bins * disc.active_dims;
            if undersampled {
                log::warn!("tap {tap}: {n} samples undersample {} bins x {} dims", binning.n_bins, disc.active_dims);
            }
            Ok(MIEstimate {
                tap,
                i_xh: mutual_information(&xs, &disc.symbols)?,
                i_hy: mutual_information(&disc.symbols, &ys)?,
                h_x,
                h_h: entropy(&disc.symbols)?,
                h_y,
                n_samples: n,
                binning: binning.clone(),
                distinct_h: disc.distinct_tuples,
                hash_collisions: disc.hash_collisions,
                undersampled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(estimates)
}

/// Comma-separated plot data, one row per estimate.
pub fn plane_csv(estimates: &[MIEstimate]) -> String {
    let mut s = String::from("block_index,position,i_xh_bits,i_hy_bits,n_samples,undersampled\n");
    for e in estimates {
        s.push_str(&format!(
            "{},{},{:.12},{:.12},{},{}\n",
            e.tap.block_index,
            e.tap.position.as_str(),
            e.i_xh,
            e.i_hy,
            e.n_samples,
            e.undersampled
        ));
    }
    s
}

/// Pearson correlation of `i_xh` and `i_hy` over the block_out taps.
pub fn block_out_correlation(estimates: &[MIEstimate]) -> Option<f64> {
    let (xh, hy): (Vec<f64>, Vec<f64>) = estimates
        .iter()
        .filter(|e| e.tap.position == TapPosition::BlockOut)
        .map(|e| (e.i_xh, e.i_hy))
        .unzip();
    pearson(&xh, &hy)
}

/// Whether `i_xh` ever rises from one block_out tap to the next (the curve
/// is reported either way).
pub fn xh_non_monotone(estimates: &[MIEstimate]) -> bool {
    let xh: Vec<f64> = estimates
        .iter()
        .filter(|e| e.tap.position == TapPosition::BlockOut)
        .map(|e| e.i_xh)
        .collect();
    xh.windows(2).any(|w| w[1] > w[0] + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_keeps_half_the_words() {
        assert_eq!(probe_input(&[0, 5, 6, 7, 8, 1], true), &[0, 5, 6]);
        assert_eq!(probe_input(&[0, 5, 1], true), &[0, 5, 1]);
        assert_eq!(probe_input(&[0, 5, 6, 1], true), &[0, 5]);
        assert_eq!(probe_input(&[0, 5, 6, 1], false), &[0, 5, 6, 1]);
    }

    #[test]
    fn csv_layout() {
        let e = MIEstimate {
            tap: TapPoint::block_out(2),
            i_xh: 1.5,
            i_hy: 0.25,
            h_x: 3.0,
            h_h: 2.0,
            h_y: 1.0,
            n_samples: 100,
            binning: BinningConfig::default(),
            distinct_h: 10,
            hash_collisions: 0,
            undersampled: true,
        };
        let csv = plane_csv(&[e]);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "2,block_out,1.500000000000,0.250000000000,100,true"
        );
    }
}
