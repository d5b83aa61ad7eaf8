//! Minimal dense-tensor engine with reverse-mode autodiff, used by both the
//! victim language models and the inversion attacker.

pub mod checkpoint;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use graph::{AttnSegment, AttnSpec, Graph, Var};
pub use params::{Adam, AdamConfig, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

/// Packed variable-length batch: sequences laid end to end, no padding.
#[derive(Clone, Debug, Default)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut p = Packed::default();
        for s in seqs {
            let s = s.as_ref();
            p.ids.extend(s.iter().map(|&t| t as usize));
            p.positions.extend(0..s.len());
            p.lens.push(s.len());
        }
        p
    }

    pub fn total(&self) -> usize {
        self.ids.len()
    }

    /// `(start, len)` of every sequence.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        Self::segments_of(&self.lens)
    }

    pub fn segments_of(lens: &[usize]) -> Vec<(usize, usize)> {
        let mut start = 0;
        lens.iter()
            .map(|&l| {
                let s = (start, l);
                start += l;
                s
            })
            .collect()
    }
}
