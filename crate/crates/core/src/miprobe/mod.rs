//! Discretization-based mutual information between inputs, tapped
//! representations and outputs. All quantities are in bits.

mod binning;
mod estimator;
mod plane;

pub use binning::{bin_index, discretize, BinningConfig, DimReduction, Discretized, RangeMode};
pub use estimator::{entropy, mi_from_joint, mutual_information, pearson};
pub use plane::{
    block_out_correlation, information_plane, plane_csv, xh_non_monotone, MIEstimate, Pooling,
    ProbeOptions, XSource,
};
