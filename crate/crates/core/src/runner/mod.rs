//! Experiment orchestration: run configs, subcommands and manifests.

mod commands;
mod config;
mod manifest;

pub use commands::{
    attack_at, depth_sweep, evaluate_attacker, execute, load_corpus, load_victim, purifier_ablation,
    rerun, sublayer_sweep, sublayer_table, train_attacker_on, AttackCaptures, AttackRun, Subcommand,
    SweepRow,
};
pub use config::{
    tap_dir, AttackSpec, CorpusSource, CorpusSpec, EmbedderKind, MiSpec, PathSpec, RunConfig,
    SweepSpec, VictimSpec, CALIBRATION_CONFIG, DEFAULT_CONFIG,
};
pub use manifest::{provenance, RunManifest};
