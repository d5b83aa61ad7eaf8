//! Learning-based inversion of transmitted representations: purifier,
//! mapper and autoregressive decoder, trained in three steps.

mod config;
mod model;
mod train;

pub use config::{
    AttackerConfig, DecodeStrategy, DecoderShape, PurifierConfig, PurifierVariant, Step1, Step2,
    Step3, TargetSpace, TrainRecipe,
};
pub use model::{AttackerModel, DECODER_PREFIX, MAPPER_PREFIX, PURIFIER_PREFIX, TESTER_PREFIX};
pub use train::{
    joint_finetune, pretrain_purifier, run_recipe, train_attacker, warm_start_decoder, AttackData, AttackInputs,
    AttackTrainLog, BatchRecord, ParamDeltas, PplRecord, PurifierReport,
};
