//! Joint model, ViT pretraining, joint training and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod trainer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{RegionInput, TrainData};
pub use model::{EncodingMode, JointLoss, JointModel, JointOutput, ModelConfig};
pub use trainer::{
    derived_rng, draw_plans, evaluate, joint_train, pretrain_vit, sample_loss, EpochRow, LogRow, LossSummary,
    Objective, RunOptions, TrainConfig, TrainReport, TrainState, LOG_HEADER,
};
