//! Objectives, optimizer and the pre-training / fine-tuning loops.

pub mod data;
pub mod finetune;
pub mod hungarian;
pub mod loss;
pub mod optim;
pub mod pretrain;

pub use data::{CaseData, CaseSet};
pub use finetune::{detector_from_pretrained, finetune, FinetuneConfig, FinetuneReport};
pub use hungarian::hungarian;
pub use loss::{detection_loss, mae_loss, match_queries, DetectionLoss, DetectionTargets, MaeLoss, MatchResult};
pub use optim::{cosine_lr, AdamW};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
