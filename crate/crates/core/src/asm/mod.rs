//! Action Structure Model: encoder, masked conditional modeling, the
//! alternative pre-training objectives and the pre-training loop.

mod masking;
mod model;
mod objectives;
mod pretrain;

pub use masking::{corrupt, mam_loss, sample_mask_plan, Fate, MaskPlan};
pub use model::{state_batch, AsmConfig, AsmModel, Encoded};
pub use objectives::{CamConfig, CamHead, Objective, ObjectiveKind, VamConfig, VamHead, VamTerms};
pub use pretrain::{masked_accuracy, pretrain, PretrainConfig, PretrainLog};
