//! Stage-2 policies over a frozen encoder, baselines, critics and the
//! offline training loop.

mod actor;
mod critic;
mod train;

pub use actor::{AllowedSets, Features, HeadInit, Method, Policy, PolicyBound};
pub use critic::{advantage_weight, multi_hot, support_mask, Algo, AlgoConfig, Batch, Critic, CriticStep};
pub use train::{
    actor_update, evaluate_policy, evaluate_with, make_batch, train_policy, ActorOptimizer, ActorStep, EvalResult,
    MetricsRecord, TrainConfig,
};
