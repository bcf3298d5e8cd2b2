//! Training: marginal-likelihood pre-training over retrieved documents,
//! inverse-cloze and MLM warm-start, and open-QA fine-tuning.

mod checkpoint;
mod config;
mod data;
mod finetune;
mod marginal;
mod metrics;
mod params;
mod pretrain;
mod warmstart;

pub use checkpoint::{Checkpoint, RefreshState, CHECKPOINT_FORMAT, CHECKPOINT_MAGIC};
pub use config::{FinetuneConfig, OptimizerConfig, RefreshInterval, TrainConfig, WarmstartConfig};
pub use data::PretrainData;
pub use finetune::{finetune_example, finetune_rule, finetune_step, FINETUNE_STREAM};
pub use marginal::{
    flatten_theta, marginal_forward, marginal_graph, marginal_loss_and_grads, marginal_over,
    marginal_terms, marginal_values, retriever_gradient_autodiff, retriever_gradient_explicit,
    select_candidates, CandidateRule, MarginalGraph, MarginalResult, Target,
};
pub use metrics::{read_metrics, MetricsHeader, MetricsSink, StepRecord};
pub use params::{ParamGrads, ParamStore, StoreNodes, DOC_TOWER_TENSORS};
pub use pretrain::{top1_retrieval_utility, Pretrainer, PRETRAIN_STREAM};
pub use warmstart::{
    ict_batch_loss, ict_recall_at_1, ict_warmstart, mlm_warmstart, warmstart, WarmstartLog,
    ICT_EVAL_STREAM, ICT_STREAM, MLM_WARMSTART_STREAM,
};
