//! Evaluation: retrieval utility, recall, masked-token and QA accuracy,
//! corpus-swap probes, and seeded ablation runs.

mod experiment;
mod measures;
mod predict;
mod swap;

pub use experiment::{
    final_loss, mean_top1_ru, qa_exact_match, run_ablation, run_experiment, AblationAxis,
    AblationSpec, AblationTable, ExperimentConfig, ExperimentData, Reset, RunOutput, RunSummary,
};
pub use measures::{
    exact_match, mean_finite, recall_at_k, retrieval_utility, utility_from_log_probs, RecallOracle,
    RecallQuery, RetrievalUtilityRecord,
};
pub use predict::{masked_accuracy, masked_marginal, predict_answer, predict_masked};
pub use swap::{corpus_swap_test, SwapOutcome};
