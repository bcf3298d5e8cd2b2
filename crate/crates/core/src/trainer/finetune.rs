use rand::Rng;

use crate::mipsindex::IndexSnapshot;
use crate::textcorpus::{KnowledgeCorpus, QaExample};
use crate::{rng, Error, Result, Scalar};

use super::config::{FinetuneConfig, OptimizerConfig};
use super::marginal::{marginal_loss_and_grads, select_candidates, CandidateRule, Target};
use super::metrics::StepRecord;
use super::params::{ParamGrads, ParamStore, DOC_TOWER_TENSORS};

pub const FINETUNE_STREAM: &str = "finetune";

/// Candidate rule for fine-tuning: top-k documents, no ∅, no exclusion.
pub fn finetune_rule(k: usize) -> CandidateRule {
    CandidateRule {
        docs: k,
        exclude_trivial: false,
        include_null: false,
    }
}

/// Loss and gradients for one QA example, or `None` (skip) when no
/// reference answer occurs in any retrieved candidate. The first reference
/// that occurs somewhere is the training target.
pub fn finetune_example<T: Scalar>(
    store: &ParamStore<T>,
    ex: &QaExample,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    k: usize,
) -> Result<Option<(f64, ParamGrads<T>)>> {
    let candidates = select_candidates(
        &ex.question,
        "",
        &store.theta,
        index,
        corpus,
        finetune_rule(k),
    )?;
    for answer in &ex.answers {
        if answer.is_empty() {
            continue;
        }
        let target = Target::Answer {
            question: &ex.question,
            answer,
        };
        if let Some((res, g)) = marginal_loss_and_grads(store, target, &candidates)? {
            return Ok(Some((-res.log_p_y.f64(), g)));
        }
    }
    Ok(None)
}

/// One fine-tuning step over a batch drawn from `train`. The document
/// tower is frozen so `index`, built once before fine-tuning, stays exact.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<T: Scalar>(
    store: &mut ParamStore<T>,
    train: &[QaExample],
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    cfg: &FinetuneConfig,
    optimizer: &OptimizerConfig,
    clip_norm: f64,
    seed: u64,
    step: u64,
) -> Result<StepRecord> {
    if train.is_empty() {
        return Err(Error::Validation("no fine-tuning examples".into()));
    }
    let mut grads = ParamGrads::zeros_like(store);
    let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0u64);
    let mut per_example = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size as u64 {
        let pick = rng::stream(seed, FINETUNE_STREAM, &[step, slot]).random_range(0..train.len());
        match finetune_example(store, &train[pick], index, corpus, cfg.k)? {
            Some(lg) => per_example.push(lg),
            None => skipped += 1,
        }
    }
    if !per_example.is_empty() {
        let inv = T::c(1.0 / per_example.len() as f64);
        for (l, g) in &per_example {
            loss += l;
            used += 1;
            grads.add_scaled(g, inv);
        }
    }
    let grad_norm = if used > 0 {
        store.apply(
            &grads,
            optimizer,
            cfg.learning_rate,
            clip_norm,
            &DOC_TOWER_TENSORS,
        )?
    } else {
        0.0
    };
    Ok(StepRecord {
        step: step + 1,
        loss: if used > 0 { loss / used as f64 } else { 0.0 },
        staleness: store.version().0.saturating_sub(index.version().0),
        index_version: index.version().0,
        ru_top1: 0.0,
        grad_norm,
        skipped: Some(skipped),
        recall_at_k: None,
    })
}
