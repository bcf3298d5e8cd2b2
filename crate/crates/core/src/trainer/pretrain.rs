use std::sync::Arc;

use crate::mipsindex::{BuildSpec, IndexRefresher, IndexSnapshot, SimulatedRefresher};
use crate::reader::mlm_log_probability;
use crate::textcorpus::{Document, KnowledgeCorpus, MaskedExample};
use crate::{Error, Result, Scalar};

use super::checkpoint::{Checkpoint, RefreshState};
use super::config::TrainConfig;
use super::data::PretrainData;
use super::marginal::{
    marginal_loss_and_grads, select_candidates, CandidateRule, MarginalResult, Target,
};
use super::metrics::StepRecord;
use super::params::{ParamGrads, ParamStore};

/// Seed stream for pre-training examples.
pub const PRETRAIN_STREAM: &str = "pretrain";

/// Retrieval utility of the most probable candidate.
pub fn top1_retrieval_utility<T: Scalar>(
    result: &MarginalResult<T>,
    x: &MaskedExample,
    store: &ParamStore<T>,
) -> Result<f64> {
    let top = (0..result.p_z.len())
        .max_by(|&a, &b| {
            result.p_z[a]
                .partial_cmp(&result.p_z[b])
                .expect("finite")
                .then(b.cmp(&a))
        })
        .ok_or_else(|| Error::contract("empty candidate set"))?;
    if result.candidates[top].is_null() {
        return Ok(0.0);
    }
    let null_lp = match result.candidates.iter().position(Document::is_null) {
        Some(i) => result.log_p_y_given_z[i],
        None => mlm_log_probability(x, &Document::null(), &store.phi)?,
    };
    Ok((result.log_p_y_given_z[top] - null_lp).f64())
}

/// Marginal-likelihood pre-training with top-k retrieval through an
/// asynchronously refreshed index.
#[derive(Debug)]
pub struct Pretrainer<T: Scalar> {
    cfg: TrainConfig,
    data: Arc<PretrainData>,
    corpus: Arc<KnowledgeCorpus>,
    store: ParamStore<T>,
    refresher: IndexRefresher<T>,
    step: u64,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(
        cfg: TrainConfig,
        data: Arc<PretrainData>,
        corpus: Arc<KnowledgeCorpus>,
        store: ParamStore<T>,
    ) -> Result<Self> {
        cfg.validate(corpus.len())?;
        let spec = build_spec(&cfg, &corpus);
        let refresher = IndexRefresher::new(spec, cfg.schedule(), &store.theta, store.version())?;
        Ok(Pretrainer {
            cfg,
            data,
            corpus,
            store,
            refresher,
            step: 0,
        })
    }

    /// Continue from a pre-training checkpoint. In simulated mode the
    /// continuation is bit-identical to an uninterrupted run.
    pub fn resume(
        cfg: TrainConfig,
        data: Arc<PretrainData>,
        corpus: Arc<KnowledgeCorpus>,
        ck: Checkpoint<T>,
    ) -> Result<Self> {
        cfg.validate(corpus.len())?;
        let spec = build_spec(&cfg, &corpus);
        let refresher = match (cfg.refresh_mode, ck.refresh) {
            (crate::mipsindex::RefreshMode::Simulated, Some(r)) => IndexRefresher::Simulated(
                SimulatedRefresher::restore(spec, cfg.schedule(), r.active_theta, r.protocol)?,
            ),
            _ => IndexRefresher::new(spec, cfg.schedule(), &ck.store.theta, ck.store.version())?,
        };
        Ok(Pretrainer {
            cfg,
            data,
            corpus,
            store: ck.store,
            refresher,
            step: ck.step,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn active_index(&self) -> Arc<IndexSnapshot<T>> {
        self.refresher.active()
    }

    pub fn checkpoint(&self, config_digest: &str) -> Checkpoint<T> {
        let refresh = match &self.refresher {
            IndexRefresher::Simulated(r) => Some(RefreshState {
                active_theta: r.active_theta().clone(),
                protocol: r.state().clone(),
            }),
            IndexRefresher::Threaded(_) => None,
        };
        Checkpoint {
            phase: "pretrain".into(),
            step: self.step,
            config_digest: config_digest.to_string(),
            skipped: 0,
            store: self.store.clone(),
            refresh,
        }
    }

    fn rule(&self) -> CandidateRule {
        CandidateRule {
            docs: self.cfg.docs_per_example(),
            exclude_trivial: self.cfg.exclude_trivial,
            include_null: self.cfg.include_null,
        }
    }

    /// One optimizer step over a batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let index = self.refresher.active();
        let staleness = self.store.version().0.saturating_sub(index.version().0);
        let b = self.cfg.batch_size;
        let mut grads = ParamGrads::zeros_like(&self.store);
        let (mut loss, mut ru) = (0.0, 0.0);
        let inv = T::c(1.0 / b as f64);
        for slot in 0..b as u64 {
            let x = self.data.example(
                self.cfg.masking,
                self.cfg.seed,
                PRETRAIN_STREAM,
                self.step,
                slot,
            )?;
            let candidates = select_candidates(
                &x.input_tokens,
                &x.source_doc_id,
                &self.store.theta,
                &index,
                &self.corpus,
                self.rule(),
            )?;
            let (result, g) = marginal_loss_and_grads(&self.store, Target::Masked(&x), &candidates)
                .map_err(|e| self.numeric_dump(e, &x))?
                .ok_or_else(|| Error::contract("masked example with p(y|x) = 0"))?;
            let l = -result.log_p_y.f64();
            if !l.is_finite() {
                return Err(self.numeric_dump(
                    Error::Numeric {
                        node: 0,
                        op: "marginal",
                        detail: format!("loss {l}"),
                    },
                    &x,
                ));
            }
            loss += l;
            ru += top1_retrieval_utility(&result, &x, &self.store)?;
            grads.add_scaled(&g, inv);
        }
        let grad_norm = self.store.apply_split(
            &grads,
            &self.cfg.optimizer,
            self.cfg
                .retriever_learning_rate
                .unwrap_or(self.cfg.learning_rate),
            self.cfg.learning_rate,
            self.cfg.clip_norm,
            &[],
        )?;
        self.step += 1;
        self.refresher
            .on_trainer_step(self.store.version(), &self.store.theta)?;
        Ok(StepRecord {
            step: self.step,
            loss: loss / b as f64,
            staleness,
            index_version: index.version().0,
            ru_top1: ru / b as f64,
            grad_norm,
            skipped: None,
            recall_at_k: None,
        })
    }

    fn numeric_dump(&self, e: Error, x: &MaskedExample) -> Error {
        match e {
            Error::Numeric { node, op, detail } => {
                let v = self.data.vocab();
                log::error!(
                    "non-finite value at step {}: input {:?}, targets {:?}, source {}",
                    self.step,
                    v.decode(&x.input_tokens),
                    v.decode(&x.targets),
                    x.source_doc_id
                );
                Error::Numeric {
                    node,
                    op,
                    detail: format!(
                        "{detail}; step {} example {:?} source {}",
                        self.step,
                        v.decode(&x.input_tokens),
                        x.source_doc_id
                    ),
                }
            }
            other => other,
        }
    }
}

fn build_spec(cfg: &TrainConfig, corpus: &Arc<KnowledgeCorpus>) -> BuildSpec {
    BuildSpec {
        corpus: Arc::clone(corpus),
        structure: cfg.index,
        seed: crate::rng::stream_seed(cfg.seed, "kmeans"),
    }
}
