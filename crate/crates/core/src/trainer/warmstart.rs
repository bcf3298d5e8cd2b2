use rand::seq::index::sample;
use rand::Rng;

use crate::diffcore::Graph;
use crate::mipsindex::{build_index, IndexStructure};
use crate::retriever::{embed_doc_node, embed_input, embed_input_node, ParamVersion};
use crate::textcorpus::{Document, IctSampler, KnowledgeCorpus, TokenId};
use crate::{rng, Error, Result, Scalar};

use super::config::{OptimizerConfig, WarmstartConfig};
use super::data::PretrainData;
use super::marginal::{marginal_loss_and_grads, Target};
use super::params::{ParamGrads, ParamStore};

pub const ICT_STREAM: &str = "ict";
pub const ICT_EVAL_STREAM: &str = "ict-eval";
pub const MLM_WARMSTART_STREAM: &str = "mlm-warmstart";

/// Progress of a warm-start phase, one entry per step.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmstartLog {
    pub ict_loss: Vec<f64>,
    pub mlm_loss: Vec<f64>,
}

fn frozen_names<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<String> {
    store
        .names()
        .into_iter()
        .filter(|n| n.starts_with(prefix))
        .collect()
}

/// In-batch-negative ICT loss and θ gradients for one batch.
pub fn ict_batch_loss<T: Scalar>(
    store: &ParamStore<T>,
    queries: &[Vec<TokenId>],
    contexts: &[Document],
) -> Result<(f64, ParamGrads<T>)> {
    let b = queries.len();
    if b == 0 || contexts.len() != b {
        return Err(Error::contract(
            "ICT batch needs matching non-empty queries and contexts",
        ));
    }
    let mut g = Graph::new();
    let nodes = store.bind(&mut g)?;
    let mut qs = Vec::with_capacity(b);
    let mut ds = Vec::with_capacity(b);
    for (q, d) in queries.iter().zip(contexts) {
        let qe = embed_input_node(&mut g, &nodes.theta, q)?;
        qs.push(g.transpose(qe)?);
        let de = embed_doc_node(&mut g, &nodes.theta, d)?;
        ds.push(g.transpose(de)?);
    }
    let qt = g.concat(&qs)?;
    let dt = g.concat(&ds)?;
    let q = g.transpose(qt)?;
    let scores = g.matmul(q, dt)?;
    let lsm = g.log_softmax(scores)?;
    let flat = g.reshape(lsm, vec![b * b])?;
    let diag = g.select(flat, (0..b).map(|i| i * b + i).collect())?;
    let total = g.sum(diag)?;
    let loss = g.scale(total, T::c(-1.0 / b as f64))?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item().f64(), nodes.gradients(&grads)))
}

/// Train θ with the inverse cloze task; φ is untouched.
pub fn ict_warmstart<T: Scalar>(
    store: &mut ParamStore<T>,
    corpus: &KnowledgeCorpus,
    period: Option<TokenId>,
    cfg: &WarmstartConfig,
    optimizer: &OptimizerConfig,
    clip_norm: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let sampler = IctSampler::new(corpus, period)?;
    let frozen = frozen_names(store, "phi.");
    let frozen: Vec<&str> = frozen.iter().map(String::as_str).collect();
    let b = cfg.ict_batch_size.min(sampler.num_eligible());
    let mut losses = Vec::with_capacity(cfg.ict_steps as usize);
    for step in 0..cfg.ict_steps {
        let mut r = rng::stream(seed, ICT_STREAM, &[step]);
        // Distinct positives, so no in-batch negative is a hidden positive.
        let slots = sample(&mut r, sampler.num_eligible(), b);
        let (mut queries, mut contexts) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for slot in slots.iter() {
            let ex = sampler.sample_from(slot, r.random());
            queries.push(ex.query);
            contexts.push(ex.context);
        }
        let (loss, grads) = ict_batch_loss(store, &queries, &contexts)?;
        store.apply(&grads, optimizer, cfg.ict_learning_rate, clip_norm, &frozen)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Source-document recall@1 for `n` ICT queries drawn from the evaluation
/// stream, searched exhaustively over the full documents.
pub fn ict_recall_at_1<T: Scalar>(
    store: &ParamStore<T>,
    corpus: &KnowledgeCorpus,
    period: Option<TokenId>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("recall over zero queries"));
    }
    let sampler = IctSampler::new(corpus, period)?;
    let index = build_index(
        corpus,
        &store.theta,
        store.version(),
        IndexStructure::Exhaustive,
        0,
    )?;
    let mut hits = 0;
    for i in 0..n as u64 {
        let ex = sampler.sample(rng::stream(seed, ICT_EVAL_STREAM, &[i]).random());
        let q = embed_input(&ex.query, &store.theta)?;
        if index.search_topk(&q, 1)?.doc_ids[0] == ex.positive_doc_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Retrieval-free MLM training of φ: every example is read against ∅.
pub fn mlm_warmstart<T: Scalar>(
    store: &mut ParamStore<T>,
    data: &PretrainData,
    masking: crate::textcorpus::MaskingScheme,
    cfg: &WarmstartConfig,
    optimizer: &OptimizerConfig,
    clip_norm: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let frozen = frozen_names(store, "theta.");
    let frozen: Vec<&str> = frozen.iter().map(String::as_str).collect();
    let null = [Document::null()];
    let b = cfg.mlm_batch_size.max(1);
    let inv = T::c(1.0 / b as f64);
    let mut losses = Vec::with_capacity(cfg.mlm_steps as usize);
    for step in 0..cfg.mlm_steps {
        let mut grads = ParamGrads::zeros_like(store);
        let mut loss = 0.0;
        for slot in 0..b as u64 {
            let x = data.example(masking, seed, MLM_WARMSTART_STREAM, step, slot)?;
            let (res, g) = marginal_loss_and_grads(store, Target::Masked(&x), &null)?
                .ok_or_else(|| Error::contract("masked example with p(y|x) = 0"))?;
            loss -= res.log_p_y.f64();
            grads.add_scaled(&g, inv);
        }
        store.apply(&grads, optimizer, cfg.mlm_learning_rate, clip_norm, &frozen)?;
        losses.push(loss / b as f64);
    }
    Ok(losses)
}

/// Full warm-start: ICT for θ, then retrieval-free MLM for φ. The returned
/// store starts pre-training at version 0 with fresh optimizer moments.
#[allow(clippy::too_many_arguments)]
pub fn warmstart<T: Scalar>(
    store: &mut ParamStore<T>,
    corpus: &KnowledgeCorpus,
    data: &PretrainData,
    period: Option<TokenId>,
    masking: crate::textcorpus::MaskingScheme,
    cfg: &WarmstartConfig,
    optimizer: &OptimizerConfig,
    clip_norm: f64,
    seed: u64,
) -> Result<WarmstartLog> {
    let ict_loss = if cfg.ict_steps > 0 {
        ict_warmstart(store, corpus, period, cfg, optimizer, clip_norm, seed)?
    } else {
        Vec::new()
    };
    store.reset_optimizer();
    let mlm_loss = mlm_warmstart(store, data, masking, cfg, optimizer, clip_norm, seed)?;
    store.reset_optimizer();
    store.set_version(ParamVersion(0));
    Ok(WarmstartLog { ict_loss, mlm_loss })
}
