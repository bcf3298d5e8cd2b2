use std::collections::BTreeMap;

use crate::mipsindex::IndexSnapshot;
use crate::reader::{mlm_distributions, span_distribution};
use crate::retriever::{embed_doc, embed_input, retrieval_distribution, ParamVersion};
use crate::textcorpus::{Document, KnowledgeCorpus, MaskedExample, TokenId};
use crate::trainer::{select_candidates, CandidateRule, ParamStore};
use crate::{Error, Result, Scalar};

/// Candidates and their retrieval probabilities under the current θ.
fn weighted_candidates<T: Scalar>(
    query: &[TokenId],
    source_doc_id: &str,
    store: &ParamStore<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    rule: CandidateRule,
) -> Result<(Vec<Document>, Vec<T>)> {
    let candidates = select_candidates(query, source_doc_id, &store.theta, index, corpus, rule)?;
    let q = embed_input(query, &store.theta)?;
    let scores = candidates
        .iter()
        .map(|z| embed_doc(z, &store.theta, ParamVersion(0)).and_then(|e| q.vector.dot(&e.vector)))
        .collect::<Result<Vec<T>>>()?;
    let p_z = retrieval_distribution(&scores)?;
    Ok((candidates, p_z))
}

/// Marginal token distribution `[J,V]` at each masked position,
/// `Σ_z p(z|x) p(y_j|z,x)` over the top-k candidates.
pub fn masked_marginal<T: Scalar>(
    x: &MaskedExample,
    store: &ParamStore<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    rule: CandidateRule,
) -> Result<Vec<Vec<f64>>> {
    let (candidates, p_z) = weighted_candidates(
        &x.input_tokens,
        &x.source_doc_id,
        store,
        index,
        corpus,
        rule,
    )?;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for (z, &w) in candidates.iter().zip(&p_z) {
        let d = mlm_distributions(x, z, &store.phi)?;
        let rows: Vec<Vec<f64>> = (0..d.rows())
            .map(|j| d.row(j).iter().map(|&p| w.f64() * p.f64()).collect())
            .collect();
        acc = Some(match acc {
            None => rows,
            Some(mut a) => {
                for (ar, r) in a.iter_mut().zip(rows) {
                    for (x, y) in ar.iter_mut().zip(r) {
                        *x += y;
                    }
                }
                a
            }
        });
    }
    acc.ok_or_else(|| Error::contract("no candidates"))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax token at each masked position under the top-k marginal.
pub fn predict_masked<T: Scalar>(
    x: &MaskedExample,
    store: &ParamStore<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    rule: CandidateRule,
) -> Result<Vec<TokenId>> {
    Ok(masked_marginal(x, store, index, corpus, rule)?
        .iter()
        .map(|row| argmax(row))
        .collect())
}

/// Fraction of probes whose every masked token is predicted exactly.
pub fn masked_accuracy<T: Scalar>(
    probes: &[MaskedExample],
    store: &ParamStore<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    rule: CandidateRule,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::contract("accuracy over an empty probe set"));
    }
    let mut hits = 0;
    for x in probes {
        if predict_masked(x, store, index, corpus, rule)? == x.targets {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Most probable answer string for a question: span probabilities are
/// weighted by `p(z|x)` and summed per distinct token sequence across the
/// top-k documents. Ties go to the earlier sequence in token order.
pub fn predict_answer<T: Scalar>(
    question: &[TokenId],
    store: &ParamStore<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    k: usize,
) -> Result<Option<Vec<TokenId>>> {
    let rule = CandidateRule {
        docs: k,
        exclude_trivial: false,
        include_null: false,
    };
    let (candidates, p_z) = weighted_candidates(question, "", store, index, corpus, rule)?;
    let mut totals: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    for (z, &w) in candidates.iter().zip(&p_z) {
        for (span, p) in span_distribution(question, z, &store.phi)? {
            *totals.entry(span.answer).or_insert(0.0) += w.f64() * p.f64();
        }
    }
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    for (ans, p) in totals {
        if best.as_ref().is_none_or(|(_, bp)| p > *bp) {
            best = Some((ans, p));
        }
    }
    Ok(best.map(|(a, _)| a))
}
