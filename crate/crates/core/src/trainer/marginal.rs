use crate::diffcore::{Graph, NodeId, Tensor};
use crate::mipsindex::IndexSnapshot;
use crate::reader::{mlm_log_prob_node, qa_log_prob_node};
use crate::retriever::{
    candidate_set, embed_doc_node, embed_input, embed_input_node, RetrieverParams,
};
use crate::textcorpus::{Document, KnowledgeCorpus, MaskedExample, TokenId};
use crate::{Error, Result, Scalar};

use super::params::{ParamGrads, ParamStore, StoreNodes};

/// What the reader is asked to predict.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Masked(&'a MaskedExample),
    Answer {
        question: &'a [TokenId],
        answer: &'a [TokenId],
    },
}

impl Target<'_> {
    /// Tokens the query tower reads.
    pub fn query_tokens(&self) -> &[TokenId] {
        match self {
            Target::Masked(x) => &x.input_tokens,
            Target::Answer { question, .. } => question,
        }
    }

    pub fn source_doc_id(&self) -> &str {
        match self {
            Target::Masked(x) => &x.source_doc_id,
            Target::Answer { .. } => "",
        }
    }
}

/// How candidates are drawn for one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateRule {
    /// Retrieved documents, excluding ∅.
    pub docs: usize,
    pub exclude_trivial: bool,
    pub include_null: bool,
}

/// Top documents from the (possibly stale) snapshot under the current query
/// tower. One extra document is fetched when the trivial source document may
/// be dropped, so the candidate count stays fixed.
pub fn select_candidates<T: Scalar>(
    query: &[TokenId],
    source_doc_id: &str,
    theta: &RetrieverParams<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    rule: CandidateRule,
) -> Result<Vec<Document>> {
    if index.len() != corpus.len() {
        return Err(Error::contract(format!(
            "index has {} rows but the corpus has {} documents",
            index.len(),
            corpus.len()
        )));
    }
    let mut out = Vec::new();
    if rule.docs > 0 {
        let fetch = (rule.docs + usize::from(rule.exclude_trivial)).min(index.len());
        let q = embed_input(query, theta)?;
        let top = index.search_topk(&q, fetch)?;
        out = candidate_set(source_doc_id, &top, corpus, rule.exclude_trivial, false);
        out.truncate(rule.docs);
    }
    if rule.include_null {
        out.push(Document::null());
    }
    if out.is_empty() {
        return Err(Error::contract("empty candidate set"));
    }
    Ok(out)
}

/// Marginal-likelihood terms for one example over a fixed candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalResult<T> {
    pub candidates: Vec<Document>,
    /// Relevance `f(x,z)` under the current θ.
    pub scores: Vec<T>,
    pub p_z: Vec<T>,
    /// `p(y|z,x)`; zero where an answer does not occur in `z`.
    pub p_y_given_z: Vec<T>,
    pub log_p_y_given_z: Vec<T>,
    pub p_y: T,
    pub log_p_y: T,
    /// `[p(y|z,x)/p(y|x) − 1]·p(z|x)`.
    pub r: Vec<T>,
}

/// Nodes of the marginal computation inside one graph.
#[derive(Clone, Debug)]
pub struct MarginalGraph {
    pub nodes: StoreNodes,
    /// `[k]` relevance scores.
    pub scores: NodeId,
    /// `[k]` log retrieval probabilities.
    pub log_p_z: NodeId,
    pub log_p_y_given_z: Vec<Option<NodeId>>,
    /// `[1]` `log p(y|x)`; `None` when no candidate can produce `y`.
    pub log_p_y: Option<NodeId>,
}

/// Build `log p(y|x) = logsumexp_z [log p(z|x) + log p(y|z,x)]` with
/// relevance scores recomputed from the current θ.
pub fn marginal_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    target: Target<'_>,
    candidates: &[Document],
) -> Result<MarginalGraph> {
    let nodes = store.bind(g)?;
    let q = embed_input_node(g, &nodes.theta, target.query_tokens())?;
    let qt = g.transpose(q)?;
    let mut score_nodes = Vec::with_capacity(candidates.len());
    for z in candidates {
        let e = embed_doc_node(g, &nodes.theta, z)?;
        let s = g.matmul(e, qt)?;
        score_nodes.push(g.reshape(s, vec![1])?);
    }
    let scores = if score_nodes.len() == 1 {
        score_nodes[0]
    } else {
        g.concat(&score_nodes)?
    };
    let log_p_z = g.log_softmax(scores)?;
    let mut log_p_y_given_z = Vec::with_capacity(candidates.len());
    let mut joint = Vec::new();
    for (i, z) in candidates.iter().enumerate() {
        let lp = match target {
            Target::Masked(x) => Some(mlm_log_prob_node(g, &nodes.phi, x, z)?),
            Target::Answer { question, answer } => {
                qa_log_prob_node(g, &nodes.phi, question, z, answer)?
            }
        };
        if let Some(lp) = lp {
            let lz = g.select(log_p_z, vec![i])?;
            joint.push(g.add(lz, lp)?);
        }
        log_p_y_given_z.push(lp);
    }
    let log_p_y = match joint.len() {
        0 => None,
        1 => Some(joint[0]),
        _ => {
            let cat = g.concat(&joint)?;
            Some(g.logsumexp(cat)?)
        }
    };
    Ok(MarginalGraph {
        nodes,
        scores,
        log_p_z,
        log_p_y_given_z,
        log_p_y,
    })
}

/// `p(y|x) = Σ_z p(y|z,x)·p(z|x)` and `r(z) = [p(y|z,x)/p(y|x) − 1]·p(z|x)`.
/// When `p(y|x) = 0` every `r(z)` is reported as zero.
pub fn marginal_terms<T: Scalar>(p_z: &[T], p_y_given_z: &[T]) -> (T, Vec<T>) {
    let p_y: T = p_y_given_z.iter().zip(p_z).map(|(&a, &b)| a * b).sum();
    let r = p_y_given_z
        .iter()
        .zip(p_z)
        .map(|(&py, &pz)| {
            if p_y > T::zero() {
                (py / p_y - T::one()) * pz
            } else {
                T::zero()
            }
        })
        .collect();
    (p_y, r)
}

/// Read the marginal quantities out of an evaluated marginal graph.
pub fn marginal_values<T: Scalar>(
    g: &Graph<T>,
    mg: &MarginalGraph,
    candidates: &[Document],
) -> MarginalResult<T> {
    let scores = g.value(mg.scores).data().to_vec();
    let p_z: Vec<T> = g.value(mg.log_p_z).data().iter().map(|v| v.exp()).collect();
    let log_p_y_given_z: Vec<T> = mg
        .log_p_y_given_z
        .iter()
        .map(|n| n.map_or(T::neg_infinity(), |n| g.value(n).item()))
        .collect();
    let p_y_given_z: Vec<T> = log_p_y_given_z.iter().map(|v| v.exp()).collect();
    let (p_y, r) = marginal_terms(&p_z, &p_y_given_z);
    let log_p_y = mg.log_p_y.map_or(T::neg_infinity(), |n| g.value(n).item());
    MarginalResult {
        candidates: candidates.to_vec(),
        scores,
        p_z,
        p_y_given_z,
        log_p_y_given_z,
        p_y,
        log_p_y,
        r,
    }
}

/// `p(y|x) = Σ_z p(y|z,x) p(z|x)` over an explicit candidate list.
pub fn marginal_over<T: Scalar>(
    store: &ParamStore<T>,
    target: Target<'_>,
    candidates: &[Document],
) -> Result<MarginalResult<T>> {
    let mut g = Graph::new();
    let mg = marginal_graph(&mut g, store, target, candidates)?;
    Ok(marginal_values(&g, &mg, candidates))
}

/// Retrieve top-k through `index`, then evaluate the marginal with the current θ, φ.
pub fn marginal_forward<T: Scalar>(
    target: Target<'_>,
    store: &ParamStore<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    rule: CandidateRule,
) -> Result<MarginalResult<T>> {
    let candidates = select_candidates(
        target.query_tokens(),
        target.source_doc_id(),
        &store.theta,
        index,
        corpus,
        rule,
    )?;
    marginal_over(store, target, &candidates)
}

/// `−log p(y|x)` and its gradient with respect to every parameter.
/// Returns `None` when `p(y|x) = 0`.
pub fn marginal_loss_and_grads<T: Scalar>(
    store: &ParamStore<T>,
    target: Target<'_>,
    candidates: &[Document],
) -> Result<Option<(MarginalResult<T>, ParamGrads<T>)>> {
    let mut g = Graph::new();
    let mg = marginal_graph(&mut g, store, target, candidates)?;
    let Some(lp) = mg.log_p_y else {
        return Ok(None);
    };
    let loss = g.scale(lp, T::c(-1.0))?;
    let grads = g.backward(loss)?;
    let result = marginal_values(&g, &mg, candidates);
    Ok(Some((result, mg.nodes.gradients(&grads))))
}

/// θ-gradient of `log p(y|x)` assembled as `Σ_z r(z) ∇_θ f(x,z)`.
pub fn retriever_gradient_explicit<T: Scalar>(
    result: &MarginalResult<T>,
    target: Target<'_>,
    store: &ParamStore<T>,
) -> Result<RetrieverParams<T>> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(result.p_y > T::zero()) {
        return Err(Error::contract(
            "explicit retriever gradient needs p(y|x) > 0",
        ));
    }
    let mut g = Graph::new();
    let nodes = store.theta.bind(&mut g)?;
    let q = embed_input_node(&mut g, &nodes, target.query_tokens())?;
    let mut acc = None;
    for (z, &r) in result.candidates.iter().zip(&result.r) {
        let e = embed_doc_node(&mut g, &nodes, z)?;
        let f = g.dot(q, e)?;
        let weighted = g.scale(f, r)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::contract("no candidates"))?;
    let grads = g.backward(acc)?;
    Ok(nodes.gradients(&grads))
}

/// Autodiff θ-gradient of `log p(y|x)` over fixed candidates.
pub fn retriever_gradient_autodiff<T: Scalar>(
    store: &ParamStore<T>,
    target: Target<'_>,
    candidates: &[Document],
) -> Result<RetrieverParams<T>> {
    let mut g = Graph::new();
    let mg = marginal_graph(&mut g, store, target, candidates)?;
    let lp = mg
        .log_p_y
        .ok_or_else(|| Error::contract("log p(y|x) is undefined when p(y|x) = 0"))?;
    let grads = g.backward(lp)?;
    Ok(mg.nodes.theta.gradients(&grads))
}

/// Flatten θ tensors for comparisons.
pub fn flatten_theta<T: Scalar>(theta: &RetrieverParams<T>) -> Tensor<T> {
    let data: Vec<T> = theta
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect();
    Tensor::vector(data).expect("non-empty parameters")
}
