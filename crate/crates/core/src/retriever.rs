//! Dense two-tower retriever: `f(x,z) = Embed_input(x)ᵀ Embed_doc(z)` and the
//! retrieval distribution `p(z|x) = softmax_z f(x,z)`.
//!
//! Both towers share one token-embedding table; each has its own `h×h` tanh
//! layer and its own `h×d` projection. Towers have no biases, so a zero
//! embedding table yields zero embeddings.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::mipsindex::RetrievalResult;
use crate::textcorpus::{Document, KnowledgeCorpus, TokenId, CLS, NUM_RESERVED, SEP};
use crate::{Error, Result, Scalar};

/// Monotone parameter version: the number of optimizer steps applied.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ParamVersion(pub u64);

impl fmt::Display for ParamVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step-{}", self.0)
    }
}

impl std::str::FromStr for ParamVersion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("step-")
            .and_then(|n| n.parse().ok())
            .map(ParamVersion)
            .ok_or_else(|| Error::Format(format!("bad parameter version {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub proj_dim: usize,
}

/// Retriever parameters θ.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrieverParams<T> {
    pub token_emb: Tensor<T>,
    pub query_dense: Tensor<T>,
    pub doc_dense: Tensor<T>,
    pub w_input: Tensor<T>,
    pub w_doc: Tensor<T>,
}

pub const RETRIEVER_TENSORS: [&str; 5] =
    ["token_emb", "query_dense", "doc_dense", "w_input", "w_doc"];

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::c(dist.sample(rng))).collect(),
    )
    .expect("valid shape")
}

impl<T: Scalar> RetrieverParams<T> {
    pub fn init(cfg: &RetrieverConfig, seed: u64) -> Result<Self> {
        if cfg.proj_dim > cfg.hidden || cfg.proj_dim == 0 {
            return Err(Error::Config(format!(
                "projection dim {} must be in 1..={}",
                cfg.proj_dim, cfg.hidden
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h, d) = (cfg.vocab_size, cfg.hidden, cfg.proj_dim);
        let s = 1.0 / (h as f64).sqrt();
        let mut token_emb = normal_tensor(&mut rng, &[v, h], 1.0);
        // Reserved tokens start at zero, [MASK] included.
        let reserved = NUM_RESERVED.min(v) * h;
        token_emb.data_mut()[..reserved].fill(T::zero());
        Ok(RetrieverParams {
            token_emb,
            query_dense: normal_tensor(&mut rng, &[h, h], s),
            doc_dense: normal_tensor(&mut rng, &[h, h], s),
            w_input: normal_tensor(&mut rng, &[h, d], s),
            w_doc: normal_tensor(&mut rng, &[h, d], s),
        })
    }

    pub fn config(&self) -> RetrieverConfig {
        RetrieverConfig {
            vocab_size: self.token_emb.rows(),
            hidden: self.token_emb.cols(),
            proj_dim: self.w_input.cols(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 5] {
        [
            ("token_emb", &self.token_emb),
            ("query_dense", &self.query_dense),
            ("doc_dense", &self.doc_dense),
            ("w_input", &self.w_input),
            ("w_doc", &self.w_doc),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 5] {
        [
            ("token_emb", &mut self.token_emb),
            ("query_dense", &mut self.query_dense),
            ("doc_dense", &mut self.doc_dense),
            ("w_input", &mut self.w_input),
            ("w_doc", &mut self.w_doc),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        RetrieverParams {
            token_emb: z(&self.token_emb),
            query_dense: z(&self.query_dense),
            doc_dense: z(&self.doc_dense),
            w_input: z(&self.w_input),
            w_doc: z(&self.w_doc),
        }
    }

    /// Register every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<RetrieverNodes> {
        Ok(RetrieverNodes {
            token_emb: g.leaf(self.token_emb.clone())?,
            query_dense: g.leaf(self.query_dense.clone())?,
            doc_dense: g.leaf(self.doc_dense.clone())?,
            w_input: g.leaf(self.w_input.clone())?,
            w_doc: g.leaf(self.w_doc.clone())?,
        })
    }
}

/// Leaf handles of θ inside one graph.
#[derive(Clone, Copy, Debug)]
pub struct RetrieverNodes {
    pub token_emb: NodeId,
    pub query_dense: NodeId,
    pub doc_dense: NodeId,
    pub w_input: NodeId,
    pub w_doc: NodeId,
}

impl RetrieverNodes {
    pub fn ids(&self) -> [NodeId; 5] {
        [
            self.token_emb,
            self.query_dense,
            self.doc_dense,
            self.w_input,
            self.w_doc,
        ]
    }

    /// Collect θ gradients from a backward pass.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &crate::diffcore::Gradients<T>,
    ) -> RetrieverParams<T> {
        RetrieverParams {
            token_emb: grads.get(self.token_emb),
            query_dense: grads.get(self.query_dense),
            doc_dense: grads.get(self.doc_dense),
            w_input: grads.get(self.w_input),
            w_doc: grads.get(self.w_doc),
        }
    }
}

/// `[CLS] x [SEP]`.
pub fn join_query(x: &[TokenId]) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(x.len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(x);
    ids.push(SEP);
    ids
}

/// `[CLS] title [SEP] body [SEP]`.
pub fn join_doc(doc: &Document) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(doc.title.len() + doc.body.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(&doc.title);
    ids.push(SEP);
    ids.extend_from_slice(&doc.body);
    ids.push(SEP);
    ids
}

fn tower<T: Scalar>(
    g: &mut Graph<T>,
    table: NodeId,
    dense: NodeId,
    proj: NodeId,
    ids: Vec<TokenId>,
) -> Result<NodeId> {
    let rows = g.embedding_lookup(table, ids)?;
    let pooled = g.mean_pool_rows(rows)?;
    let hidden = g.matmul(pooled, dense)?;
    let hidden = g.tanh(hidden)?;
    g.matmul(hidden, proj)
}

/// Query embedding as a `[1,d]` node.
pub fn embed_input_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &RetrieverNodes,
    x: &[TokenId],
) -> Result<NodeId> {
    tower(
        g,
        nodes.token_emb,
        nodes.query_dense,
        nodes.w_input,
        join_query(x),
    )
}

/// Document embedding as a `[1,d]` node.
pub fn embed_doc_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &RetrieverNodes,
    doc: &Document,
) -> Result<NodeId> {
    tower(
        g,
        nodes.token_emb,
        nodes.doc_dense,
        nodes.w_doc,
        join_doc(doc),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding<T> {
    pub vector: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocEmbedding<T> {
    pub vector: Tensor<T>,
    pub doc_id: String,
    pub version: ParamVersion,
}

/// Graph holding only the leaves one tower needs.
fn tower_value<T: Scalar>(
    table: &Tensor<T>,
    dense: &Tensor<T>,
    proj: &Tensor<T>,
    ids: Vec<TokenId>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let t = g.leaf(table.clone())?;
    let d = g.leaf(dense.clone())?;
    let p = g.leaf(proj.clone())?;
    let out = tower(&mut g, t, d, p, ids)?;
    g.value(out).reshaped(vec![proj.cols()])
}

pub fn embed_input<T: Scalar>(
    x: &[TokenId],
    theta: &RetrieverParams<T>,
) -> Result<QueryEmbedding<T>> {
    Ok(QueryEmbedding {
        vector: tower_value(
            &theta.token_emb,
            &theta.query_dense,
            &theta.w_input,
            join_query(x),
        )?,
    })
}

pub fn embed_doc<T: Scalar>(
    doc: &Document,
    theta: &RetrieverParams<T>,
    version: ParamVersion,
) -> Result<DocEmbedding<T>> {
    Ok(DocEmbedding {
        vector: tower_value(
            &theta.token_emb,
            &theta.doc_dense,
            &theta.w_doc,
            join_doc(doc),
        )?,
        doc_id: doc.doc_id.clone(),
        version,
    })
}

/// Exact inner product `f(x,z)`.
pub fn relevance<T: Scalar>(x: &QueryEmbedding<T>, z: &DocEmbedding<T>) -> Result<T> {
    if x.vector.numel() != z.vector.numel() {
        return Err(Error::contract(format!(
            "embedding dimensions differ: {} vs {}",
            x.vector.numel(),
            z.vector.numel()
        )));
    }
    x.vector.dot(&z.vector)
}

/// Softmax over relevance scores, with max subtraction.
pub fn retrieval_distribution<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::contract(
            "retrieval distribution over zero candidates",
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("non-finite relevance score"));
    }
    let mut p = scores.to_vec();
    crate::diffcore::softmax_row(&mut p);
    Ok(p)
}

/// Candidate documents for one example: the retrieved list, minus the trivial
/// source document when `exclude_trivial`, plus ∅ when `include_null`.
pub fn candidate_set<T: Scalar>(
    source_doc_id: &str,
    top: &RetrievalResult<T>,
    corpus: &KnowledgeCorpus,
    exclude_trivial: bool,
    include_null: bool,
) -> Vec<Document> {
    let mut out: Vec<Document> = top
        .rows
        .iter()
        .map(|&r| corpus.doc(r))
        .filter(|d| !(exclude_trivial && d.doc_id == source_doc_id))
        .cloned()
        .collect();
    if include_null {
        out.push(Document::null());
    }
    out
}
