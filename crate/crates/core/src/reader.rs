//! Knowledge-augmented encoder `p(y|z,x)`.
//!
//! The input and the retrieved body are joined as `[CLS] x [SEP] z_body [SEP]`
//! and encoded by a small Transformer (multi-head scaled-dot self-attention
//! followed by a residual tanh dense layer, each with layer normalisation).
//! Two heads read the hidden states: an MLM head for masked inputs and a
//! span head for extractive answers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Graph, NodeId, Tensor};
use crate::textcorpus::{Document, MaskedExample, TokenId, CLS, SEP};
use crate::{Error, Result, Scalar};

pub const DEFAULT_MAX_ANSWER_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Longest joined sequence; also the size of the position table.
    pub max_len: usize,
    pub span_hidden: usize,
    pub max_answer_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// Per-head `h × h/heads` projections.
    pub wq: Vec<Tensor<T>>,
    pub wk: Vec<Tensor<T>>,
    pub wv: Vec<Tensor<T>>,
    pub wo: Tensor<T>,
    pub dense_w: Tensor<T>,
    pub dense_b: Tensor<T>,
}

/// Reader parameters φ. Shares nothing with the retriever.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaderParams<T> {
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// MLM output embeddings, one row per vocabulary entry.
    pub w_out: Tensor<T>,
    pub span_w1: Tensor<T>,
    pub span_b1: Tensor<T>,
    pub span_w2: Tensor<T>,
    max_answer_len: usize,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::c(dist.sample(rng))).collect(),
    )
    .expect("valid shape")
}

impl<T: Scalar> ReaderParams<T> {
    pub fn init(cfg: &ReaderConfig, seed: u64) -> Result<Self> {
        if cfg.heads == 0 || !cfg.hidden.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        if cfg.max_len < 4 || cfg.max_answer_len == 0 || cfg.span_hidden == 0 {
            return Err(Error::Config(
                "reader max_len, max_answer_len and span_hidden must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h) = (cfg.vocab_size, cfg.hidden);
        let hd = h / cfg.heads;
        let s = 1.0 / (h as f64).sqrt();
        let token_emb = normal_tensor(&mut rng, &[v, h], 1.0);
        let pos_emb = normal_tensor(&mut rng, &[cfg.max_len, h], 0.1);
        let layers = (0..cfg.layers)
            .map(|_| {
                let heads = |rng: &mut ChaCha8Rng| {
                    (0..cfg.heads)
                        .map(|_| normal_tensor(rng, &[h, hd], s))
                        .collect()
                };
                LayerParams {
                    wq: heads(&mut rng),
                    wk: heads(&mut rng),
                    wv: heads(&mut rng),
                    wo: normal_tensor(&mut rng, &[h, h], s),
                    dense_w: normal_tensor(&mut rng, &[h, h], s),
                    dense_b: Tensor::zeros(&[h]),
                }
            })
            .collect();
        Ok(ReaderParams {
            token_emb,
            pos_emb,
            layers,
            w_out: normal_tensor(&mut rng, &[v, h], s),
            span_w1: normal_tensor(
                &mut rng,
                &[2 * h, cfg.span_hidden],
                1.0 / ((2 * h) as f64).sqrt(),
            ),
            span_b1: Tensor::zeros(&[cfg.span_hidden]),
            span_w2: normal_tensor(
                &mut rng,
                &[cfg.span_hidden, 1],
                1.0 / (cfg.span_hidden as f64).sqrt(),
            ),
            max_answer_len: cfg.max_answer_len,
        })
    }

    pub fn config(&self) -> ReaderConfig {
        ReaderConfig {
            vocab_size: self.token_emb.rows(),
            hidden: self.token_emb.cols(),
            heads: self.layers.first().map_or(1, |l| l.wq.len()),
            layers: self.layers.len(),
            max_len: self.pos_emb.rows(),
            span_hidden: self.span_w1.cols(),
            max_answer_len: self.max_answer_len,
        }
    }

    pub fn max_answer_len(&self) -> usize {
        self.max_answer_len
    }

    /// Tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (kind, ws) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv)] {
                for (j, w) in ws.iter().enumerate() {
                    out.push((format!("layer{i}.{kind}{j}"), w));
                }
            }
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.dense_w"), &l.dense_w));
            out.push((format!("layer{i}.dense_b"), &l.dense_b));
        }
        out.push(("w_out".into(), &self.w_out));
        out.push(("span_w1".into(), &self.span_w1));
        out.push(("span_b1".into(), &self.span_b1));
        out.push(("span_w2".into(), &self.span_w2));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in self.layers.iter_mut() {
            out.extend(l.wq.iter_mut());
            out.extend(l.wk.iter_mut());
            out.extend(l.wv.iter_mut());
            out.push(&mut l.wo);
            out.push(&mut l.dense_w);
            out.push(&mut l.dense_b);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.span_w1);
        out.push(&mut self.span_b1);
        out.push(&mut self.span_w2);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        z
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<ReaderNodes> {
        let mut leaf = |t: &Tensor<T>| g.leaf(t.clone());
        let token_emb = leaf(&self.token_emb)?;
        let pos_emb = leaf(&self.pos_emb)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let wq = l.wq.iter().map(&mut leaf).collect::<Result<_>>()?;
            let wk = l.wk.iter().map(&mut leaf).collect::<Result<_>>()?;
            let wv = l.wv.iter().map(&mut leaf).collect::<Result<_>>()?;
            layers.push(LayerNodes {
                wq,
                wk,
                wv,
                wo: leaf(&l.wo)?,
                dense_w: leaf(&l.dense_w)?,
                dense_b: leaf(&l.dense_b)?,
            });
        }
        Ok(ReaderNodes {
            token_emb,
            pos_emb,
            layers,
            w_out: leaf(&self.w_out)?,
            span_w1: leaf(&self.span_w1)?,
            span_b1: leaf(&self.span_b1)?,
            span_w2: leaf(&self.span_w2)?,
            max_len: self.pos_emb.rows(),
            max_answer_len: self.max_answer_len,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: NodeId,
    pub dense_w: NodeId,
    pub dense_b: NodeId,
}

/// Leaf handles of φ inside one graph.
#[derive(Clone, Debug)]
pub struct ReaderNodes {
    pub token_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<LayerNodes>,
    pub w_out: NodeId,
    pub span_w1: NodeId,
    pub span_b1: NodeId,
    pub span_w2: NodeId,
    max_len: usize,
    max_answer_len: usize,
}

impl ReaderNodes {
    /// Leaf ids in [`ReaderParams::named_tensors`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_emb, self.pos_emb];
        for l in &self.layers {
            out.extend(&l.wq);
            out.extend(&l.wk);
            out.extend(&l.wv);
            out.extend([l.wo, l.dense_w, l.dense_b]);
        }
        out.extend([self.w_out, self.span_w1, self.span_b1, self.span_w2]);
        out
    }

    pub fn gradients<T: Scalar>(
        &self,
        grads: &Gradients<T>,
        like: &ReaderParams<T>,
    ) -> ReaderParams<T> {
        let mut out = like.clone();
        for (t, id) in out.tensors_mut().into_iter().zip(self.ids()) {
            *t = grads.get(id);
        }
        out
    }
}

/// The joined token sequence and where its parts start.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointInput {
    pub ids: Vec<TokenId>,
    /// Joint position of `z_body[0]`.
    pub body_offset: usize,
    /// Body tokens kept after truncation.
    pub body_len: usize,
}

/// `[CLS] x [SEP] z_body [SEP]`, truncating the body (never `x`) to `max_len`.
pub fn join_input(x: &[TokenId], z: &Document, max_len: usize) -> Result<JointInput> {
    let fixed = x.len() + 3;
    if fixed > max_len {
        return Err(Error::contract(format!(
            "input of {} tokens cannot fit joint length {max_len}",
            x.len()
        )));
    }
    let body_len = z.body.len().min(max_len - fixed);
    if body_len < z.body.len() {
        log::debug!(
            "truncating body of {} from {} to {body_len} tokens",
            z.doc_id,
            z.body.len()
        );
    }
    let mut ids = Vec::with_capacity(fixed + body_len);
    ids.push(CLS);
    ids.extend_from_slice(x);
    ids.push(SEP);
    ids.extend_from_slice(&z.body[..body_len]);
    ids.push(SEP);
    Ok(JointInput {
        ids,
        body_offset: x.len() + 2,
        body_len,
    })
}

/// Hidden states `[L,h]` for a joined sequence.
pub fn encode_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ReaderNodes,
    ids: &[TokenId],
) -> Result<NodeId> {
    let l = ids.len();
    if l > nodes.max_len {
        return Err(Error::contract(format!(
            "joint length {l} exceeds {}",
            nodes.max_len
        )));
    }
    let tok = g.embedding_lookup(nodes.token_emb, ids.to_vec())?;
    let pos = g.embedding_lookup(nodes.pos_emb, (0..l).collect())?;
    let mut x = g.add(tok, pos)?;
    x = g.layernorm(x)?;
    for layer in &nodes.layers {
        let mut heads = Vec::with_capacity(layer.wq.len());
        for ((&wq, &wk), &wv) in layer.wq.iter().zip(&layer.wk).zip(&layer.wv) {
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            heads.push(g.attention(q, k, v)?);
        }
        let att = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads)?
        };
        let att = g.matmul(att, layer.wo)?;
        let res = g.add(x, att)?;
        x = g.layernorm(res)?;
        let d = g.matmul(x, layer.dense_w)?;
        let d = g.add(d, layer.dense_b)?;
        let d = g.tanh(d)?;
        let res = g.add(x, d)?;
        x = g.layernorm(res)?;
    }
    Ok(x)
}

/// Per-token hidden states for `(x, z)`.
pub fn joint_encode<T: Scalar>(
    x: &[TokenId],
    z: &Document,
    phi: &ReaderParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let nodes = phi.bind(&mut g)?;
    let joint = join_input(x, z, nodes.max_len)?;
    let h = encode_node(&mut g, &nodes, &joint.ids)?;
    Ok(g.value(h).clone())
}

/// MLM logits `[J,V]` at the masked positions.
fn mlm_logits_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ReaderNodes,
    x: &MaskedExample,
    z: &Document,
) -> Result<NodeId> {
    if x.masked_positions.is_empty() {
        return Err(Error::contract(
            "MLM probability needs at least one masked position",
        ));
    }
    let joint = join_input(&x.input_tokens, z, nodes.max_len)?;
    let mut rows = Vec::with_capacity(x.num_masked());
    for &p in &x.masked_positions {
        // x sits right after [CLS]
        let jp = p + 1;
        if p >= x.input_tokens.len() || jp >= joint.ids.len() {
            return Err(Error::contract(format!(
                "masked position {p} outside the joint sequence"
            )));
        }
        rows.push(jp);
    }
    let h = encode_node(g, nodes, &joint.ids)?;
    let hm = g.embedding_lookup(h, rows)?;
    let wt = g.transpose(nodes.w_out)?;
    g.matmul(hm, wt)
}

/// `log p(y|z,x) = Σ_j log softmax(w · h_MASK(j))[y_j]` as a `[1]` node.
pub fn mlm_log_prob_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ReaderNodes,
    x: &MaskedExample,
    z: &Document,
) -> Result<NodeId> {
    let logits = mlm_logits_node(g, nodes, x, z)?;
    let v = g.value(logits).cols();
    let lp = g.log_softmax(logits)?;
    let flat = g.reshape(lp, vec![x.num_masked() * v])?;
    for &t in &x.targets {
        if t >= v {
            return Err(Error::contract(format!(
                "target token {t} outside vocabulary of {v}"
            )));
        }
    }
    let picks = x
        .targets
        .iter()
        .enumerate()
        .map(|(j, &t)| j * v + t)
        .collect();
    let sel = g.select(flat, picks)?;
    g.sum(sel)
}

pub fn mlm_log_probability<T: Scalar>(
    x: &MaskedExample,
    z: &Document,
    phi: &ReaderParams<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let nodes = phi.bind(&mut g)?;
    let lp = mlm_log_prob_node(&mut g, &nodes, x, z)?;
    Ok(g.value(lp).item())
}

/// `p(y|z,x)` for a masked input.
pub fn mlm_probability<T: Scalar>(
    x: &MaskedExample,
    z: &Document,
    phi: &ReaderParams<T>,
) -> Result<T> {
    Ok(mlm_log_probability(x, z, phi)?.exp())
}

/// Token distributions `[J,V]` at each masked position given `z`.
pub fn mlm_distributions<T: Scalar>(
    x: &MaskedExample,
    z: &Document,
    phi: &ReaderParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let nodes = phi.bind(&mut g)?;
    let logits = mlm_logits_node(&mut g, &nodes, x, z)?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).clone())
}

/// A span of `z_body`, inclusive on both ends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanCandidate {
    pub start: usize,
    pub end: usize,
    pub answer: Vec<TokenId>,
}

/// Every occurrence of `y` in `z_body`, ascending by start.
pub fn enumerate_spans(z: &Document, y: &[TokenId]) -> Vec<SpanCandidate> {
    if y.is_empty() || y.len() > z.body.len() {
        return Vec::new();
    }
    z.body
        .windows(y.len())
        .enumerate()
        .filter(|(_, w)| *w == y)
        .map(|(s, _)| SpanCandidate {
            start: s,
            end: s + y.len() - 1,
            answer: y.to_vec(),
        })
        .collect()
}

/// All spans of a `body_len`-token body up to `max_len` tokens, by start then end.
pub fn all_spans(body_len: usize, max_len: usize) -> Vec<(usize, usize)> {
    (0..body_len)
        .flat_map(|s| (s..body_len.min(s + max_len)).map(move |e| (s, e)))
        .collect()
}

/// Span scores `MLP([h_start; h_end])` for `spans`, as a `[S]` node.
fn span_scores_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ReaderNodes,
    hidden: NodeId,
    offset: usize,
    spans: &[(usize, usize)],
) -> Result<NodeId> {
    let hs = g.embedding_lookup(hidden, spans.iter().map(|&(s, _)| s + offset).collect())?;
    let he = g.embedding_lookup(hidden, spans.iter().map(|&(_, e)| e + offset).collect())?;
    let cat = g.concat(&[hs, he])?;
    let a = g.matmul(cat, nodes.span_w1)?;
    let a = g.add(a, nodes.span_b1)?;
    let a = g.tanh(a)?;
    let s = g.matmul(a, nodes.span_w2)?;
    g.reshape(s, vec![spans.len()])
}

/// `log p(y|z,x)` for an extractive answer as a `[1]` node, or `None` when
/// `y` does not occur in the (possibly truncated) body.
pub fn qa_log_prob_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ReaderNodes,
    question: &[TokenId],
    z: &Document,
    y: &[TokenId],
) -> Result<Option<NodeId>> {
    let joint = join_input(question, z, nodes.max_len)?;
    let spans = all_spans(joint.body_len, nodes.max_answer_len);
    let body = &z.body[..joint.body_len];
    let matching: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| body[s..=e] == *y)
        .map(|(i, _)| i)
        .collect();
    if matching.is_empty() {
        return Ok(None);
    }
    let h = encode_node(g, nodes, &joint.ids)?;
    let scores = span_scores_node(g, nodes, h, joint.body_offset, &spans)?;
    let all = g.logsumexp(scores)?;
    let m = g.select(scores, matching)?;
    let num = g.logsumexp(m)?;
    let neg = g.scale(all, T::c(-1.0))?;
    Ok(Some(g.add(num, neg)?))
}

pub fn qa_log_probability<T: Scalar>(
    question: &[TokenId],
    z: &Document,
    y: &[TokenId],
    phi: &ReaderParams<T>,
) -> Result<Option<T>> {
    let mut g = Graph::new();
    let nodes = phi.bind(&mut g)?;
    Ok(qa_log_prob_node(&mut g, &nodes, question, z, y)?.map(|n| g.value(n).item()))
}

/// `p(y|z,x)` for an extractive answer; zero when `y` is absent from `z`.
pub fn qa_probability<T: Scalar>(
    question: &[TokenId],
    z: &Document,
    y: &[TokenId],
    phi: &ReaderParams<T>,
) -> Result<T> {
    Ok(qa_log_probability(question, z, y, phi)?.map_or(T::zero(), |lp| lp.exp()))
}

/// Probability of every candidate span of `z`, normalized over all of them.
pub fn span_distribution<T: Scalar>(
    question: &[TokenId],
    z: &Document,
    phi: &ReaderParams<T>,
) -> Result<Vec<(SpanCandidate, T)>> {
    let mut g = Graph::new();
    let nodes = phi.bind(&mut g)?;
    let joint = join_input(question, z, nodes.max_len)?;
    let spans = all_spans(joint.body_len, nodes.max_answer_len);
    if spans.is_empty() {
        return Ok(Vec::new());
    }
    let h = encode_node(&mut g, &nodes, &joint.ids)?;
    let scores = span_scores_node(&mut g, &nodes, h, joint.body_offset, &spans)?;
    let p = g.softmax(scores)?;
    Ok(spans
        .iter()
        .zip(g.value(p).data())
        .map(|(&(s, e), &p)| {
            (
                SpanCandidate {
                    start: s,
                    end: e,
                    answer: z.body[s..=e].to_vec(),
                },
                p,
            )
        })
        .collect())
}
