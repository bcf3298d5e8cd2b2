use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use crate::diffcore::{softmax_row, Tensor};
use crate::retriever::{embed_doc, ParamVersion, QueryEmbedding, RetrieverParams};
use crate::textcorpus::KnowledgeCorpus;
use crate::{Error, Result, Scalar};

/// Which search structure to build over the embedding rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexStructure {
    Exhaustive,
    Ivf { clusters: usize, nprobe: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchStructure<T> {
    Exhaustive,
    Ivf {
        centroids: Tensor<T>,
        /// Row ids per centroid, ascending.
        lists: Vec<Vec<usize>>,
        /// Centroid of each row.
        assignment: Vec<usize>,
        nprobe: usize,
    },
}

/// Top-k documents for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult<T> {
    /// Corpus row of each hit, best first.
    pub rows: Vec<usize>,
    pub doc_ids: Vec<String>,
    /// Inner products against the snapshot embeddings.
    pub scores: Vec<T>,
    /// Softmax of `scores` over the returned hits.
    pub probs: Vec<T>,
}

/// Immutable document-embedding matrix plus search structure, tagged with
/// the parameter version that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSnapshot<T> {
    embeddings: Tensor<T>,
    doc_ids: Vec<String>,
    version: ParamVersion,
    structure: SearchStructure<T>,
}

/// Embed every document with `theta` and build `structure` over the rows.
pub fn build_index<T: Scalar>(
    corpus: &KnowledgeCorpus,
    theta: &RetrieverParams<T>,
    version: ParamVersion,
    structure: IndexStructure,
    seed: u64,
) -> Result<IndexSnapshot<T>> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot index an empty corpus".into()));
    }
    let d = theta.w_doc.cols();
    let mut rows = Vec::with_capacity(corpus.len() * d);
    for doc in corpus.docs() {
        rows.extend_from_slice(embed_doc(doc, theta, version)?.vector.data());
    }
    let embeddings = Tensor::matrix(corpus.len(), d, rows)?;
    let ids = corpus.docs().iter().map(|d| d.doc_id.clone()).collect();
    IndexSnapshot::from_embeddings(embeddings, ids, version, structure, seed)
}

impl<T: Scalar> IndexSnapshot<T> {
    pub fn from_embeddings(
        embeddings: Tensor<T>,
        doc_ids: Vec<String>,
        version: ParamVersion,
        structure: IndexStructure,
        seed: u64,
    ) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != doc_ids.len() {
            return Err(Error::contract(format!(
                "{} doc ids for embedding matrix {:?}",
                doc_ids.len(),
                embeddings.shape()
            )));
        }
        let n = embeddings.rows();
        let structure = match structure {
            IndexStructure::Exhaustive => SearchStructure::Exhaustive,
            IndexStructure::Ivf { clusters, nprobe } => {
                if clusters == 0 || clusters > n {
                    return Err(Error::Config(format!(
                        "IVF needs 1 <= clusters <= {n}, got {clusters}"
                    )));
                }
                if nprobe == 0 || nprobe > clusters {
                    return Err(Error::Config(format!(
                        "IVF needs 1 <= nprobe <= {clusters}, got {nprobe}"
                    )));
                }
                let dim = embeddings.cols();
                let (centroids, assignment) = if clusters == n {
                    // Degenerate partition: each row is its own list.
                    (embeddings.data().to_vec(), (0..n).collect())
                } else {
                    kmeans(embeddings.data(), dim, clusters, seed)
                };
                let mut lists = vec![Vec::new(); clusters];
                for (row, &c) in assignment.iter().enumerate() {
                    lists[c].push(row);
                }
                SearchStructure::Ivf {
                    centroids: Tensor::matrix(clusters, dim, centroids)?,
                    lists,
                    assignment,
                    nprobe,
                }
            }
        };
        Ok(IndexSnapshot {
            embeddings,
            doc_ids,
            version,
            structure,
        })
    }

    pub(crate) fn from_parts(
        embeddings: Tensor<T>,
        doc_ids: Vec<String>,
        version: ParamVersion,
        structure: SearchStructure<T>,
    ) -> Self {
        IndexSnapshot {
            embeddings,
            doc_ids,
            version,
            structure,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn version(&self) -> ParamVersion {
        self.version
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn structure(&self) -> &SearchStructure<T> {
        &self.structure
    }

    pub fn search_topk(&self, q: &QueryEmbedding<T>, k: usize) -> Result<RetrievalResult<T>> {
        self.search(q.vector.data(), k)
    }

    /// Top-`k` rows by inner product with `q`, ties to the lower row id.
    pub fn search(&self, q: &[T], k: usize) -> Result<RetrievalResult<T>> {
        if k == 0 || k > self.len() {
            return Err(Error::contract(format!(
                "k = {k} outside 1..={}",
                self.len()
            )));
        }
        if q.len() != self.dim() {
            return Err(Error::contract(format!(
                "query dim {} vs index dim {}",
                q.len(),
                self.dim()
            )));
        }
        let score = |r: usize| -> T {
            self.embeddings
                .row(r)
                .iter()
                .zip(q)
                .map(|(&a, &b)| a * b)
                .sum()
        };
        let mut scored: Vec<(T, usize)> = match &self.structure {
            SearchStructure::Exhaustive => (0..self.len()).map(|r| (score(r), r)).collect(),
            SearchStructure::Ivf {
                centroids,
                lists,
                nprobe,
                ..
            } => {
                let mut cs: Vec<(T, usize)> = (0..centroids.rows())
                    .map(|c| {
                        let s = centroids.row(c).iter().zip(q).map(|(&a, &b)| a * b).sum();
                        (s, c)
                    })
                    .collect();
                cs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
                cs.iter()
                    .take(*nprobe)
                    .flat_map(|&(_, c)| lists[c].iter().map(|&r| (score(r), r)))
                    .collect()
            }
        };
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
        scored.truncate(k);
        let rows: Vec<usize> = scored.iter().map(|&(_, r)| r).collect();
        let scores: Vec<T> = scored.iter().map(|&(s, _)| s).collect();
        let mut probs = scores.clone();
        if !probs.is_empty() {
            softmax_row(&mut probs);
        }
        Ok(RetrievalResult {
            doc_ids: rows.iter().map(|&r| self.doc_ids[r].clone()).collect(),
            rows,
            scores,
            probs,
        })
    }
}
