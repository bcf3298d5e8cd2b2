use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{Document, KnowledgeCorpus};
use super::vocab::TokenId;
use crate::{Error, Result};

/// Probability that the query sentence is removed from its positive context.
pub const ICT_REMOVE_PROB: f64 = 0.9;

/// Split a body into period-terminated sentences (a trailing unterminated run
/// counts as a sentence).
pub fn sentence_ranges(body: &[TokenId], period: Option<TokenId>) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in body.iter().enumerate() {
        if Some(t) == period {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < body.len() {
        out.push(start..body.len());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IctExample {
    pub query: Vec<TokenId>,
    pub positive_doc_id: String,
    /// The positive document as the retriever sees it during warm-start.
    pub context: Document,
    pub removed: bool,
}

/// Precomputed sentence boundaries for repeated ICT sampling.
#[derive(Clone, Debug)]
pub struct IctSampler<'a> {
    corpus: &'a KnowledgeCorpus,
    eligible: Vec<(usize, Vec<Range<usize>>)>,
}

impl<'a> IctSampler<'a> {
    pub fn new(corpus: &'a KnowledgeCorpus, period: Option<TokenId>) -> Result<Self> {
        let eligible: Vec<_> = corpus
            .docs()
            .iter()
            .enumerate()
            .filter_map(|(i, d)| {
                let s = sentence_ranges(&d.body, period);
                (s.len() >= 2).then_some((i, s))
            })
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config(
                "inverse cloze examples need a document with at least two sentences".into(),
            ));
        }
        Ok(IctSampler { corpus, eligible })
    }

    pub fn num_eligible(&self) -> usize {
        self.eligible.len()
    }

    pub fn sample(&self, rng_seed: u64) -> IctExample {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (row, sentences) = &self.eligible[rng.random_range(0..self.eligible.len())];
        let pick = rng.random_range(0..sentences.len());
        self.example(*row, sentences, pick, rng.random_bool(ICT_REMOVE_PROB))
    }

    /// Sample with the document restricted to `doc_slot` (index into the
    /// eligible list); used to draw batches without repeated positives.
    pub fn sample_from(&self, doc_slot: usize, rng_seed: u64) -> IctExample {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (row, sentences) = &self.eligible[doc_slot];
        let pick = rng.random_range(0..sentences.len());
        self.example(*row, sentences, pick, rng.random_bool(ICT_REMOVE_PROB))
    }

    fn example(
        &self,
        row: usize,
        sentences: &[Range<usize>],
        pick: usize,
        removed: bool,
    ) -> IctExample {
        let doc = self.corpus.doc(row);
        let query = doc.body[sentences[pick].clone()].to_vec();
        let body = if removed {
            sentences
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != pick)
                .flat_map(|(_, r)| doc.body[r.clone()].iter().copied())
                .collect()
        } else {
            doc.body.clone()
        };
        IctExample {
            query,
            positive_doc_id: doc.doc_id.clone(),
            context: Document {
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                body,
            },
            removed,
        }
    }
}

/// One inverse-cloze example drawn uniformly over multi-sentence documents.
pub fn make_ict_example(
    corpus: &KnowledgeCorpus,
    period: Option<TokenId>,
    rng_seed: u64,
) -> Result<IctExample> {
    Ok(IctSampler::new(corpus, period)?.sample(rng_seed))
}
