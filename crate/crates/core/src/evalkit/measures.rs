use serde::{Deserialize, Serialize};

use crate::mipsindex::IndexSnapshot;
use crate::reader::{mlm_log_probability, ReaderParams};
use crate::retriever::{embed_input, RetrieverParams};
use crate::textcorpus::{Document, KnowledgeCorpus, MaskedExample, TokenId};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalUtilityRecord {
    pub example_id: String,
    pub doc_id: String,
    /// Nats; `±inf` when either probability underflows to zero.
    pub ru: f64,
}

/// `RU(z|x) = log p(y|z,x) − log p(y|∅,x)`.
pub fn retrieval_utility<T: Scalar>(
    x: &MaskedExample,
    z: &Document,
    phi: &ReaderParams<T>,
) -> Result<f64> {
    if z.is_null() {
        return Ok(0.0);
    }
    let with = mlm_log_probability(x, z, phi)?.f64();
    let without = mlm_log_probability(x, &Document::null(), phi)?.f64();
    Ok(utility_from_log_probs(with, without))
}

/// Difference of two log-likelihoods, with the infinite sentinels for
/// zero probabilities made explicit.
pub fn utility_from_log_probs(with: f64, without: f64) -> f64 {
    match (with == f64::NEG_INFINITY, without == f64::NEG_INFINITY) {
        (true, true) => f64::NAN,
        (true, false) => f64::NEG_INFINITY,
        (false, true) => f64::INFINITY,
        (false, false) => with - without,
    }
}

/// Mean over finite values and the number of excluded non-finite ones.
pub fn mean_finite(values: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            excluded += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, excluded)
}

/// What counts as a hit for [`recall_at_k`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecallOracle {
    /// The named document is retrieved.
    SourceDoc(String),
    /// Any reference answer occurs in a retrieved document.
    AnswerString(Vec<Vec<TokenId>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallQuery {
    pub tokens: Vec<TokenId>,
    pub oracle: RecallOracle,
}

impl RecallQuery {
    pub fn from_masked(x: &MaskedExample) -> Self {
        RecallQuery {
            tokens: x.input_tokens.clone(),
            oracle: RecallOracle::SourceDoc(x.source_doc_id.clone()),
        }
    }
}

fn contains(hay: &[TokenId], needle: &[TokenId]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Fraction of queries with a hit among the top `k` retrievals.
pub fn recall_at_k<T: Scalar>(
    queries: &[RecallQuery],
    theta: &RetrieverParams<T>,
    index: &IndexSnapshot<T>,
    corpus: &KnowledgeCorpus,
    k: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::contract("recall over an empty example set"));
    }
    let mut hits = 0usize;
    for q in queries {
        let top = index.search_topk(&embed_input(&q.tokens, theta)?, k)?;
        let hit = match &q.oracle {
            RecallOracle::SourceDoc(id) => top.doc_ids.iter().any(|d| d == id),
            RecallOracle::AnswerString(answers) => top.rows.iter().any(|&r| {
                let d = corpus.doc(r);
                answers
                    .iter()
                    .any(|a| contains(&d.body, a) || contains(&d.title, a))
            }),
        };
        hits += usize::from(hit);
    }
    Ok(hits as f64 / queries.len() as f64)
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Normalized (lowercase, collapsed whitespace) equality with any reference.
pub fn exact_match(prediction: &str, references: &[String]) -> bool {
    let p = normalize_answer(prediction);
    references.iter().any(|r| normalize_answer(r) == p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("Pound", &["pound".into()]));
        assert!(!exact_match("pound sterling", &["pound".into()]));
        assert!(exact_match("", &["".into()]));
        assert!(exact_match(
            "  the   Thames ",
            &["x".into(), "the thames".into()]
        ));
    }

    #[test]
    fn utility_arithmetic() {
        let ru = utility_from_log_probs(0.8f64.ln(), 0.2f64.ln());
        assert!((ru - 4f64.ln()).abs() < 1e-12);
        assert!((ru - 1.3863).abs() < 1e-4);
        assert!(utility_from_log_probs(0.1f64.ln(), 0.5f64.ln()) < 0.0);
        assert_eq!(
            utility_from_log_probs(f64::NEG_INFINITY, -1.0),
            f64::NEG_INFINITY
        );
        let (m, ex) = mean_finite([1.0, f64::INFINITY, 3.0]);
        assert_eq!((m, ex), (2.0, 1));
    }
}
