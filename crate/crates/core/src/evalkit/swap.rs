use serde::{Deserialize, Serialize};

use crate::mipsindex::{build_index, IndexStructure};
use crate::textcorpus::{KnowledgeCorpus, MaskedExample, TokenId};
use crate::trainer::{CandidateRule, ParamStore};
use crate::{Error, Result, Scalar};

use super::predict::predict_masked;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub prediction_v1: Vec<TokenId>,
    pub prediction_v2: Vec<TokenId>,
    pub changed: bool,
}

/// Predict every probe against an index over each corpus version, with the
/// same parameters throughout.
pub fn corpus_swap_test<T: Scalar>(
    store: &ParamStore<T>,
    corpus_v1: &KnowledgeCorpus,
    corpus_v2: &KnowledgeCorpus,
    probes: &[MaskedExample],
    rule: CandidateRule,
    structure: IndexStructure,
    seed: u64,
) -> Result<Vec<SwapOutcome>> {
    if probes.is_empty() {
        return Err(Error::contract("corpus swap needs at least one probe"));
    }
    let v1 = build_index(corpus_v1, &store.theta, store.version(), structure, seed)?;
    let v2 = build_index(corpus_v2, &store.theta, store.version(), structure, seed)?;
    probes
        .iter()
        .map(|x| {
            let a = predict_masked(x, store, &v1, corpus_v1, rule)?;
            let b = predict_masked(x, store, &v2, corpus_v2, rule)?;
            Ok(SwapOutcome {
                changed: a != b,
                prediction_v1: a,
                prediction_v2: b,
            })
        })
        .collect()
}
