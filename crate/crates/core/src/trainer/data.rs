use rand::Rng;

use crate::rng;
use crate::textcorpus::{
    make_masked_example, split_sentences, MaskedExample, MaskingScheme, SalientSpanRules,
    TextCorpus, Vocab,
};
use crate::{Error, Result};

/// Draws before giving up on finding a maskable sentence.
const MAX_DRAWS: u64 = 1000;

/// Sentence pool of the pre-training corpus, sampled uniformly.
#[derive(Clone, Debug)]
pub struct PretrainData {
    sentences: Vec<(Vec<String>, String)>,
    vocab: Vocab,
    rules: SalientSpanRules,
}

impl PretrainData {
    pub fn new(corpus: &TextCorpus, vocab: Vocab, rules: SalientSpanRules) -> Result<Self> {
        let sentences: Vec<_> = corpus
            .records
            .iter()
            .flat_map(|r| {
                split_sentences(&r.body)
                    .into_iter()
                    .map(move |s| (s, r.doc_id.clone()))
            })
            .collect();
        if sentences.is_empty() {
            return Err(Error::Validation(
                "pre-training corpus has no sentences".into(),
            ));
        }
        Ok(PretrainData {
            sentences,
            vocab,
            rules,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn rules(&self) -> &SalientSpanRules {
        &self.rules
    }

    pub fn sentences(&self) -> &[(Vec<String>, String)] {
        &self.sentences
    }

    /// Example `slot` of the batch at `step`, a pure function of its
    /// arguments. Sentences without a salient span are redrawn.
    pub fn example(
        &self,
        scheme: MaskingScheme,
        seed: u64,
        stream: &str,
        step: u64,
        slot: u64,
    ) -> Result<MaskedExample> {
        for draw in 0..MAX_DRAWS {
            let mut r = rng::stream(seed, stream, &[step, slot, draw]);
            let (tokens, doc_id) = &self.sentences[r.random_range(0..self.sentences.len())];
            if let Some(x) =
                make_masked_example(tokens, &self.vocab, &self.rules, scheme, r.random(), doc_id)?
            {
                return Ok(x);
            }
        }
        Err(Error::Validation(format!(
            "no sentence with a salient span after {MAX_DRAWS} draws"
        )))
    }
}
