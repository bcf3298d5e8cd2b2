//! Corpus files, vocabulary, salient-span tagging and example generation.

mod corpus;
mod ict;
mod masking;
mod qa;
mod salient;
mod vocab;

pub use corpus::{
    content_digest, load_corpus, parse_corpus, CorpusRecord, Document, KnowledgeCorpus, TextCorpus,
    NULL_DOC_ID,
};
pub use ict::{make_ict_example, sentence_ranges, IctExample, IctSampler, ICT_REMOVE_PROB};
pub use masking::{
    make_masked_example, MaskedExample, MaskingScheme, MAX_RANDOM_SPAN, RANDOM_TOKEN_RATE,
    SPAN_GEOMETRIC_P,
};
pub use qa::{
    check_disjoint, load_qa, parse_qa, qa_to_string, QaExample, QaRecord, ANSWER_SEPARATOR,
};
pub use salient::{tag_salient_spans, SalientSpanRules, Span, DEFAULT_DATE_PATTERN};
pub use vocab::{tokenize, TokenId, Vocab, CLS, MASK, NUM_RESERVED, PAD, SEP, UNK};

/// Sentences of a text body as surface tokens, split after each `.` token.
pub fn split_sentences(body: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for tok in tokenize(body) {
        let end = tok == ".";
        cur.push(tok);
        if end {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
