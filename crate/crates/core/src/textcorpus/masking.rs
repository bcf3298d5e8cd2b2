use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use super::salient::{tag_salient_spans, SalientSpanRules};
use super::vocab::{TokenId, Vocab, MASK};
use crate::{Error, Result};

pub const RANDOM_TOKEN_RATE: f64 = 0.15;
pub const SPAN_GEOMETRIC_P: f64 = 0.2;
pub const MAX_RANDOM_SPAN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingScheme {
    SalientSpan,
    RandomSpan,
    RandomToken,
}

impl std::str::FromStr for MaskingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salient_span" => Ok(MaskingScheme::SalientSpan),
            "random_span" => Ok(MaskingScheme::RandomSpan),
            "random_token" => Ok(MaskingScheme::RandomToken),
            other => Err(Error::Config(format!("unknown masking scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskingScheme::SalientSpan => "salient_span",
            MaskingScheme::RandomSpan => "random_span",
            MaskingScheme::RandomToken => "random_token",
        })
    }
}

/// A pre-training input `x` with its masked targets `y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_tokens: Vec<TokenId>,
    pub masked_positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub source_doc_id: String,
}

impl MaskedExample {
    /// Build from explicit positions; used for hand-made probes.
    pub fn from_positions(
        tokens: &[TokenId],
        positions: &[usize],
        source_doc_id: &str,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::contract(
                "a masked example needs at least one position",
            ));
        }
        let mut input = tokens.to_vec();
        let mut targets = Vec::with_capacity(positions.len());
        for &p in positions {
            let t = *input
                .get(p)
                .ok_or_else(|| Error::contract(format!("mask position {p} out of range")))?;
            if !Vocab::is_maskable(t) {
                return Err(Error::contract(format!(
                    "position {p} holds a reserved token"
                )));
            }
            targets.push(t);
            input[p] = MASK;
        }
        Ok(MaskedExample {
            input_tokens: input,
            masked_positions: positions.to_vec(),
            targets,
            source_doc_id: source_doc_id.to_string(),
        })
    }

    pub fn num_masked(&self) -> usize {
        self.masked_positions.len()
    }
}

/// Mask one sentence under `scheme`.
///
/// Returns `Ok(None)` when the salient-span scheme finds no span; the caller
/// samples another sentence.
pub fn make_masked_example<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocab,
    rules: &SalientSpanRules,
    scheme: MaskingScheme,
    rng_seed: u64,
    source_doc_id: &str,
) -> Result<Option<MaskedExample>> {
    if tokens.is_empty() {
        return Err(Error::contract("cannot mask an empty sentence"));
    }
    let ids = vocab.encode_tokens(tokens);
    let eligible: Vec<usize> = (0..ids.len())
        .filter(|&i| Vocab::is_maskable(ids[i]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let positions: Vec<usize> = match scheme {
        MaskingScheme::SalientSpan => {
            let spans: Vec<_> = tag_salient_spans(tokens, rules)
                .into_iter()
                .filter(|s| (s.start..=s.end).all(|i| Vocab::is_maskable(ids[i])))
                .collect();
            if spans.is_empty() {
                return Ok(None);
            }
            let s = spans[rng.random_range(0..spans.len())];
            (s.start..=s.end).collect()
        }
        MaskingScheme::RandomSpan => {
            if eligible.is_empty() {
                return Err(Error::contract("no maskable tokens"));
            }
            let geo = Geometric::new(SPAN_GEOMETRIC_P).expect("valid p");
            let want = (1 + geo.sample(&mut rng) as usize).min(MAX_RANDOM_SPAN);
            // Maximal runs of consecutive maskable positions.
            let mut runs: Vec<(usize, usize)> = Vec::new();
            for &i in &eligible {
                match runs.last_mut() {
                    Some((_, end)) if *end + 1 == i => *end = i,
                    _ => runs.push((i, i)),
                }
            }
            let longest = runs.iter().map(|(s, e)| e - s + 1).max().unwrap_or(1);
            let len = want.min(longest);
            let starts: Vec<usize> = runs
                .iter()
                .filter(|(s, e)| e - s + 1 >= len)
                .flat_map(|&(s, e)| s..=e + 1 - len)
                .collect();
            let start = starts[rng.random_range(0..starts.len())];
            (start..start + len).collect()
        }
        MaskingScheme::RandomToken => {
            if eligible.is_empty() {
                return Err(Error::contract("no maskable tokens"));
            }
            loop {
                let chosen: Vec<usize> = eligible
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(RANDOM_TOKEN_RATE))
                    .collect();
                if !chosen.is_empty() {
                    break chosen;
                }
            }
        }
    };
    MaskedExample::from_positions(&ids, &positions, source_doc_id).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcorpus::vocab::{tokenize, CLS, SEP};

    fn setup(text: &str, gaz: &[&str]) -> (Vec<String>, Vocab, SalientSpanRules) {
        let toks = tokenize(text);
        let vocab = Vocab::build([text]);
        let rules = SalientSpanRules::with_default_dates(gaz.iter().copied()).unwrap();
        (toks, vocab, rules)
    }

    #[test]
    fn salient_span_masks_chosen_entity() {
        let (toks, vocab, rules) = setup("the pound is the currency of the uk", &["uk", "pound"]);
        let uk = vocab.id("uk");
        let seed = (0..64)
            .find(|&s| {
                make_masked_example(&toks, &vocab, &rules, MaskingScheme::SalientSpan, s, "d")
                    .unwrap()
                    .unwrap()
                    .targets
                    == vec![uk]
            })
            .expect("some seed picks uk");
        let ex = make_masked_example(&toks, &vocab, &rules, MaskingScheme::SalientSpan, seed, "d")
            .unwrap()
            .unwrap();
        assert_eq!(ex.masked_positions, vec![7]);
        assert_eq!(
            vocab.decode(&ex.input_tokens),
            "the pound is the currency of the [MASK]"
        );
        assert_eq!(ex.source_doc_id, "d");
    }

    #[test]
    fn salient_without_spans_skips() {
        let (toks, vocab, rules) = setup("nothing salient here", &["uk"]);
        let out =
            make_masked_example(&toks, &vocab, &rules, MaskingScheme::SalientSpan, 0, "d").unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn single_token_random_token_always_masks() {
        let (toks, vocab, rules) = setup("hello", &[]);
        for seed in 0..20 {
            let ex =
                make_masked_example(&toks, &vocab, &rules, MaskingScheme::RandomToken, seed, "d")
                    .unwrap()
                    .unwrap();
            assert_eq!(ex.masked_positions, vec![0]);
            assert_eq!(ex.input_tokens, vec![MASK]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (toks, vocab, rules) = setup("a b c d e f g h i j k l", &[]);
        for scheme in [MaskingScheme::RandomSpan, MaskingScheme::RandomToken] {
            let a = make_masked_example(&toks, &vocab, &rules, scheme, 42, "d").unwrap();
            let b = make_masked_example(&toks, &vocab, &rules, scheme, 42, "d").unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn random_span_is_contiguous_and_bounded() {
        let (toks, vocab, rules) = setup("a b c d e f g h i j k l m n o p", &[]);
        let mut lengths = [0usize; MAX_RANDOM_SPAN + 1];
        for seed in 0..2000 {
            let ex =
                make_masked_example(&toks, &vocab, &rules, MaskingScheme::RandomSpan, seed, "d")
                    .unwrap()
                    .unwrap();
            let p = &ex.masked_positions;
            assert!(p.windows(2).all(|w| w[1] == w[0] + 1));
            assert!((1..=MAX_RANDOM_SPAN).contains(&p.len()));
            lengths[p.len()] += 1;
        }
        // P(len = 1) = 0.2 under the geometric law.
        let frac1 = lengths[1] as f64 / 2000.0;
        assert!((frac1 - 0.2).abs() < 0.03, "{frac1}");
    }

    #[test]
    fn random_token_rate() {
        let text: String = (0..30).map(|i| format!("w{i} ")).collect();
        let (toks, vocab, rules) = setup(&text, &[]);
        let mut masked = 0usize;
        let draws = 10_000;
        for seed in 0..draws {
            masked +=
                make_masked_example(&toks, &vocab, &rules, MaskingScheme::RandomToken, seed, "d")
                    .unwrap()
                    .unwrap()
                    .num_masked();
        }
        let rate = masked as f64 / (draws as usize * toks.len()) as f64;
        assert!((rate - 0.15).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn reserved_tokens_never_masked() {
        let mut vocab = Vocab::build(["x y z"]);
        vocab.insert("q");
        let rules = SalientSpanRules::with_default_dates(["[cls]"]).unwrap();
        let toks = ["[CLS]", "x", "[SEP]", "y", "z", "[SEP]"];
        for scheme in [MaskingScheme::RandomSpan, MaskingScheme::RandomToken] {
            for seed in 0..300 {
                let ex = make_masked_example(&toks, &vocab, &rules, scheme, seed, "d")
                    .unwrap()
                    .unwrap();
                for &p in &ex.masked_positions {
                    assert!(![CLS, SEP].contains(&vocab.id(toks[p])));
                }
            }
        }
    }
}
