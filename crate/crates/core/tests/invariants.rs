use proptest::prelude::*;
use ralm_core::diffcore::Tensor;
use ralm_core::mipsindex::{IndexSnapshot, IndexStructure};
use ralm_core::retriever::{retrieval_distribution, ParamVersion};
use ralm_core::textcorpus::{
    make_masked_example, parse_corpus, parse_qa, qa_to_string, MaskingScheme, QaRecord,
    SalientSpanRules, Vocab, MASK,
};
use ralm_core::trainer::marginal_terms;

fn distribution(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn snapshot(rows: &[Vec<f64>], structure: IndexStructure) -> IndexSnapshot<f64> {
    let ids = (0..rows.len()).map(|i| format!("d{i}")).collect();
    IndexSnapshot::from_embeddings(
        Tensor::from_rows(rows).unwrap(),
        ids,
        ParamVersion(0),
        structure,
        3,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn relevance_weights_sum_to_one(scores in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let p = retrieval_distribution(&scores).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let argmax = p.iter().cloned().fold(0.0, f64::max);
        let i = scores.iter().position(|&s| s == best).unwrap();
        prop_assert_eq!(p[i], argmax);
    }

    #[test]
    fn responsibility_sign_matches_likelihood(
        pairs in prop::collection::vec((0.01f64..1.0, 1e-6f64..1.0), 1..20)
    ) {
        let p_z = distribution(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let p_y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (marginal, r) = marginal_terms(&p_z, &p_y);
        prop_assert!(r.iter().sum::<f64>().abs() < 1e-12);
        for (ri, &py) in r.iter().zip(&p_y) {
            if py > marginal * (1.0 + 1e-12) {
                prop_assert!(*ri > 0.0);
            } else if py < marginal * (1.0 - 1e-12) {
                prop_assert!(*ri < 0.0);
            }
        }
    }

    #[test]
    fn exhaustive_search_matches_sort(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..30),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1usize..10,
    ) {
        let k = k.min(rows.len());
        let index = snapshot(&rows, IndexStructure::Exhaustive);
        let got = index.search(&q, k).unwrap();
        let mut scored: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| a * b).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<f64> = scored.iter().take(k).map(|s| s.0).collect();
        prop_assert_eq!(got.scores, want);
    }

    #[test]
    fn ivf_with_all_lists_probed_is_exact(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 8..40),
        q in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let exact = snapshot(&rows, IndexStructure::Exhaustive).search(&q, 5).unwrap();
        let ivf = snapshot(&rows, IndexStructure::Ivf { clusters: 4, nprobe: 4 }).search(&q, 5).unwrap();
        prop_assert_eq!(exact.scores, ivf.scores);
    }

    #[test]
    fn masking_replaces_exactly_the_targets(words in prop::collection::vec("[a-e]{1,3}", 3..25), seed in any::<u64>()) {
        let vocab = Vocab::build(words.iter().map(String::as_str));
        let rules = SalientSpanRules::new(["a", "bb"], "^$").unwrap();
        for scheme in [MaskingScheme::RandomToken, MaskingScheme::RandomSpan, MaskingScheme::SalientSpan] {
            let Some(x) = make_masked_example(&words, &vocab, &rules, scheme, seed, "d").unwrap() else {
                prop_assert_eq!(scheme, MaskingScheme::SalientSpan);
                continue;
            };
            let ids = vocab.encode_tokens(&words);
            prop_assert!(!x.masked_positions.is_empty());
            prop_assert_eq!(x.input_tokens.len(), ids.len());
            for (i, (&got, &orig)) in x.input_tokens.iter().zip(&ids).enumerate() {
                match x.masked_positions.iter().position(|&p| p == i) {
                    Some(j) => {
                        prop_assert_eq!(got, MASK);
                        prop_assert_eq!(x.targets[j], orig);
                    }
                    None => prop_assert_eq!(got, orig),
                }
            }
        }
    }

    #[test]
    fn corpus_file_round_trips(
        docs in prop::collection::btree_map("[a-z0-9]{1,8}", ("[A-Za-z ]{0,12}", "[a-z .]{1,30}"), 1..12)
    ) {
        let text: String = docs.iter().map(|(id, (t, b))| format!("{id}\t{t}\t{b}\n")).collect();
        let parsed = parse_corpus(&text).unwrap();
        prop_assert_eq!(parsed.to_file_string(), text.clone());
        let again = parse_corpus(&parsed.to_file_string()).unwrap();
        prop_assert_eq!(again.version, parsed.version);
    }

    #[test]
    fn qa_file_round_trips(
        rows in prop::collection::vec(("[a-z]{1,6}( [a-z]{1,6}){0,4}", prop::collection::vec("[a-z]{1,6}", 1..4)), 1..10)
    ) {
        let records: Vec<QaRecord> = rows
            .into_iter()
            .map(|(question, answers)| QaRecord { question, answers })
            .collect();
        prop_assert_eq!(parse_qa(&qa_to_string(&records)).unwrap(), records);
    }
}

#[test]
fn duplicate_doc_ids_are_rejected() {
    assert!(parse_corpus("a\tt\tb\na\tt\tc\n").is_err());
}
