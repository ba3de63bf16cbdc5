use caseprompt_core::bm25::{Bm25Index, Bm25Params};
use caseprompt_core::corpus::Scheme;
use proptest::prelude::*;

/// Direct evaluation of the scoring formula over whitespace tokens.
fn brute_score(docs: &[Vec<String>], query: &[String], doc: usize, k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let dl = docs[doc].len() as f64;
    query
        .iter()
        .map(|q| {
            let tf = docs[doc].iter().filter(|t| *t == q).count() as f64;
            if tf == 0.0 {
                return 0.0;
            }
            let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = if avgdl > 0.0 {
                1.0 - b + b * dl / avgdl
            } else {
                1.0 - b
            };
            idf * tf * (k1 + 1.0) / (tf + k1 * norm)
        })
        .sum()
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<String>)> {
    let word = (0u8..12).prop_map(|i| format!("w{i}"));
    let doc = prop::collection::vec(word.clone(), 0..20);
    (
        prop::collection::vec(doc, 1..30),
        prop::collection::vec(word, 1..8),
    )
}

fn build(docs: &[Vec<String>], k1: f64, b: f64) -> Bm25Index<f64> {
    let texts: Vec<(String, String)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("d{i}"), d.join(" ")))
        .collect();
    Bm25Index::build(texts, Bm25Params::new(k1, b).unwrap(), Scheme::Whitespace).unwrap()
}

proptest! {
    #[test]
    fn without_length_normalization_padding_is_irrelevant((docs, query) in corpus(), k1 in 0.1f64..3.0) {
        let idx = build(&docs, k1, 0.0);
        let mut padded = docs.clone();
        padded[0].extend(std::iter::repeat_n("pad".to_string(), 7));
        let padded_idx = build(&padded, k1, 0.0);
        for i in 0..docs.len() {
            let a = idx.score_doc(&query, i);
            let b = padded_idx.score_doc(&query, i);
            prop_assert!((a - b).abs() <= 1e-12, "doc {i}: {a} vs {b}");
        }
    }

    #[test]
    fn scores_ignore_document_order((docs, query) in corpus(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let idx = build(&docs, 1.5, 0.75);
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<(String, String)> = order.iter().map(|&i| (format!("d{i}"), docs[i].join(" "))).collect();
        let sidx = Bm25Index::<f64>::build(shuffled, Bm25Params::default(), Scheme::Whitespace).unwrap();
        for i in 0..docs.len() {
            let id = format!("d{i}");
            let a = idx.score(&query, &id).unwrap();
            let b = sidx.score(&query, &id).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn score_matches_formula_and_score_all((docs, query) in corpus(), k1 in 0.0f64..3.0, b in 0.0f64..=1.0) {
        let idx = build(&docs, k1, b);
        let all = idx.score_all(&query);
        for (i, &score) in all.iter().enumerate() {
            let expected = brute_score(&docs, &query, i, k1, b);
            prop_assert!((idx.score_doc(&query, i) - expected).abs() <= 1e-9);
            prop_assert_eq!(score, idx.score_doc(&query, i));
        }
    }

    #[test]
    fn single_precision_tracks_double((docs, query) in corpus()) {
        let texts: Vec<(String, String)> = docs.iter().enumerate().map(|(i, d)| (format!("d{i}"), d.join(" "))).collect();
        let i64 = Bm25Index::<f64>::build(texts.clone(), Bm25Params::default(), Scheme::Whitespace).unwrap();
        let i32 = Bm25Index::<f32>::build(texts, Bm25Params::default(), Scheme::Whitespace).unwrap();
        for d in 0..docs.len() {
            let a = i64.score_doc(&query, d);
            let b = i32.score_doc(&query, d) as f64;
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn save_load_preserves_rankings() {
    let docs: Vec<Vec<String>> = vec![
        "w1 w2 w3".split(' ').map(String::from).collect(),
        "w2 w2 w4".split(' ').map(String::from).collect(),
        "w5".split(' ').map(String::from).collect(),
    ];
    let idx = build(&docs, 1.2, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.json");
    idx.save(&path).unwrap();
    let back = Bm25Index::<f64>::load(&path, Some(idx.corpus_hash())).unwrap();
    assert_eq!(back.retrieve("w2 w4", 3), idx.retrieve("w2 w4", 3));
    assert!(Bm25Index::<f64>::load(&path, Some("deadbeef")).is_err());
}
