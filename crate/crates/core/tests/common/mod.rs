#![allow(dead_code)]

use caseprompt_core::bm25::Bm25Params;
use caseprompt_core::casebase::CaseBase;
use caseprompt_core::corpus::{Case, Scheme};

/// Direct evaluation of the BM25 formula over whitespace tokens.
pub fn brute_scores(docs: &[&str], query: &str, k1: f64, b: f64) -> Vec<f64> {
    let docs: Vec<Vec<&str>> = docs
        .iter()
        .map(|d| d.split_whitespace().collect())
        .collect();
    let query: Vec<&str> = query.split_whitespace().collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    docs.iter()
        .map(|d| {
            let dl = d.len() as f64;
            query
                .iter()
                .map(|q| {
                    let tf = d.iter().filter(|t| *t == q).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = docs.iter().filter(|x| x.contains(q)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
                })
                .sum()
        })
        .collect()
}

pub fn case_base(rows: &[(&str, &str, &str)]) -> CaseBase<f64> {
    CaseBase::build(
        rows.iter()
            .map(|(id, fact, charge)| Case::new(*id, *fact, *charge))
            .collect(),
        Bm25Params::default(),
        Scheme::Whitespace,
    )
    .unwrap()
}
