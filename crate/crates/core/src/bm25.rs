//! Okapi BM25 inverted index.
//!
//! Term weight for a query term `t` in document `d`:
//!
//! ```text
//! idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
//! idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))
//! ```
//!
//! Every occurrence of a term in the query contributes once. The `ln(1 + x)`
//! idf never goes negative, so scores are always `>= 0`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{tokens, Case, LabelSet, Scheme};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params<S> {
    pub k1: S,
    pub b: S,
}

impl<S: Scalar> Default for Bm25Params<S> {
    fn default() -> Self {
        Bm25Params {
            k1: S::lit(1.5),
            b: S::lit(0.75),
        }
    }
}

impl<S: Scalar> Bm25Params<S> {
    pub fn new(k1: S, b: S) -> Result<Self> {
        let p = Bm25Params { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.k1.is_finite() || self.k1 < S::zero() {
            return Err(Error::InvalidParameter(format!(
                "k1 must be >= 0, got {}",
                self.k1
            )));
        }
        if !(self.b >= S::zero() && self.b <= S::one()) {
            return Err(Error::InvalidParameter(format!(
                "b must lie in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// One entry of a ranked result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit<S> {
    pub doc_id: String,
    /// Insertion position of the document in the index.
    pub doc: usize,
    pub score: S,
    /// 1-based.
    pub rank: usize,
}

/// Immutable BM25 index. Built once, shared freely between readers.
#[derive(Debug, Clone)]
pub struct Bm25Index<S> {
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: S,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_freq: BTreeMap<String, u32>,
    params: Bm25Params<S>,
    scheme: Scheme,
    corpus_hash: String,
    by_id: HashMap<String, usize>,
}

/// Content hash of everything that determines an index.
pub fn corpus_hash<S: Scalar, I, T>(docs: I, params: &Bm25Params<S>, scheme: Scheme) -> String
where
    I: IntoIterator<Item = (T, T)>,
    T: AsRef<str>,
{
    let mut h = Sha256::new();
    h.update(format!("bm25/v{INDEX_FORMAT_VERSION}\0{}\0", scheme.id()));
    h.update(params.k1.to_f64_lossy().to_bits().to_le_bytes());
    h.update(params.b.to_f64_lossy().to_bits().to_le_bytes());
    for (id, text) in docs {
        for part in [id.as_ref(), text.as_ref()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl<S: Scalar> Bm25Index<S> {
    /// Builds an index over `(id, text)` pairs, keeping insertion order.
    pub fn build<I, T>(docs: I, params: Bm25Params<S>, scheme: Scheme) -> Result<Self>
    where
        I: IntoIterator<Item = (T, T)>,
        T: AsRef<str>,
    {
        params.validate()?;
        let docs: Vec<(T, T)> = docs.into_iter().collect();
        if docs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let hash = corpus_hash(
            docs.iter().map(|(a, b)| (a.as_ref(), b.as_ref())),
            &params,
            scheme,
        );

        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut by_id = HashMap::with_capacity(docs.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, (id, text)) in docs.iter().enumerate() {
            let id = id.as_ref();
            if by_id.insert(id.to_owned(), doc).is_some() {
                return Err(Error::DuplicateId(id.to_owned()));
            }
            let toks = tokens(text.as_ref(), scheme);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
            doc_ids.push(id.to_owned());
            doc_len.push(toks.len() as u32);
        }
        let doc_freq = postings
            .iter()
            .map(|(t, p)| (t.clone(), p.len() as u32))
            .collect();
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_len = S::from_f64(total as f64 / doc_len.len() as f64).unwrap();
        Ok(Bm25Index {
            doc_ids,
            doc_len,
            avg_len,
            postings,
            doc_freq,
            params,
            scheme,
            corpus_hash: hash,
            by_id,
        })
    }

    /// Index over the facts of `cases`, keyed by case id.
    pub fn from_cases(cases: &[Case], params: Bm25Params<S>, scheme: Scheme) -> Result<Self> {
        Self::build(
            cases.iter().map(|c| (c.id.as_str(), c.fact.as_str())),
            params,
            scheme,
        )
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_position(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_len[doc]
    }

    pub fn avg_len(&self) -> S {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn params(&self) -> &Bm25Params<S> {
        &self.params
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokens(text, self.scheme)
    }

    /// Inverse document frequency of a term with document frequency `df`.
    pub fn idf(&self, df: u32) -> S {
        let n = S::from_count(self.len());
        let df = S::from_u32(df).unwrap();
        let half = S::lit(0.5);
        (S::one() + (n - df + half) / (df + half)).ln()
    }

    fn term_weight(&self, idf: S, tf: u32, doc: usize) -> S {
        let Bm25Params { k1, b } = self.params;
        let tf = S::from_u32(tf).unwrap();
        let dl = S::from_u32(self.doc_len[doc]).unwrap();
        let norm = if self.avg_len > S::zero() {
            S::one() - b + b * dl / self.avg_len
        } else {
            S::one() - b
        };
        idf * tf * (k1 + S::one()) / (tf + k1 * norm)
    }

    fn tf_in(&self, postings: &[Posting], doc: usize) -> Option<u32> {
        postings
            .binary_search_by_key(&(doc as u32), |p| p.doc)
            .ok()
            .map(|i| postings[i].tf)
    }

    /// BM25 score of one document for an already tokenized query.
    pub fn score<T: AsRef<str>>(&self, query_tokens: &[T], doc_id: &str) -> Result<S> {
        let doc = self
            .doc_position(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_owned()))?;
        Ok(self.score_doc(query_tokens, doc))
    }

    pub fn score_doc<T: AsRef<str>>(&self, query_tokens: &[T], doc: usize) -> S {
        let mut total = S::zero();
        for t in query_tokens {
            let Some(list) = self.postings.get(t.as_ref()) else {
                continue;
            };
            if let Some(tf) = self.tf_in(list, doc) {
                let idf = self.idf(list.len() as u32);
                total = total + self.term_weight(idf, tf, doc);
            }
        }
        total
    }

    /// Scores of every document, in insertion order.
    pub fn score_all<T: AsRef<str>>(&self, query_tokens: &[T]) -> Vec<S> {
        let mut acc = vec![S::zero(); self.len()];
        for t in query_tokens {
            let Some(list) = self.postings.get(t.as_ref()) else {
                continue;
            };
            let idf = self.idf(list.len() as u32);
            for p in list {
                let doc = p.doc as usize;
                acc[doc] = acc[doc] + self.term_weight(idf, p.tf, doc);
            }
        }
        acc
    }

    /// Top-`k` documents for `query_text`; ties keep insertion order.
    pub fn retrieve(&self, query_text: &str, k: usize) -> Vec<RankedHit<S>> {
        self.retrieve_tokens(&self.tokenize(query_text), k)
    }

    pub fn retrieve_tokens<T: AsRef<str>>(
        &self,
        query_tokens: &[T],
        k: usize,
    ) -> Vec<RankedHit<S>> {
        let scores = self.score_all(query_tokens);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        };
        let k = k.min(order.len());
        if k == 0 {
            return Vec::new();
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        order
            .into_iter()
            .enumerate()
            .map(|(i, doc)| RankedHit {
                doc_id: self.doc_ids[doc].clone(),
                doc,
                score: scores[doc],
                rank: i + 1,
            })
            .collect()
    }
}

/// Precision of the retriever over a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport<S> {
    pub k: usize,
    /// Fraction of queries whose top hit carries the gold label.
    pub top1: S,
    /// Mean of the per-query Precision@k.
    pub mean_at_k: S,
    pub per_query: Vec<QueryPrecision<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrecision<S> {
    pub case_id: String,
    /// Matching hits in the top `k`, divided by `k`.
    pub precision: S,
    pub top1_match: bool,
    pub top1_score: S,
}

/// Precision@k of `index` for labeled `queries`.
pub fn precision_at_k<S: Scalar>(
    index: &Bm25Index<S>,
    queries: &[Case],
    corpus_labels: &HashMap<String, String>,
    k: usize,
) -> Result<PrecisionReport<S>> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("queries"));
    }
    let denom = S::from_count(k);
    let mut per_query = Vec::with_capacity(queries.len());
    let mut top1_hits = 0usize;
    let mut sum = S::zero();
    for q in queries {
        let hits = index.retrieve(&q.fact, k);
        let label_of = |h: &RankedHit<S>| corpus_labels.get(&h.doc_id).map(String::as_str);
        let matches = hits
            .iter()
            .filter(|h| label_of(h) == Some(q.charge.as_str()))
            .count();
        let top1_match = hits
            .first()
            .is_some_and(|h| label_of(h) == Some(q.charge.as_str()));
        top1_hits += top1_match as usize;
        let precision = S::from_count(matches) / denom;
        sum = sum + precision;
        per_query.push(QueryPrecision {
            case_id: q.id.clone(),
            precision,
            top1_match,
            top1_score: hits.first().map_or(S::zero(), |h| h.score),
        });
    }
    let n = S::from_count(queries.len());
    Ok(PrecisionReport {
        k,
        top1: S::from_count(top1_hits) / n,
        mean_at_k: sum / n,
        per_query,
    })
}

/// Micro-index whose documents are charge names, used to map free-form
/// generations onto the label set.
#[derive(Debug, Clone)]
pub struct LabelMatcher<S> {
    index: Bm25Index<S>,
    labels: LabelSet,
}

impl<S: Scalar> LabelMatcher<S> {
    pub fn new(labels: &LabelSet, params: Bm25Params<S>, scheme: Scheme) -> Result<Self> {
        let index = Bm25Index::build(labels.iter().map(|l| (l, l)), params, scheme)?;
        Ok(LabelMatcher {
            index,
            labels: labels.clone(),
        })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    /// Score of every label (in label-set order) for one output text.
    pub fn similarity(&self, output: &str) -> Vec<S> {
        self.index.score_all(&self.index.tokenize(output))
    }
}

/// BM25 similarity of every `(output, label)` pair.
pub fn label_similarity<S: Scalar, T: AsRef<str>>(
    outputs: &[T],
    label_set: &LabelSet,
    params: Bm25Params<S>,
    scheme: Scheme,
) -> Result<Vec<Vec<S>>> {
    let matcher = LabelMatcher::new(label_set, params, scheme)?;
    Ok(outputs
        .iter()
        .map(|o| matcher.similarity(o.as_ref()))
        .collect())
}

/// Versioned on-disk form of an index.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexArtifact<S> {
    format_version: u32,
    corpus_hash: String,
    scheme: Scheme,
    params: Bm25Params<S>,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl<S: Scalar + Serialize + DeserializeOwned> Bm25Index<S> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let artifact = IndexArtifact {
            format_version: INDEX_FORMAT_VERSION,
            corpus_hash: self.corpus_hash.clone(),
            scheme: self.scheme,
            params: self.params,
            doc_ids: self.doc_ids.clone(),
            doc_len: self.doc_len.clone(),
            postings: self
                .postings
                .iter()
                .map(|(t, ps)| (t.clone(), ps.iter().map(|p| (p.doc, p.tf)).collect()))
                .collect(),
        };
        let bytes = serde_json::to_vec(&artifact)?;
        crate::fsutil::write_atomic(path, &bytes)
    }

    /// Loads an index, optionally checking it against an expected corpus hash.
    pub fn load(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |message: String| Error::Artifact {
            path: path.to_path_buf(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let a: IndexArtifact<S> = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        if a.format_version != INDEX_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                a.format_version
            )));
        }
        if let Some(expected) = expected_hash {
            if expected != a.corpus_hash {
                return Err(bad(format!(
                    "corpus hash {} != expected {expected}",
                    a.corpus_hash
                )));
            }
        }
        if a.doc_ids.len() != a.doc_len.len() || a.doc_ids.is_empty() {
            return Err(bad("inconsistent document tables".into()));
        }
        let mut by_id = HashMap::with_capacity(a.doc_ids.len());
        for (i, id) in a.doc_ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(bad(format!("duplicate id {id}")));
            }
        }
        let n = a.doc_ids.len() as u32;
        let mut postings = BTreeMap::new();
        for (term, list) in a.postings {
            if list.windows(2).any(|w| w[0].0 >= w[1].0) || list.iter().any(|p| p.0 >= n) {
                return Err(bad(format!("postings for `{term}` out of order")));
            }
            postings.insert(
                term,
                list.into_iter()
                    .map(|(doc, tf)| Posting { doc, tf })
                    .collect::<Vec<_>>(),
            );
        }
        let doc_freq = postings
            .iter()
            .map(|(t, p): (&String, &Vec<Posting>)| (t.clone(), p.len() as u32))
            .collect();
        let total: u64 = a.doc_len.iter().map(|&l| l as u64).sum();
        Ok(Bm25Index {
            avg_len: S::from_f64(total as f64 / a.doc_len.len() as f64).unwrap(),
            doc_ids: a.doc_ids,
            doc_len: a.doc_len,
            postings,
            doc_freq,
            params: a.params,
            scheme: a.scheme,
            corpus_hash: a.corpus_hash,
            by_id,
        })
    }
}
