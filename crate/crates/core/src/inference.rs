//! Mapping sampled generations onto charges.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bm25::{Bm25Params, LabelMatcher};
use crate::corpus::{LabelSet, Scheme};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of score entries kept in serialized predictions.
pub const TOP_SCORES: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    /// Mean of raw BM25 scores.
    #[default]
    Raw,
    /// Each sample's row is divided by its maximum before averaging.
    MaxNormalized,
}

/// One case's parsed output. `None` labels are unparsed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    pub case_id: String,
    pub label: Option<String>,
    /// Mean similarity per label, in label-set order.
    pub score_vector: Vec<S>,
    pub consistency: usize,
    pub per_sample_labels: Vec<Option<String>>,
}

impl<S: Scalar> Prediction<S> {
    pub fn is_unparsed(&self) -> bool {
        self.label.is_none()
    }

    pub fn is_correct(&self, gold: &str) -> bool {
        self.label.as_deref() == Some(gold)
    }

    /// Highest `k` scores as `(label, score)`, ties in label-set order.
    pub fn top_scores(&self, labels: &LabelSet, k: usize) -> Vec<(String, S)> {
        let mut order: Vec<usize> = (0..self.score_vector.len()).collect();
        order.sort_by(|&a, &b| {
            self.score_vector[b]
                .partial_cmp(&self.score_vector[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| (labels.labels()[i].clone(), self.score_vector[i]))
            .collect()
    }

    pub fn to_record(&self, labels: &LabelSet) -> PredictionRecord {
        PredictionRecord {
            case_id: self.case_id.clone(),
            label: self.label.clone(),
            consistency: self.consistency,
            per_sample_labels: self.per_sample_labels.clone(),
            top_scores: self
                .top_scores(labels, TOP_SCORES)
                .into_iter()
                .map(|(l, s)| (l, s.to_f64_lossy()))
                .collect(),
        }
    }
}

/// JSONL form of a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub case_id: String,
    pub label: Option<String>,
    pub consistency: usize,
    pub per_sample_labels: Vec<Option<String>>,
    pub top_scores: Vec<(String, f64)>,
}

/// First index of the maximum, or `None` when every entry is zero.
fn argmax<S: Scalar>(row: &[S]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if v > S::zero() && best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// Multiplicity of the modal parsed label; `n` when nothing parsed.
pub fn consistency(per_sample: &[Option<String>]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in per_sample.iter().flatten() {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_values().max().unwrap_or(per_sample.len())
}

/// Maps generations onto a fixed label set through BM25 similarity.
#[derive(Debug, Clone)]
pub struct Parser<S> {
    matcher: LabelMatcher<S>,
    aggregation: ScoreAggregation,
}

impl<S: Scalar> Parser<S> {
    pub fn new(
        labels: &LabelSet,
        params: Bm25Params<S>,
        scheme: Scheme,
        aggregation: ScoreAggregation,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("label set"));
        }
        Ok(Parser {
            matcher: LabelMatcher::new(labels, params, scheme)?,
            aggregation,
        })
    }

    pub fn labels(&self) -> &LabelSet {
        self.matcher.labels()
    }

    /// Similarity row of one sample, in label-set order.
    pub fn row(&self, sample: &str) -> Vec<S> {
        self.matcher.similarity(sample)
    }

    pub fn map(
        &self,
        case_id: impl Into<String>,
        samples: &[impl AsRef<str>],
    ) -> Result<Prediction<S>> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("samples"));
        }
        let labels = self.labels().labels();
        let rows: Vec<Vec<S>> = samples.iter().map(|s| self.row(s.as_ref())).collect();
        let per_sample_labels: Vec<Option<String>> = rows
            .iter()
            .map(|r| argmax(r).map(|i| labels[i].clone()))
            .collect();
        let weighted: Vec<Vec<S>> = match self.aggregation {
            ScoreAggregation::Raw => rows,
            ScoreAggregation::MaxNormalized => rows
                .into_iter()
                .map(|r| {
                    let max = r.iter().copied().fold(S::zero(), S::max);
                    if max > S::zero() {
                        r.into_iter().map(|v| v / max).collect()
                    } else {
                        r
                    }
                })
                .collect(),
        };
        let n = S::from_count(samples.len());
        let mut column = Vec::with_capacity(samples.len());
        let score_vector: Vec<S> = (0..labels.len())
            .map(|j| {
                column.clear();
                column.extend(weighted.iter().map(|r| r[j]));
                // Summing in sorted order keeps the mean independent of sample order.
                column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                column.iter().fold(S::zero(), |acc, &v| acc + v) / n
            })
            .collect();
        Ok(Prediction {
            case_id: case_id.into(),
            label: argmax(&score_vector).map(|i| labels[i].clone()),
            consistency: consistency(&per_sample_labels),
            score_vector,
            per_sample_labels,
        })
    }
}

/// One-shot form of [`Parser::map`] with default BM25 settings.
pub fn map_samples<S: Scalar>(
    case_id: &str,
    samples: &[impl AsRef<str>],
    label_set: &LabelSet,
) -> Result<Prediction<S>> {
    Parser::new(
        label_set,
        Bm25Params::default(),
        Scheme::default(),
        ScoreAggregation::Raw,
    )?
    .map(case_id, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unparsed,
}

/// Marker lists for yes/no answers. Negatives win within a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YesNoMarkers {
    pub affirmative: Vec<String>,
    pub negative: Vec<String>,
}

impl Default for YesNoMarkers {
    fn default() -> Self {
        YesNoMarkers {
            affirmative: vec!["是".into(), "yes".into()],
            negative: vec!["否".into(), "不".into(), "no".into()],
        }
    }
}

/// ASCII markers match whole words case-insensitively; others match as
/// substrings.
fn has_marker(text: &str, marker: &str) -> bool {
    if marker.is_empty() {
        return false;
    }
    if !marker.is_ascii() {
        return text.contains(marker);
    }
    let lower = text.to_lowercase();
    let marker = marker.to_lowercase();
    lower
        .split(|c: char| !c.is_ascii_alphanumeric())
        .any(|w| w == marker)
}

impl YesNoMarkers {
    pub fn detect(&self, sample: &str) -> Verdict {
        if self.negative.iter().any(|m| has_marker(sample, m)) {
            Verdict::No
        } else if self.affirmative.iter().any(|m| has_marker(sample, m)) {
            Verdict::Yes
        } else {
            Verdict::Unparsed
        }
    }

    /// Majority over per-sample detections; ties and no detections are
    /// unparsed.
    pub fn parse(&self, samples: &[impl AsRef<str>]) -> Verdict {
        let (mut yes, mut no) = (0usize, 0usize);
        for s in samples {
            match self.detect(s.as_ref()) {
                Verdict::Yes => yes += 1,
                Verdict::No => no += 1,
                Verdict::Unparsed => {}
            }
        }
        match yes.cmp(&no) {
            std::cmp::Ordering::Greater => Verdict::Yes,
            std::cmp::Ordering::Less => Verdict::No,
            std::cmp::Ordering::Equal => Verdict::Unparsed,
        }
    }
}

pub fn parse_yes_no(samples: &[impl AsRef<str>]) -> Verdict {
    YesNoMarkers::default().parse(samples)
}
