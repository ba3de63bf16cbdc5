//! kNN baseline over BM25 hits and simulated retrievers of chosen quality.
//!
//! A simulated retriever hands each test case demonstrations whose charges
//! agree (`T`) or disagree (`F`) with the query on purpose. Easy queries, as
//! ranked by BM25 Precision@10, receive the `T` demonstrations first, so a
//! target Precision@1 of `a` gives the easiest `ceil(a * N)` queries a true
//! similar case in slot one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bm25::{precision_at_k, RankedHit};
use crate::casebase::CaseBase;
use crate::corpus::Case;
use crate::error::{Error, Result};
use crate::fsutil::sha256_hex;
use crate::scalar::{ceil_count, Scalar};

/// Horizon of the Precision@k used as the query-difficulty measure.
pub const DIFFICULTY_HORIZON: usize = 10;

/// Whether a demonstration shares the query's charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flag {
    T,
    F,
}

impl Flag {
    pub fn from_match(same_charge: bool) -> Self {
        if same_charge {
            Flag::T
        } else {
            Flag::F
        }
    }

    pub fn is_true(self) -> bool {
        self == Flag::T
    }
}

/// Ordered sequence of demonstration flags, e.g. `FT`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Pattern(pub Vec<Flag>);

impl Pattern {
    pub fn empty() -> Self {
        Pattern(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flags(&self) -> &[Flag] {
        &self.0
    }

    pub fn with(&self, added: Flag) -> Pattern {
        let mut v = self.0.clone();
        v.push(added);
        Pattern(v)
    }

    /// All `2^len` patterns of the given length, `T` before `F`.
    pub fn all_of_len(len: usize) -> Vec<Pattern> {
        let mut out = vec![Pattern::empty()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| [p.with(Flag::T), p.with(Flag::F)])
                .collect();
        }
        out
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("-");
        }
        for flag in &self.0 {
            f.write_str(match flag {
                Flag::T => "T",
                Flag::F => "F",
            })?;
        }
        Ok(())
    }
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "-" || s.is_empty() {
            return Ok(Pattern::empty());
        }
        s.chars()
            .filter(|c| !matches!(c, ',' | ' ' | '(' | ')'))
            .map(|c| match c {
                'T' | 't' | '1' => Ok(Flag::T),
                'F' | 'f' | '0' => Ok(Flag::F),
                other => Err(Error::InvalidParameter(format!(
                    "bad pattern flag `{other}` in `{s}`"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Pattern)
    }
}

impl Serialize for Pattern {
    fn serialize<Ser: serde::Serializer>(
        &self,
        s: Ser,
    ) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEntry<S> {
    pub case_id: String,
    /// Precision@10 of the BM25 retriever; the difficulty score.
    pub precision: S,
    pub top1_score: S,
}

/// Test cases ordered easiest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRanking<S> {
    pub entries: Vec<DifficultyEntry<S>>,
}

impl<S> DifficultyRanking<S> {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.case_id.as_str())
    }
}

pub fn rank_by_difficulty<S: Scalar>(
    base: &CaseBase<S>,
    tests: &[Case],
) -> Result<DifficultyRanking<S>> {
    rank_by_difficulty_at(base, tests, DIFFICULTY_HORIZON)
}

/// Sorts by Precision@`horizon` descending, then top-1 score descending,
/// then case id.
pub fn rank_by_difficulty_at<S: Scalar>(
    base: &CaseBase<S>,
    tests: &[Case],
    horizon: usize,
) -> Result<DifficultyRanking<S>> {
    let report = precision_at_k(base.index(), tests, &base.labels_map(), horizon)?;
    let mut entries: Vec<DifficultyEntry<S>> = report
        .per_query
        .into_iter()
        .map(|q| DifficultyEntry {
            case_id: q.case_id,
            precision: q.precision,
            top1_score: q.top1_score,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.precision
            .partial_cmp(&a.precision)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                b.top1_score
                    .partial_cmp(&a.top1_score)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
    Ok(DifficultyRanking { entries })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedDemo {
    pub demo_id: String,
    pub flag: Flag,
}

/// Demonstration assignment for every test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlan {
    /// Requested Precision@1; absent for explicit pattern plans.
    pub target_p1: Option<f64>,
    pub n_shots: usize,
    pub assignments: BTreeMap<String, Vec<PlannedDemo>>,
}

impl SimPlan {
    /// Fraction of test cases whose slot-1 demonstration is flagged `T`.
    pub fn realized_p1(&self) -> f64 {
        if self.assignments.is_empty() {
            return 0.0;
        }
        let t = self
            .assignments
            .values()
            .filter(|demos| demos.first().is_some_and(|d| d.flag.is_true()))
            .count();
        t as f64 / self.assignments.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Content hash of the serialized plan.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("plan serializes"))
    }
}

/// Flags for slots `2..=n` of a simulated plan.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SlotRule {
    /// Every slot repeats the slot-1 flag.
    #[default]
    SameAsFirst,
    /// Explicit flags for slots 2..=n.
    Fixed(Vec<Flag>),
}

/// Greedy choice: for each flag, the highest-ranked unused training case of
/// the required charge class.
fn pick_demos<S: Scalar>(
    base: &CaseBase<S>,
    query: &Case,
    flags: &[Flag],
) -> Result<Vec<PlannedDemo>> {
    let ranking = base.rank_all(&query.fact);
    let mut used = HashSet::new();
    let mut demos = Vec::with_capacity(flags.len());
    for (slot, &flag) in flags.iter().enumerate() {
        let found = ranking.iter().find(|h| {
            !used.contains(&h.doc) && Flag::from_match(base.label(h) == query.charge) == flag
        });
        let Some(hit) = found else {
            return Err(Error::MissingSimilarCase {
                query: query.id.clone(),
                wanted: if flag.is_true() {
                    "same-charge"
                } else {
                    "different-charge"
                },
                slot: slot + 1,
            });
        };
        used.insert(hit.doc);
        demos.push(PlannedDemo {
            demo_id: hit.doc_id.clone(),
            flag,
        });
    }
    Ok(demos)
}

/// Simulates a retriever whose Precision@1 is `target_p1`.
pub fn simulate<S: Scalar>(
    base: &CaseBase<S>,
    tests: &[Case],
    ranking: &DifficultyRanking<S>,
    target_p1: f64,
    n_shots: usize,
    rest: &SlotRule,
) -> Result<SimPlan> {
    if !(0.0..=1.0).contains(&target_p1) {
        return Err(Error::InvalidParameter(format!(
            "target Precision@1 {target_p1} outside [0, 1]"
        )));
    }
    if n_shots == 0 {
        return Err(Error::InvalidParameter("n_shots must be >= 1".into()));
    }
    if let SlotRule::Fixed(flags) = rest {
        if flags.len() != n_shots - 1 {
            return Err(Error::InvalidParameter(format!(
                "{} slot flags given for {} remaining slots",
                flags.len(),
                n_shots - 1
            )));
        }
    }
    let position: HashMap<&str, usize> = ranking.ids().enumerate().map(|(i, id)| (id, i)).collect();
    for c in tests {
        if !position.contains_key(c.id.as_str()) {
            return Err(Error::InvalidParameter(format!(
                "case `{}` missing from difficulty ranking",
                c.id
            )));
        }
    }
    let n_true = ceil_count(target_p1, tests.len());

    let mut ordered: Vec<&Case> = tests.iter().collect();
    ordered.sort_by_key(|c| position[c.id.as_str()]);

    let mut assignments = BTreeMap::new();
    for (i, case) in ordered.into_iter().enumerate() {
        let first = Flag::from_match(i < n_true);
        let mut flags = vec![first];
        match rest {
            SlotRule::SameAsFirst => flags.extend(std::iter::repeat_n(first, n_shots - 1)),
            SlotRule::Fixed(more) => flags.extend_from_slice(more),
        }
        assignments.insert(case.id.clone(), pick_demos(base, case, &flags)?);
    }
    Ok(SimPlan {
        target_p1: Some(target_p1),
        n_shots,
        assignments,
    })
}

/// Gives every test case demonstrations matching `pattern` exactly.
pub fn plan_combination<S: Scalar>(
    base: &CaseBase<S>,
    tests: &[Case],
    pattern: &Pattern,
) -> Result<SimPlan> {
    if !(1..=4).contains(&pattern.len()) {
        return Err(Error::InvalidParameter(format!(
            "pattern length {} outside 1..=4",
            pattern.len()
        )));
    }
    let mut assignments = BTreeMap::new();
    for case in tests {
        assignments.insert(case.id.clone(), pick_demos(base, case, pattern.flags())?);
    }
    Ok(SimPlan {
        target_p1: None,
        n_shots: pattern.len(),
        assignments,
    })
}

/// Majority label of `hits`; ties go to the larger summed score, then to the
/// label seen first.
pub fn majority_label<S: Scalar>(base: &CaseBase<S>, hits: &[RankedHit<S>]) -> Option<String> {
    let mut tally: Vec<(&str, usize, S)> = Vec::new();
    for h in hits {
        let label = base.label(h);
        match tally.iter_mut().find(|(l, _, _)| *l == label) {
            Some(entry) => {
                entry.1 += 1;
                entry.2 = entry.2 + h.score;
            }
            None => tally.push((label, 1, h.score)),
        }
    }
    let mut best: Option<(&str, usize, S)> = None;
    for entry in tally {
        let better = match best {
            None => true,
            Some((_, count, sum)) => entry.1 > count || (entry.1 == count && entry.2 > sum),
        };
        if better {
            best = Some(entry);
        }
    }
    best.map(|(l, _, _)| l.to_owned())
}

/// Majority vote over the top-`k` BM25 neighbours of `query`.
pub fn knn_predict<S: Scalar>(base: &CaseBase<S>, query: &Case, k: usize) -> Result<String> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let hits = base.retrieve(&query.fact, k);
    majority_label(base, &hits).ok_or(Error::EmptyIndex)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnTuning {
    pub best_k: usize,
    /// Validation accuracy for each candidate `k`, in the order given.
    pub accuracy_by_k: Vec<(usize, f64)>,
}

/// Picks the `k` with the best validation accuracy, preferring smaller `k`.
pub fn tune_k<S: Scalar>(
    base: &CaseBase<S>,
    validation: &[Case],
    k_range: &[usize],
) -> Result<KnnTuning> {
    if k_range.is_empty() {
        return Err(Error::EmptyInput("k range"));
    }
    if k_range.contains(&0) {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation cases"));
    }
    let max_k = *k_range.iter().max().unwrap();
    let rankings: Vec<Vec<RankedHit<S>>> = validation
        .iter()
        .map(|c| base.retrieve(&c.fact, max_k))
        .collect();
    let mut accuracy_by_k = Vec::with_capacity(k_range.len());
    let mut best: Option<(usize, f64)> = None;
    for &k in k_range {
        let correct = validation
            .iter()
            .zip(&rankings)
            .filter(|(c, hits)| {
                let top = &hits[..k.min(hits.len())];
                majority_label(base, top).as_deref() == Some(c.charge.as_str())
            })
            .count();
        let acc = correct as f64 / validation.len() as f64;
        accuracy_by_k.push((k, acc));
        best = match best {
            Some((bk, ba)) if ba > acc || (ba == acc && bk <= k) => Some((bk, ba)),
            _ => Some((k, acc)),
        };
    }
    Ok(KnnTuning {
        best_k: best.unwrap().0,
        accuracy_by_k,
    })
}

/// Accuracy of a classifier that copies the charge of each query's slot-1
/// demonstration.
pub fn slot1_accuracy<S: Scalar>(base: &CaseBase<S>, tests: &[Case], plan: &SimPlan) -> f64 {
    if tests.is_empty() {
        return 0.0;
    }
    let correct = tests
        .iter()
        .filter(|c| {
            plan.assignments
                .get(&c.id)
                .and_then(|d| d.first())
                .and_then(|d| base.case_by_id(&d.demo_id))
                .is_some_and(|demo| demo.charge == c.charge)
        })
        .count();
    correct as f64 / tests.len() as f64
}
