//! Metrics, grouping and report bundles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Case, LabelSet};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::inference::{Prediction, PredictionRecord, Verdict};
use crate::prompting::{CandidateList, DemoSource, QuestionForm, TaskSetting};
use crate::retrieval_lab::{Flag, Pattern};
use crate::scalar::Scalar;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// A prediction paired with its gold charge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scored {
    pub predicted: Option<String>,
    pub gold: String,
}

impl Scored {
    pub fn new(predicted: Option<&str>, gold: &str) -> Self {
        Scored {
            predicted: predicted.map(str::to_owned),
            gold: gold.to_owned(),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.gold.as_str())
    }
}

/// Pairs predictions with gold labels; every prediction needs one.
pub fn pair_with_gold<S: Scalar>(
    predictions: &[Prediction<S>],
    gold: &HashMap<String, String>,
) -> Result<Vec<Scored>> {
    predictions
        .iter()
        .map(|p| {
            let g = gold
                .get(&p.case_id)
                .ok_or_else(|| Error::UnknownDocument(p.case_id.clone()))?;
            Ok(Scored::new(p.label.as_deref(), g))
        })
        .collect()
}

fn ratio<S: Scalar>(num: usize, den: usize) -> S {
    if den == 0 {
        S::zero()
    } else {
        S::from_count(num) / S::from_count(den)
    }
}

/// Fraction of exact matches. Unparsed predictions never match.
pub fn accuracy<S: Scalar>(scored: &[Scored]) -> Result<S> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    Ok(ratio(
        scored.iter().filter(|s| s.is_correct()).count(),
        scored.len(),
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// Every label of the label set.
    #[default]
    FullLabelSet,
    /// Labels occurring as gold or prediction in the slice.
    PresentLabels,
}

/// Per-label F1, with F1 = 0 when precision + recall = 0.
pub fn per_label_f1<S: Scalar>(scored: &[Scored], labels: &[&str]) -> Vec<S> {
    let two = S::lit(2.0);
    labels
        .iter()
        .map(|&l| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for s in scored {
                let pred = s.predicted.as_deref() == Some(l);
                let gold = s.gold == l;
                match (pred, gold) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let den = 2 * tp + fp + fneg;
            if tp == 0 {
                S::zero()
            } else {
                two * S::from_count(tp) / S::from_count(den)
            }
        })
        .collect()
}

/// Unweighted mean of per-label F1. Unparsed is never a class.
pub fn macro_f1<S: Scalar>(
    scored: &[Scored],
    label_set: &LabelSet,
    average: F1Average,
) -> Result<S> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if let Some(s) = scored.iter().find(|s| !label_set.contains(&s.gold)) {
        return Err(Error::InvalidParameter(format!(
            "gold label `{}` not in label set",
            s.gold
        )));
    }
    let labels: Vec<&str> = match average {
        F1Average::FullLabelSet => label_set.iter().collect(),
        F1Average::PresentLabels => {
            let present: BTreeSet<&str> = scored
                .iter()
                .flat_map(|s| std::iter::once(s.gold.as_str()).chain(s.predicted.as_deref()))
                .collect();
            label_set.iter().filter(|l| present.contains(l)).collect()
        }
    };
    let f1 = per_label_f1::<S>(scored, &labels);
    let total = f1.iter().fold(S::zero(), |a, &b| a + b);
    Ok(total / S::from_count(labels.len()))
}

/// Test cases whose gold charge is in / absent from their candidate list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EasyHard {
    pub easy: Vec<String>,
    pub hard: Vec<String>,
}

pub fn split_easy_hard(cases: &[Case], candidate_lists: &[CandidateList]) -> Result<EasyHard> {
    if cases.len() != candidate_lists.len() {
        return Err(Error::InvalidParameter(format!(
            "{} cases but {} candidate lists",
            cases.len(),
            candidate_lists.len()
        )));
    }
    let mut out = EasyHard::default();
    for (case, cands) in cases.iter().zip(candidate_lists) {
        let has_gold = cands
            .contains_gold
            .unwrap_or_else(|| cands.contains(&case.charge));
        if has_gold {
            out.easy.push(case.id.clone());
        } else {
            out.hard.push(case.id.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell<S> {
    pub existing: Pattern,
    pub added: Flag,
    /// Accuracy change in percentage points.
    pub delta: S,
    pub acc_existing: S,
    pub acc_extended: S,
}

/// One cell for every pattern longer than the shortest one present; the
/// added demonstration is the last slot. Accuracies are fractions.
pub fn heatmap<S: Scalar>(accuracies: &BTreeMap<Pattern, S>) -> Result<Vec<HeatmapCell<S>>> {
    let Some(min_len) = accuracies.keys().map(Pattern::len).min() else {
        return Err(Error::EmptyInput("heatmap results"));
    };
    let hundred = S::lit(100.0);
    let mut cells = Vec::new();
    for (pattern, &acc) in accuracies.iter().filter(|(p, _)| p.len() > min_len) {
        let flags = pattern.flags();
        let existing = Pattern(flags[..flags.len() - 1].to_vec());
        let &base = accuracies
            .get(&existing)
            .ok_or_else(|| Error::MissingPattern(existing.to_string()))?;
        cells.push(HeatmapCell {
            added: flags[flags.len() - 1],
            delta: (acc - base) * hundred,
            acc_existing: base,
            acc_extended: acc,
            existing,
        });
    }
    cells.sort_by(|a, b| {
        (a.existing.len(), &a.existing, a.added).cmp(&(b.existing.len(), &b.existing, b.added))
    });
    Ok(cells)
}

/// One yes/no question about a (case, charge) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub case_id: String,
    pub charge: String,
    pub verdict: Verdict,
    pub is_gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics<S> {
    /// Fraction of gold charges answered yes.
    pub detection_recall: S,
    /// Fraction of yes answers whose charge is gold.
    pub detection_precision: S,
    pub n_queries: usize,
    pub n_gold: usize,
    pub n_yes: usize,
    pub n_unparsed: usize,
}

pub fn verification_metrics<S: Scalar>(outcomes: &[VerificationOutcome]) -> VerificationMetrics<S> {
    let yes = |o: &&VerificationOutcome| o.verdict == Verdict::Yes;
    let n_gold = outcomes.iter().filter(|o| o.is_gold).count();
    let n_yes = outcomes.iter().filter(yes).count();
    let both = outcomes.iter().filter(|o| o.is_gold).filter(yes).count();
    VerificationMetrics {
        detection_recall: ratio(both, n_gold),
        detection_precision: ratio(both, n_yes),
        n_queries: outcomes.len(),
        n_gold,
        n_yes,
        n_unparsed: outcomes
            .iter()
            .filter(|o| o.verdict == Verdict::Unparsed)
            .count(),
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub seed: u64,
    pub template_hash: String,
    pub provider_id: String,
    pub model_id: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub candidate_pool_size: usize,
    pub demo_order: String,
    pub plan_hash: Option<String>,
    pub target_p1: Option<f64>,
    pub pattern: Option<Pattern>,
    /// Index of the pool case used for fixed one-shot runs.
    pub fixed_run: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub n: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub setting: TaskSetting,
    /// Name of the case subset when the run does not cover the full test
    /// set; such runs stay out of the summary grid.
    #[serde(default)]
    pub subset: Option<String>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_consistency: f64,
    pub n_cases: usize,
    pub n_unparsed: usize,
    /// Cases whose generation failed; excluded from the metrics.
    pub n_failed: usize,
    pub groups: Vec<GroupAccuracy>,
    pub metadata: RunMetadata,
    pub failures: Vec<CaseFailure>,
    pub predictions: Vec<PredictionRecord>,
}

impl RunResult {
    /// Aggregates predictions after sorting them by case id.
    #[allow(clippy::too_many_arguments)]
    pub fn from_predictions(
        run_id: impl Into<String>,
        setting: TaskSetting,
        mut predictions: Vec<Prediction<f64>>,
        gold: &HashMap<String, String>,
        labels: &LabelSet,
        average: F1Average,
        mut failures: Vec<CaseFailure>,
        metadata: RunMetadata,
    ) -> Result<Self> {
        predictions.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        failures.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let scored = pair_with_gold(&predictions, gold)?;
        let (accuracy, macro_f1, mean_consistency) = if scored.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let c: usize = predictions.iter().map(|p| p.consistency).sum();
            (
                accuracy(&scored)?,
                macro_f1(&scored, labels, average)?,
                c as f64 / predictions.len() as f64,
            )
        };
        Ok(RunResult {
            run_id: run_id.into(),
            setting,
            subset: None,
            accuracy,
            macro_f1,
            mean_consistency,
            n_cases: predictions.len(),
            n_unparsed: predictions.iter().filter(|p| p.is_unparsed()).count(),
            n_failed: failures.len(),
            groups: Vec::new(),
            metadata,
            failures,
            predictions: predictions.iter().map(|p| p.to_record(labels)).collect(),
        })
    }

    pub fn scored(&self, gold: &HashMap<String, String>) -> Vec<Scored> {
        self.predictions
            .iter()
            .filter_map(|p| {
                gold.get(&p.case_id)
                    .map(|g| Scored::new(p.label.as_deref(), g))
            })
            .collect()
    }

    /// Adds accuracy over each named subset of case ids.
    pub fn add_group(&mut self, name: &str, ids: &[String], gold: &HashMap<String, String>) {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let scored: Vec<Scored> = self
            .predictions
            .iter()
            .filter(|p| wanted.contains(p.case_id.as_str()))
            .filter_map(|p| {
                gold.get(&p.case_id)
                    .map(|g| Scored::new(p.label.as_deref(), g))
            })
            .collect();
        self.groups.push(GroupAccuracy {
            group: name.to_owned(),
            n: scored.len(),
            accuracy: accuracy::<f64>(&scored).unwrap_or(0.0),
        });
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Artifact {
        path: PathBuf::from("<csv>"),
        message: e.to_string(),
    };
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Artifact {
        path: PathBuf::from("<csv>"),
        message: e.to_string(),
    })
}

const SHOTS: [usize; 5] = [0, 1, 2, 3, 4];

/// Metric × (question form, demo source) × shots grid. Runs sharing a
/// setting are averaged; zero-shot runs fill column 0 of every source.
pub fn summary_csv(runs: &[RunResult]) -> Result<Vec<u8>> {
    let mut by_setting: BTreeMap<TaskSetting, Vec<&RunResult>> = BTreeMap::new();
    for r in runs
        .iter()
        .filter(|r| r.subset.is_none() && r.setting.demo_source != DemoSource::Simulated)
    {
        by_setting.entry(r.setting).or_default().push(r);
    }
    let mut rows_keys: BTreeSet<(QuestionForm, DemoSource)> = BTreeSet::new();
    for s in by_setting.keys() {
        let zero_only = s.n_shots == 0
            && by_setting
                .keys()
                .any(|o| o.question_form == s.question_form && o.n_shots > 0);
        if !zero_only {
            rows_keys.insert((s.question_form, s.demo_source));
        }
    }
    type Metric = (&'static str, fn(&RunResult) -> f64);
    let metrics: [Metric; 3] = [
        ("accuracy", |r| r.accuracy),
        ("macro_f1", |r| r.macro_f1),
        ("mean_consistency", |r| r.mean_consistency),
    ];
    let mut rows = Vec::new();
    for (name, get) in metrics {
        for &(form, source) in &rows_keys {
            let mut row = vec![
                REPORT_FORMAT_VERSION.to_string(),
                name.to_owned(),
                enum_name(&form),
                enum_name(&source),
            ];
            for shots in SHOTS {
                let key = TaskSetting {
                    question_form: form,
                    n_shots: shots,
                    demo_source: if shots == 0 {
                        DemoSource::Retrieved
                    } else {
                        source
                    },
                };
                row.push(match by_setting.get(&key) {
                    Some(rs) => {
                        (rs.iter().map(|r| get(r)).sum::<f64>() / rs.len() as f64).to_string()
                    }
                    None => String::new(),
                });
            }
            rows.push(row);
        }
    }
    csv_bytes(
        &[
            "version",
            "metric",
            "question_form",
            "demo_source",
            "0shot",
            "1shot",
            "2shot",
            "3shot",
            "4shot",
        ],
        rows,
    )
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub fn heatmap_csv(cells: &[HeatmapCell<f64>]) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "version",
            "existing",
            "added",
            "delta_pp",
            "acc_existing",
            "acc_extended",
        ],
        cells.iter().map(|c| {
            vec![
                REPORT_FORMAT_VERSION.to_string(),
                c.existing.to_string(),
                Pattern(vec![c.added]).to_string(),
                c.delta.to_string(),
                c.acc_existing.to_string(),
                c.acc_extended.to_string(),
            ]
        }),
    )
}

pub fn groups_csv(runs: &[RunResult]) -> Result<Vec<u8>> {
    csv_bytes(
        &["version", "run_id", "setting", "group", "n", "accuracy"],
        runs.iter().flat_map(|r| {
            r.groups.iter().map(move |g| {
                vec![
                    REPORT_FORMAT_VERSION.to_string(),
                    r.run_id.clone(),
                    r.setting.to_string(),
                    g.group.clone(),
                    g.n.to_string(),
                    g.accuracy.to_string(),
                ]
            })
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub format_version: u32,
    pub runs: Vec<RunResult>,
    pub heatmap: Vec<HeatmapCell<f64>>,
}

/// Files of a report bundle, relative to the output directory.
pub const BUNDLE_FILES: [&str; 4] = ["results.json", "summary.csv", "heatmap.csv", "groups.csv"];

/// Writes results.json, summary.csv, heatmap.csv and groups.csv.
pub fn write_bundle(
    dir: &Path,
    runs: &[RunResult],
    heatmap: &[HeatmapCell<f64>],
) -> Result<Vec<PathBuf>> {
    let mut runs = runs.to_vec();
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let results = ResultsFile {
        format_version: REPORT_FORMAT_VERSION,
        runs,
        heatmap: heatmap.to_vec(),
    };
    let mut json = serde_json::to_vec_pretty(&results)?;
    json.push(b'\n');
    let files = [
        (BUNDLE_FILES[0], json),
        (BUNDLE_FILES[1], summary_csv(&results.runs)?),
        (BUNDLE_FILES[2], heatmap_csv(heatmap)?),
        (BUNDLE_FILES[3], groups_csv(&results.runs)?),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}
