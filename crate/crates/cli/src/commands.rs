//! Subcommand implementations. Each returns a serializable report that the
//! binary prints as JSON.

use std::collections::BTreeMap;
use std::fs;

use caseprompt_core::bm25::precision_at_k;
use caseprompt_core::corpus::Case;
use caseprompt_core::evaluation::{
    heatmap, split_easy_hard, verification_metrics, write_bundle, GroupAccuracy, HeatmapCell,
    ResultsFile, RunResult, VerificationMetrics, VerificationOutcome, BUNDLE_FILES,
};
use caseprompt_core::prompting::{
    demos_from_plan, fixed_demo_runs, inject_gold, render, select_demonstrations,
    verification_charges, verification_prompt, DemoSource, Demonstration, TaskSetting,
};
use caseprompt_core::retrieval_lab::{
    knn_predict, plan_combination, rank_by_difficulty, simulate, slot1_accuracy, tune_k, Pattern,
    SimPlan, SlotRule,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::{Experiment, GenStats, IndexInfo, SplitSummary};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleReport {
    pub run_dir: String,
    pub split: SplitSummary,
}

pub fn cmd_sample(config: ExperimentConfig) -> Result<SampleReport> {
    let exp = Experiment::prepare(config)?;
    exp.write_splits()?;
    exp.finish("sample")?;
    Ok(SampleReport {
        run_dir: exp.run_dir.display().to_string(),
        split: exp.data.summary.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexReport {
    pub index: IndexInfo,
    pub cache_hit: bool,
    pub manifest: String,
}

pub fn cmd_index(config: ExperimentConfig) -> Result<IndexReport> {
    let mut exp = Experiment::prepare(config)?;
    exp.write_splits()?;
    let cache_hit = exp.ensure_index()?;
    let manifest = exp.finish("index")?;
    Ok(IndexReport {
        index: exp.index_info().cloned().expect("index prepared"),
        cache_hit,
        manifest: manifest.display().to_string(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLine {
    pub run_id: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_consistency: f64,
    pub n_cases: usize,
    pub n_failed: usize,
    pub n_unparsed: usize,
}

impl From<&RunResult> for RunLine {
    fn from(r: &RunResult) -> Self {
        RunLine {
            run_id: r.run_id.clone(),
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            mean_consistency: r.mean_consistency,
            n_cases: r.n_cases,
            n_failed: r.n_failed,
            n_unparsed: r.n_unparsed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run_dir: String,
    pub runs: Vec<RunLine>,
    pub generation: GenStats,
}

fn settings_matrix(cfg: &ExperimentConfig) -> Result<Vec<TaskSetting>> {
    let mut out = Vec::new();
    for &form in &cfg.settings.question_forms {
        for &shots in &cfg.settings.shots {
            if shots == 0 {
                out.push(TaskSetting::new(form, 0, DemoSource::Retrieved)?);
                continue;
            }
            for &source in &cfg.settings.demo_sources {
                out.push(TaskSetting::new(form, shots, source)?);
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

impl Experiment {
    /// Prompt for one test case; `candidates_with_gold` appends the gold
    /// charge to the candidate list.
    fn prompt_for(
        &self,
        setting: &TaskSetting,
        case: &Case,
        demos: Option<&[Demonstration]>,
        candidates_with_gold: bool,
    ) -> caseprompt_core::Result<String> {
        let r = self.retrieved(&case.id);
        let candidates = if candidates_with_gold {
            inject_gold(&r.candidates, &case.charge)
        } else {
            r.candidates.clone()
        };
        let mc = setting.is_multi_choice().then_some(&candidates);
        let owned;
        let demos = match demos {
            Some(d) => d,
            None if setting.n_shots == 0 => &[][..],
            None => {
                owned =
                    select_demonstrations(&r.hits, self.base(), setting.n_shots, mc, &self.trunc)?;
                &owned[..]
            }
        };
        render(
            &self.template,
            setting,
            &self.trunc.query(&case.fact),
            demos,
            mc,
        )
    }

    fn add_groups(&self, run: &mut RunResult) -> Result<()> {
        let ids: Vec<String> = self.data.test.iter().map(|c| c.id.clone()).collect();
        let lists: Vec<_> = self
            .data
            .test
            .iter()
            .map(|c| self.retrieved(&c.id).candidates.clone())
            .collect();
        let split = split_easy_hard(&self.data.test, &lists)?;
        run.add_group("all", &ids, &self.gold);
        run.add_group("easy", &split.easy, &self.gold);
        run.add_group("hard", &split.hard, &self.gold);
        Ok(())
    }

    fn hard_cases(&self) -> Vec<Case> {
        self.data
            .test
            .iter()
            .filter(|c| self.retrieved(&c.id).candidates.contains_gold == Some(false))
            .cloned()
            .collect()
    }

    fn run_setting(&self, setting: TaskSetting) -> Result<Vec<RunResult>> {
        let name = setting.to_string();
        let mut runs = Vec::new();
        match setting.demo_source {
            DemoSource::Fixed => {
                let sets = fixed_demo_runs(&self.data.fixed_pool, setting.n_shots, &self.trunc)?;
                let many = sets.len() > 1;
                for (i, demos) in sets.iter().enumerate() {
                    let run_id = if many {
                        format!("{name}-pool{i}")
                    } else {
                        name.clone()
                    };
                    let mut meta = self.metadata("fixed_pool_order");
                    meta.fixed_run = many.then_some(i);
                    let mut run = self.run_cases(&run_id, setting, &self.data.test, meta, |c| {
                        self.prompt_for(&setting, c, Some(demos), false)
                    })?;
                    self.add_groups(&mut run)?;
                    runs.push(run);
                }
            }
            _ => {
                let meta = self.metadata("most_similar_first");
                let mut run =
                    self.run_cases(&name, setting, &self.data.test, meta.clone(), |c| {
                        self.prompt_for(&setting, c, None, false)
                    })?;
                self.add_groups(&mut run)?;
                if setting.is_multi_choice() && self.config.prompt.hard_with_gold {
                    let hard = self.hard_cases();
                    if !hard.is_empty() {
                        let id = format!("{name}-hard-gt");
                        let mut gt = self.run_cases(&id, setting, &hard, meta, |c| {
                            self.prompt_for(&setting, c, None, true)
                        })?;
                        gt.subset = Some("hard_gt".into());
                        run.groups.push(GroupAccuracy {
                            group: "hard_gt".into(),
                            n: gt.n_cases,
                            accuracy: gt.accuracy,
                        });
                        runs.push(gt);
                    }
                }
                runs.push(run);
            }
        }
        Ok(runs)
    }

    fn write_predictions(&self, rel: &str, runs: &[RunResult]) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            run_id: &'a str,
            #[serde(flatten)]
            record: &'a caseprompt_core::inference::PredictionRecord,
        }
        let mut sorted: Vec<&RunResult> = runs.iter().collect();
        sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        let mut out = Vec::new();
        for r in sorted {
            for p in &r.predictions {
                serde_json::to_writer(
                    &mut out,
                    &Line {
                        run_id: &r.run_id,
                        record: p,
                    },
                )
                .map_err(caseprompt_core::Error::from)?;
                out.push(b'\n');
            }
        }
        self.write(rel, &out)?;
        Ok(())
    }

    fn write_bundle_at(
        &self,
        sub: &str,
        runs: &[RunResult],
        cells: &[HeatmapCell<f64>],
    ) -> Result<()> {
        let dir = self.run_dir.join(sub);
        for p in write_bundle(&dir, runs, cells)? {
            self.record(&p);
        }
        let prefix = if sub.is_empty() {
            String::new()
        } else {
            format!("{sub}/")
        };
        self.write_predictions(&format!("{prefix}predictions.jsonl"), runs)
    }
}

fn ready(config: ExperimentConfig) -> Result<Experiment> {
    let mut exp = Experiment::prepare(config)?;
    exp.write_splits()?;
    exp.ensure_retrieval()?;
    exp.ensure_gateway()?;
    Ok(exp)
}

pub fn cmd_run(config: ExperimentConfig) -> Result<RunReport> {
    let settings = settings_matrix(&config)?;
    let exp = ready(config)?;
    let mut runs = Vec::new();
    for s in settings {
        runs.extend(exp.run_setting(s)?);
    }
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    exp.write_bundle_at("", &runs, &[])?;
    exp.finish("run")?;
    Ok(RunReport {
        run_dir: exp.run_dir.display().to_string(),
        runs: runs.iter().map(RunLine::from).collect(),
        generation: exp.stats(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub target_p1: f64,
    pub realized_p1: f64,
    pub llm_accuracy: f64,
    /// 1-NN over the simulated retrieval: the IR system alone.
    pub knn_accuracy: f64,
    pub run_id: String,
    pub plan_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: u32,
    pub points: Vec<SweepPoint>,
    /// Smallest target at which the IR system alone beats LLM + IR.
    pub crossover_p1: Option<f64>,
    pub heatmap: Vec<HeatmapCell<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub run_dir: String,
    pub sweep: SweepReport,
    pub generation: GenStats,
}

fn fmt_target(t: f64) -> String {
    format!("{t:.3}")
}

impl Experiment {
    fn run_plan(&self, run_id: &str, setting: TaskSetting, plan: &SimPlan) -> Result<RunResult> {
        self.write(&format!("plans/{run_id}.json"), plan.to_json().as_bytes())?;
        let mut meta = self.metadata("plan_slot_order");
        meta.plan_hash = Some(plan.hash());
        meta.target_p1 = plan.target_p1;
        let base = self.base();
        let mut run = self.run_cases(run_id, setting, &self.data.test, meta, |c| {
            let planned = plan
                .assignments
                .get(&c.id)
                .ok_or_else(|| caseprompt_core::Error::UnknownDocument(c.id.clone()))?;
            let demos = demos_from_plan(planned, base, &self.trunc)?;
            self.prompt_for(&setting, c, Some(&demos), false)
        })?;
        self.add_groups(&mut run)?;
        Ok(run)
    }
}

pub fn cmd_simulate(config: ExperimentConfig) -> Result<SimulateReport> {
    if config.simulation.targets.is_empty() && config.simulation.patterns.is_empty() {
        return Err(CliError::Config("simulation.targets is empty".into()));
    }
    let sim = config.simulation.clone();
    let exp = ready(config)?;
    let base = exp.base();
    let ranking = rank_by_difficulty(base, &exp.data.test)?;
    exp.write_json("simulate/difficulty.json", &ranking)?;
    let form = sim.question_form;
    let mut runs = Vec::new();
    let mut points = Vec::new();
    for &t in &sim.targets {
        let plan = simulate(
            base,
            &exp.data.test,
            &ranking,
            t,
            sim.shots,
            &SlotRule::SameAsFirst,
        )?;
        let setting = TaskSetting::new(form, sim.shots, DemoSource::Simulated)?;
        let run_id = format!("sim-p1-{}-{setting}", fmt_target(t));
        let run = exp.run_plan(&run_id, setting, &plan)?;
        points.push(SweepPoint {
            target_p1: t,
            realized_p1: plan.realized_p1(),
            llm_accuracy: run.accuracy,
            knn_accuracy: slot1_accuracy(base, &exp.data.test, &plan),
            run_id,
            plan_hash: plan.hash(),
        });
        runs.push(run);
    }
    let crossover_p1 = points
        .iter()
        .find(|p| p.knn_accuracy > p.llm_accuracy)
        .map(|p| p.target_p1);

    let mut accuracies = BTreeMap::new();
    for pattern in &sim.patterns {
        let run = if pattern.is_empty() {
            let setting = TaskSetting::new(form, 0, DemoSource::Retrieved)?;
            let id = format!("pattern---{setting}");
            let mut r = exp.run_cases(&id, setting, &exp.data.test, exp.metadata("none"), |c| {
                exp.prompt_for(&setting, c, None, false)
            })?;
            r.metadata.pattern = Some(Pattern::empty());
            r
        } else {
            let plan = plan_combination(base, &exp.data.test, pattern)?;
            let setting = TaskSetting::new(form, pattern.len(), DemoSource::Simulated)?;
            let mut r = exp.run_plan(&format!("pattern-{pattern}-{setting}"), setting, &plan)?;
            r.metadata.pattern = Some(pattern.clone());
            r
        };
        accuracies.insert(pattern.clone(), run.accuracy);
        runs.push(run);
    }
    let cells = if accuracies.is_empty() {
        Vec::new()
    } else {
        heatmap(&accuracies)?
    };
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    exp.write_bundle_at("simulate", &runs, &cells)?;
    let sweep = SweepReport {
        format_version: 1,
        points,
        crossover_p1,
        heatmap: cells,
    };
    exp.write_json("simulate/sweep.json", &sweep)?;
    exp.finish("simulate")?;
    Ok(SimulateReport {
        run_dir: exp.run_dir.display().to_string(),
        sweep,
        generation: exp.stats(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub format_version: u32,
    pub precision_at_1: f64,
    pub precision_at_10: f64,
    pub best_k: usize,
    pub validation_accuracy_by_k: Vec<(usize, f64)>,
    pub test_accuracy: f64,
    pub n_test: usize,
    pub n_validation: usize,
}

pub fn cmd_knn(config: ExperimentConfig) -> Result<KnnReport> {
    let k_range = config.knn.k_range.clone();
    let mut exp = Experiment::prepare(config)?;
    if exp.data.validation.is_empty() {
        return Err(CliError::Config(
            "kNN tuning needs a validation split".into(),
        ));
    }
    exp.write_splits()?;
    exp.ensure_index()?;
    let base = exp.base();
    let labels = base.labels_map();
    let p1 = precision_at_k(base.index(), &exp.data.test, &labels, 1)?;
    let p10 = precision_at_k(base.index(), &exp.data.test, &labels, 10)?;
    let tuning = tune_k(base, &exp.data.validation, &k_range)?;
    let correct = exp
        .data
        .test
        .iter()
        .map(|c| knn_predict(base, c, tuning.best_k).map(|l| l == c.charge))
        .collect::<caseprompt_core::Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&b| b)
        .count();
    let report = KnnReport {
        format_version: 1,
        precision_at_1: p1.top1,
        precision_at_10: p10.mean_at_k,
        best_k: tuning.best_k,
        validation_accuracy_by_k: tuning.accuracy_by_k,
        test_accuracy: correct as f64 / exp.data.test.len() as f64,
        n_test: exp.data.test.len(),
        n_validation: exp.data.validation.len(),
    };
    exp.write_json("knn.json", &report)?;
    exp.finish("knn")?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub run_dir: String,
    pub metrics: VerificationMetrics<f64>,
    pub failed: usize,
    pub generation: GenStats,
}

pub fn cmd_verify(config: ExperimentConfig) -> Result<VerifyReport> {
    let exp = ready(config)?;
    let mut jobs = Vec::new();
    let mut asked: Vec<(String, String, bool)> = Vec::new();
    for case in &exp.data.test {
        let cands = &exp.retrieved(&case.id).candidates;
        if cands.labels.is_empty() {
            return Err(CliError::Usage(format!(
                "case `{}` has no candidates",
                case.id
            )));
        }
        let fact = exp.trunc.query(&case.fact);
        for (i, charge) in verification_charges(cands, &case.charge)
            .into_iter()
            .enumerate()
        {
            let prompt = verification_prompt(&exp.template, &fact, &charge)?;
            let file = format!("{}-{i}", Experiment::case_file(&case.id));
            jobs.push(exp.job(case, file, prompt, Some(charge.clone())));
            asked.push((case.id.clone(), charge.clone(), charge == case.charge));
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Usage("no verification questions".into()));
    }
    let markers = &exp.config.inference.markers;
    let mut outcomes = Vec::new();
    let mut failed = 0;
    for (out, (case_id, charge, is_gold)) in exp.generate("verify", jobs)?.into_iter().zip(asked) {
        match out.samples {
            Ok(samples) => outcomes.push(VerificationOutcome {
                case_id,
                charge,
                verdict: markers.parse(&samples),
                is_gold,
            }),
            Err(_) => failed += 1,
        }
    }
    let metrics = verification_metrics::<f64>(&outcomes);
    let mut lines = Vec::new();
    for o in &outcomes {
        serde_json::to_writer(&mut lines, o).map_err(caseprompt_core::Error::from)?;
        lines.push(b'\n');
    }
    exp.write("verify/outcomes.jsonl", &lines)?;
    exp.write_json("verify/metrics.json", &metrics)?;
    exp.finish("verify")?;
    Ok(VerifyReport {
        run_dir: exp.run_dir.display().to_string(),
        metrics,
        failed,
        generation: exp.stats(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub bundles: Vec<String>,
    pub runs: Vec<RunLine>,
}

/// Rewrites the CSV files of every bundle from its results.json.
pub fn cmd_report(config: ExperimentConfig) -> Result<ReportSummary> {
    let run_dir = config.run_dir();
    let mut bundles = Vec::new();
    let mut lines = Vec::new();
    for sub in ["", "simulate"] {
        let dir = run_dir.join(sub);
        let path = dir.join(BUNDLE_FILES[0]);
        let Ok(bytes) = fs::read(&path) else { continue };
        let results: ResultsFile =
            serde_json::from_slice(&bytes).map_err(|e| caseprompt_core::Error::Artifact {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let written = write_bundle(&dir, &results.runs, &results.heatmap)?;
        debug_assert_eq!(written.len(), BUNDLE_FILES.len());
        lines.extend(results.runs.iter().map(RunLine::from));
        bundles.push(dir.display().to_string());
    }
    if bundles.is_empty() {
        return Err(CliError::Usage(format!(
            "no results.json under {}",
            run_dir.display()
        )));
    }
    Ok(ReportSummary {
        bundles,
        runs: lines,
    })
}
