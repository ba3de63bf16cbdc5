//! Shared state of one experiment: data splits, index, template, gateway
//! and the run directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use caseprompt_core::bm25::{Bm25Index, Bm25Params};
use caseprompt_core::casebase::CaseBase;
use caseprompt_core::corpus::Scheme;
use caseprompt_core::corpus::{
    ingest_with, write_jsonl, Case, CorpusSplit, IngestOptions, LabelSet, Shortfall, SplitCounts,
};
use caseprompt_core::evaluation::{CaseFailure, RunMetadata, RunResult};
use caseprompt_core::inference::Parser;
use caseprompt_core::llm_gateway::{
    mock_provider, ChatCompletionsProvider, Gateway, GenCache, GenRequest, MockKind, Provider,
    RequestContext, SamplingMode,
};
use caseprompt_core::prompting::{
    make_candidates, CandidateList, PromptTemplate, TaskSetting, Truncation,
};
use caseprompt_core::{sha256_hex, write_atomic, Hit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MockName, ProviderConfig};
use crate::error::{CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub sampled: bool,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub labels: usize,
    pub per_label_counts: BTreeMap<String, SplitCounts>,
    pub shortfalls: Vec<Shortfall>,
}

/// Corpus splits and the label space.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<Case>,
    pub validation: Vec<Case>,
    pub test: Vec<Case>,
    pub labels: LabelSet,
    pub fixed_pool: Vec<Case>,
    pub summary: SplitSummary,
    /// Input file path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl Data {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let opts = IngestOptions {
            drop_multi_charge: cfg.corpus.drop_multi_charge,
        };
        let mut inputs = BTreeMap::new();
        let mut read = |p: &Path| -> Result<Vec<Case>> {
            let bytes = fs::read(p).map_err(|e| caseprompt_core::Error::Io {
                path: p.to_owned(),
                source: e,
            })?;
            inputs.insert(p.display().to_string(), sha256_hex(&bytes));
            Ok(ingest_with(p, cfg.corpus.format, &opts)?)
        };
        let train_pool = read(&cfg.corpus.train)?;
        let test_pool = read(&cfg.corpus.test)?;
        let val_pool = cfg
            .corpus
            .validation
            .as_deref()
            .map(&mut read)
            .transpose()?;

        let labels = LabelSet::from_cases(
            train_pool
                .iter()
                .chain(&test_pool)
                .chain(val_pool.iter().flatten()),
        )?;
        let s = &cfg.sampling;
        let (train, validation, test, per_label_counts, shortfalls) = if s.enabled {
            let split = CorpusSplit::build(
                &train_pool,
                val_pool.as_deref(),
                &test_pool,
                s.quotas,
                s.seed,
            );
            (
                split.train,
                split.validation,
                split.test,
                split.per_label_counts,
                split.shortfalls,
            )
        } else {
            let mut counts: BTreeMap<String, SplitCounts> = BTreeMap::new();
            for c in &train_pool {
                counts.entry(c.charge.clone()).or_default().train += 1;
            }
            for c in val_pool.iter().flatten() {
                counts.entry(c.charge.clone()).or_default().validation += 1;
            }
            for c in &test_pool {
                counts.entry(c.charge.clone()).or_default().test += 1;
            }
            (
                train_pool.clone(),
                val_pool.clone().unwrap_or_default(),
                test_pool.clone(),
                counts,
                Vec::new(),
            )
        };
        let by_id: HashMap<&str, &Case> = train_pool.iter().map(|c| (c.id.as_str(), c)).collect();
        let fixed_pool = cfg
            .settings
            .fixed_pool
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| {
                    CliError::Config(format!("fixed_pool id `{id}` not in the training corpus"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Config(
                "sampling left the train or test split empty".into(),
            ));
        }
        let summary = SplitSummary {
            sampled: s.enabled,
            train: train.len(),
            validation: validation.len(),
            test: test.len(),
            labels: labels.len(),
            per_label_counts,
            shortfalls,
        };
        Ok(Data {
            train,
            validation,
            test,
            labels,
            fixed_pool,
            summary,
            inputs,
        })
    }
}

/// Retrieval results for one query, shared by every setting.
#[derive(Debug, Clone)]
pub struct Retrieved {
    pub hits: Vec<Hit>,
    pub candidates: CandidateList,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenStats {
    pub requests: usize,
    pub cache_hits: usize,
    pub failures: usize,
    pub sequential: usize,
}

/// One generation to perform.
pub struct Job {
    pub case_id: String,
    /// File stem under the prompt and generation directories.
    pub file: String,
    pub prompt: String,
    pub context: RequestContext,
}

pub struct JobOutput {
    pub case_id: String,
    pub samples: std::result::Result<Vec<String>, String>,
}

#[derive(Serialize)]
struct GenerationFile<'a> {
    case_id: &'a str,
    cache_key: &'a str,
    provider_id: &'a str,
    samples: &'a [String],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommandRecord {
    pub artifacts: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub split: SplitSummary,
    pub index: Option<IndexInfo>,
    pub template_hash: String,
    pub provider_id: String,
    pub commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexInfo {
    pub path: String,
    pub corpus_hash: String,
    pub documents: usize,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: Data,
    pub template: PromptTemplate,
    pub trunc: Truncation,
    pub parser: Parser<f64>,
    pub gold: HashMap<String, String>,
    pub run_dir: PathBuf,
    base: Option<CaseBase<f64>>,
    index: Option<IndexInfo>,
    gateway: Option<Gateway>,
    pool: rayon::ThreadPool,
    retrieved: HashMap<String, Retrieved>,
    artifacts: Mutex<BTreeSet<String>>,
    stats: Mutex<GenStats>,
}

pub fn params(cfg: &ExperimentConfig) -> Result<Bm25Params<f64>> {
    Ok(Bm25Params::new(cfg.bm25.k1, cfg.bm25.b)?)
}

fn file_stem(id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean == id && !id.starts_with('.') {
        clean
    } else {
        format!("{clean}-{}", &sha256_hex(id)[..8])
    }
}

impl Experiment {
    /// Loads data, template and provider. Nothing is written yet.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let data = Data::load(&config)?;
        let template = match &config.prompt.template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::builtin(config.prompt.language),
        };
        let trunc = Truncation {
            demo_limit: config.prompt.demo_limit,
            query_limit: config.prompt.query_limit,
            counter: Arc::new(config.bm25.scheme),
        };
        let parser = Parser::new(
            &data.labels,
            params(&config)?,
            config.bm25.scheme,
            config.inference.aggregation,
        )?;
        let gold = data
            .train
            .iter()
            .chain(&data.validation)
            .chain(&data.test)
            .map(|c| (c.id.clone(), c.charge.clone()))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.output.parallelism)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Experiment {
            run_dir: config.run_dir(),
            config,
            data,
            template,
            trunc,
            parser,
            gold,
            base: None,
            index: None,
            gateway: None,
            pool,
            retrieved: HashMap::new(),
            artifacts: Mutex::new(BTreeSet::new()),
            stats: Mutex::new(GenStats::default()),
        })
    }

    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn record(&self, path: &Path) {
        self.artifacts.lock().unwrap().insert(self.rel(path));
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.run_dir.join(rel);
        write_atomic(&path, bytes)?;
        self.record(&path);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(caseprompt_core::Error::from)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Writes the sampled splits.
    pub fn write_splits(&self) -> Result<()> {
        for (name, cases) in [
            ("train", &self.data.train),
            ("validation", &self.data.validation),
            ("test", &self.data.test),
        ] {
            let path = self.run_dir.join("data").join(format!("{name}.jsonl"));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| caseprompt_core::Error::Io {
                    path: dir.to_owned(),
                    source: e,
                })?;
            }
            write_jsonl(&path, cases)?;
            self.record(&path);
        }
        self.write_json("data/split.json", &self.data.summary)?;
        Ok(())
    }

    /// Loads the content-addressed index if present, else builds and saves
    /// it. Returns whether the stored index was reused.
    pub fn ensure_index(&mut self) -> Result<bool> {
        if self.base.is_some() {
            return Ok(true);
        }
        let params = params(&self.config)?;
        let scheme: Scheme = self.config.bm25.scheme;
        let hash = caseprompt_core::bm25::corpus_hash(
            self.data
                .train
                .iter()
                .map(|c| (c.id.as_str(), c.fact.as_str())),
            &params,
            scheme,
        );
        let path = self.run_dir.join("index").join(format!("{hash}.json"));
        let (index, hit) = if path.exists() {
            (Bm25Index::<f64>::load(&path, Some(&hash))?, true)
        } else {
            let index = Bm25Index::from_cases(&self.data.train, params, scheme)?;
            index.save(&path)?;
            (index, false)
        };
        self.record(&path);
        self.index = Some(IndexInfo {
            path: self.rel(&path),
            corpus_hash: hash,
            documents: index.len(),
        });
        self.base = Some(CaseBase::from_parts(index, self.data.train.clone())?);
        Ok(hit)
    }

    pub fn base(&self) -> &CaseBase<f64> {
        self.base.as_ref().expect("index prepared")
    }

    pub fn index_info(&self) -> Option<&IndexInfo> {
        self.index.as_ref()
    }

    /// Ranks the training cases for every test case once.
    pub fn ensure_retrieval(&mut self) -> Result<()> {
        self.ensure_index()?;
        if !self.retrieved.is_empty() {
            return Ok(());
        }
        let base = self.base.as_ref().unwrap();
        let pool_size = self.config.prompt.pool_size;
        let retrieved: Vec<(String, Retrieved)> = self.pool.install(|| {
            self.data
                .test
                .par_iter()
                .map(|c| {
                    let hits = base.rank_all(&c.fact);
                    let candidates = make_candidates(&hits, base, pool_size, Some(&c.charge))?;
                    Ok((c.id.clone(), Retrieved { hits, candidates }))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        self.retrieved = retrieved.into_iter().collect();
        Ok(())
    }

    pub fn retrieved(&self, case_id: &str) -> &Retrieved {
        &self.retrieved[case_id]
    }

    fn build_provider(&self) -> Result<Arc<dyn Provider>> {
        Ok(match &self.config.provider {
            ProviderConfig::Mock {
                mock,
                text,
                fixture,
                ..
            } => {
                let kind = match mock {
                    MockName::Constant => MockKind::Constant(text.clone().unwrap_or_default()),
                    MockName::Scripted => {
                        let p = fixture.as_ref().expect("validated");
                        let bytes = fs::read(p).map_err(|e| caseprompt_core::Error::Io {
                            path: p.clone(),
                            source: e,
                        })?;
                        let map: BTreeMap<String, Vec<String>> = serde_json::from_slice(&bytes)
                            .map_err(|e| {
                                CliError::Config(format!("fixture {}: {e}", p.display()))
                            })?;
                        MockKind::Scripted(map)
                    }
                    MockName::EchoGold => MockKind::EchoGold,
                    MockName::FirstCandidate => MockKind::FirstCandidate,
                    MockName::FirstDemo => MockKind::FirstDemo,
                    MockName::GoldJudge => MockKind::GoldJudge,
                };
                mock_provider(kind, Some(self.template.clone()))?
            }
            ProviderConfig::Chat {
                base_url,
                api_key_env,
                supports_n,
                timeout_secs,
                ..
            } => Arc::new(ChatCompletionsProvider::from_env(
                base_url,
                api_key_env,
                std::time::Duration::from_secs(*timeout_secs),
                *supports_n,
            )?),
        })
    }

    pub fn ensure_gateway(&mut self) -> Result<()> {
        if self.gateway.is_none() {
            let cache_dir = self.run_dir.join("cache");
            let gw = Gateway::new(
                self.build_provider()?,
                GenCache::on_disk(&cache_dir)?,
                self.config.retry.clone(),
            );
            self.artifacts.lock().unwrap().insert("cache/".into());
            self.gateway = Some(gw);
        }
        Ok(())
    }

    pub fn provider_id(&self) -> String {
        self.gateway
            .as_ref()
            .map(Gateway::provider_id)
            .unwrap_or_default()
    }

    pub fn stats(&self) -> GenStats {
        self.stats.lock().unwrap().clone()
    }

    fn request(&self, prompt: String, context: RequestContext) -> GenRequest {
        let g = &self.config.generation;
        let mut req = GenRequest::new(prompt, self.config.provider.model()).with_context(context);
        req.n_samples = g.n_samples;
        req.temperature = g.temperature;
        req.max_new_tokens = g.max_new_tokens;
        req
    }

    /// Runs every job under the parallelism bound, persisting prompts and
    /// samples under `group`. Output order follows `jobs`.
    pub fn generate(&self, group: &str, jobs: Vec<Job>) -> Result<Vec<JobOutput>> {
        let gw = self.gateway.as_ref().expect("gateway prepared");
        let results: Vec<Result<JobOutput>> = self.pool.install(|| {
            jobs.into_par_iter()
                .map(|job| {
                    self.write(
                        &format!("prompts/{group}/{}.txt", job.file),
                        job.prompt.as_bytes(),
                    )?;
                    let req = self.request(job.prompt, job.context);
                    let key = gw.key(&req);
                    let out = gw.generate(&req);
                    let mut stats = self.stats.lock().unwrap();
                    stats.requests += 1;
                    let samples = match out {
                        Ok(r) => {
                            stats.cache_hits += r.from_cache as usize;
                            stats.sequential += (r.sampling == SamplingMode::Sequential) as usize;
                            drop(stats);
                            self.write_json(
                                &format!("generations/{group}/{}.json", job.file),
                                &GenerationFile {
                                    case_id: &job.case_id,
                                    cache_key: key.as_str(),
                                    provider_id: &r.provider_id,
                                    samples: &r.samples,
                                },
                            )?;
                            Ok(r.samples)
                        }
                        Err(e) => {
                            stats.failures += 1;
                            tracing::warn!(case = %job.case_id, error = %e, "generation failed");
                            Err(e.to_string())
                        }
                    };
                    Ok(JobOutput {
                        case_id: job.case_id,
                        samples,
                    })
                })
                .collect()
        });
        results.into_iter().collect()
    }

    pub fn job(&self, case: &Case, file: String, prompt: String, charge: Option<String>) -> Job {
        Job {
            case_id: case.id.clone(),
            file,
            prompt,
            context: RequestContext {
                case_id: Some(case.id.clone()),
                gold: Some(case.charge.clone()),
                charge,
            },
        }
    }

    pub fn case_file(case_id: &str) -> String {
        file_stem(case_id)
    }

    pub fn metadata(&self, demo_order: &str) -> RunMetadata {
        RunMetadata {
            seed: self.config.sampling.seed,
            template_hash: self.template.hash(),
            provider_id: self.provider_id(),
            model_id: self.config.provider.model().to_owned(),
            n_samples: self.config.generation.n_samples,
            temperature: self.config.generation.temperature,
            candidate_pool_size: self.config.prompt.pool_size,
            demo_order: demo_order.to_owned(),
            ..RunMetadata::default()
        }
    }

    /// Generates one prompt per case and aggregates the parsed predictions.
    /// `build` returns the prompt for a case or the reason it has none.
    pub fn run_cases<F>(
        &self,
        run_id: &str,
        setting: TaskSetting,
        cases: &[Case],
        metadata: RunMetadata,
        build: F,
    ) -> Result<RunResult>
    where
        F: Fn(&Case) -> caseprompt_core::Result<String> + Sync,
    {
        let mut failures = Vec::new();
        let mut jobs = Vec::with_capacity(cases.len());
        for case in cases {
            match build(case) {
                Ok(prompt) => jobs.push(self.job(case, Self::case_file(&case.id), prompt, None)),
                Err(e) => failures.push(CaseFailure {
                    case_id: case.id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        let mut predictions = Vec::with_capacity(jobs.len());
        for out in self.generate(run_id, jobs)? {
            match out.samples {
                Ok(samples) => predictions.push(self.parser.map(out.case_id, &samples)?),
                Err(error) => failures.push(CaseFailure {
                    case_id: out.case_id,
                    error,
                }),
            }
        }
        Ok(RunResult::from_predictions(
            run_id,
            setting,
            predictions,
            &self.gold,
            &self.data.labels,
            self.config.inference.f1_average,
            failures,
            metadata,
        )?)
    }

    /// Records `command`'s artifacts in the manifest, keeping earlier
    /// commands' entries.
    pub fn finish(&self, command: &str) -> Result<PathBuf> {
        let path = self.run_dir.join(MANIFEST_FILE);
        let mut commands = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<Manifest>(&bytes)
                .map(|m| m.commands)
                .unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        commands.insert(
            command.to_owned(),
            CommandRecord {
                artifacts: self.artifacts.lock().unwrap().clone(),
            },
        );
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            run_id: self.config.output.run_id.clone(),
            config: self.config.clone(),
            inputs: self.data.inputs.clone(),
            split: self.data.summary.clone(),
            index: self.index.clone(),
            template_hash: self.template.hash(),
            provider_id: self.provider_id(),
            commands,
        };
        let mut bytes =
            serde_json::to_vec_pretty(&manifest).map_err(caseprompt_core::Error::from)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}
