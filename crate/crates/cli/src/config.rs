//! Experiment configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use caseprompt_core::corpus::{CorpusFormat, Quotas, Scheme};
use caseprompt_core::evaluation::F1Average;
use caseprompt_core::inference::{ScoreAggregation, YesNoMarkers};
use caseprompt_core::llm_gateway::{
    RetryPolicy, DEFAULT_MAX_NEW_TOKENS, DEFAULT_SAMPLES, DEFAULT_TEMPERATURE,
};
use caseprompt_core::prompting::{
    DemoSource, Language, QuestionForm, DEFAULT_POOL_SIZE, DEMO_TOKEN_LIMIT, QUERY_TOKEN_LIMIT,
};
use caseprompt_core::retrieval_lab::Pattern;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub bm25: Bm25Config,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub settings: SettingsConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub knn: KnnConfig,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub format: CorpusFormat,
    pub train: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default = "yes")]
    pub drop_multi_charge: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// When off, the corpus files are used as given.
    pub enabled: bool,
    pub seed: u64,
    pub quotas: Quotas,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            enabled: true,
            seed: 42,
            quotas: Quotas::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
    pub scheme: Scheme,
}

impl Default for Bm25Config {
    fn default() -> Self {
        Bm25Config {
            k1: 1.5,
            b: 0.75,
            scheme: Scheme::CjkChar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub language: Language,
    /// Manifest of a custom template set; overrides `language`.
    pub template: Option<PathBuf>,
    pub pool_size: usize,
    pub demo_limit: usize,
    pub query_limit: usize,
    /// Re-prompt the Hard group of multi-choice runs with the gold charge
    /// appended to the candidates.
    pub hard_with_gold: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            language: Language::Zh,
            template: None,
            pool_size: DEFAULT_POOL_SIZE,
            demo_limit: DEMO_TOKEN_LIMIT,
            query_limit: QUERY_TOKEN_LIMIT,
            hard_with_gold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettingsConfig {
    pub question_forms: Vec<QuestionForm>,
    pub shots: Vec<usize>,
    pub demo_sources: Vec<DemoSource>,
    /// Training-case ids used as fixed demonstrations.
    pub fixed_pool: Vec<String>,
}

impl Default for SettingsConfig {
    fn default() -> Self {
        SettingsConfig {
            question_forms: vec![QuestionForm::Open, QuestionForm::MultiChoice],
            shots: vec![0, 1, 2, 3, 4],
            demo_sources: vec![DemoSource::Retrieved],
            fixed_pool: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub targets: Vec<f64>,
    pub shots: usize,
    pub question_form: QuestionForm,
    /// Demonstration patterns for the heat map; `-` is the zero-shot run.
    pub patterns: Vec<Pattern>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            targets: (0..=10).map(|i| i as f64 / 10.0).collect(),
            shots: 1,
            question_form: QuestionForm::Open,
            patterns: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k_range: Vec<usize>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k_range: (1..=21).step_by(2).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockName {
    Constant,
    Scripted,
    EchoGold,
    FirstCandidate,
    FirstDemo,
    GoldJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Mock {
        mock: MockName,
        #[serde(default)]
        text: Option<String>,
        /// JSON object mapping case ids to sample lists.
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default = "mock_model")]
        model: String,
    },
    Chat {
        base_url: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "yes")]
        supports_n: bool,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn mock_model() -> String {
    "mock".into()
}

fn default_key_env() -> String {
    "CASEPROMPT_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

impl ProviderConfig {
    pub fn model(&self) -> &str {
        match self {
            ProviderConfig::Mock { model, .. } | ProviderConfig::Chat { model, .. } => model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_samples: DEFAULT_SAMPLES,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default)]
    pub aggregation: ScoreAggregation,
    #[serde(default)]
    pub f1_average: F1Average,
    #[serde(default)]
    pub markers: YesNoMarkers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub run_id: String,
    pub parallelism: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            run_id: "default".into(),
            parallelism: 4,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `key=value` overrides, resolves relative paths
    /// against the file's directory and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.train);
        fix(&mut self.corpus.test);
        if let Some(v) = &mut self.corpus.validation {
            fix(v);
        }
        if let Some(t) = &mut self.prompt.template {
            fix(t);
        }
        if let ProviderConfig::Mock {
            fixture: Some(f), ..
        } = &mut self.provider
        {
            fix(f);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.settings.shots.iter().any(|&s| s > 4) {
            return bad("settings.shots must lie in 0..=4".into());
        }
        if self.settings.question_forms.is_empty() || self.settings.shots.is_empty() {
            return bad("settings matrix is empty".into());
        }
        if self.settings.demo_sources.contains(&DemoSource::Simulated) {
            return bad("simulated demonstrations are configured under [simulation]".into());
        }
        if self.settings.demo_sources.contains(&DemoSource::Fixed)
            && self.settings.fixed_pool.is_empty()
        {
            return bad("settings.fixed_pool is required for fixed demonstrations".into());
        }
        if self.prompt.pool_size == 0 {
            return bad("prompt.pool_size must be >= 1".into());
        }
        if self.prompt.demo_limit == 0 || self.prompt.query_limit == 0 {
            return bad("truncation limits must be >= 1".into());
        }
        if !(self.bm25.k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25.b)) {
            return bad("bm25 requires k1 >= 0 and b in [0, 1]".into());
        }
        if self.generation.n_samples == 0 {
            return bad("generation.n_samples must be >= 1".into());
        }
        if self.generation.temperature.is_nan() || self.generation.temperature < 0.0 {
            return bad("generation.temperature must be >= 0".into());
        }
        if self
            .simulation
            .targets
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return bad("simulation.targets must lie in [0, 1]".into());
        }
        if !(1..=4).contains(&self.simulation.shots) {
            return bad("simulation.shots must lie in 1..=4".into());
        }
        if self.simulation.patterns.iter().any(|p| p.len() > 4) {
            return bad("simulation.patterns are at most 4 long".into());
        }
        if self.knn.k_range.is_empty() || self.knn.k_range.contains(&0) {
            return bad("knn.k_range must be non-empty with k >= 1".into());
        }
        if self.output.parallelism == 0 {
            return bad("output.parallelism must be >= 1".into());
        }
        if self.output.run_id.is_empty()
            || self.output.run_id.contains(['/', '\\'])
            || self.output.run_id.starts_with('.')
        {
            return bad("output.run_id must be a plain directory name".into());
        }
        match &self.provider {
            ProviderConfig::Mock {
                mock: MockName::Constant,
                text: None,
                ..
            } => bad("mock `constant` needs provider.text".into()),
            ProviderConfig::Mock {
                mock: MockName::Scripted,
                fixture: None,
                ..
            } => bad("mock `scripted` needs provider.fixture".into()),
            _ => Ok(()),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(&self.output.run_id)
    }
}

/// `a.b.c=value`; the value is parsed as TOML, falling back to a string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[corpus]
train = "train.jsonl"
test = "test.jsonl"

[provider]
kind = "mock"
mock = "echo_gold"
"#;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(c.generation.n_samples, 5);
        assert_eq!(c.generation.temperature, 0.8);
        assert_eq!(c.settings.shots, vec![0, 1, 2, 3, 4]);
        assert_eq!((c.prompt.demo_limit, c.prompt.query_limit), (500, 1000));
        assert_eq!(
            c.sampling.quotas,
            Quotas {
                train: 10,
                validation: 10,
                test: 5
            }
        );
        assert!(c.corpus.drop_multi_charge);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[generation]\nn_sample = 3\n");
        assert!(ExperimentConfig::from_toml(&text, &[]).is_err());
        assert!(ExperimentConfig::from_toml(MINIMAL, &["bogus.key=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_toml(
            MINIMAL,
            &[
                "generation.n_samples=3".into(),
                "settings.shots=[0,1]".into(),
                "output.run_id=abc".into(),
                "provider.model=m2".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.generation.n_samples, 3);
        assert_eq!(c.settings.shots, vec![0, 1]);
        assert_eq!(c.output.run_id, "abc");
        assert_eq!(c.provider.model(), "m2");
    }

    #[test]
    fn validation_catches_bad_values() {
        for o in [
            "settings.shots=[5]",
            "simulation.targets=[1.5]",
            "generation.n_samples=0",
            "provider.mock=\"constant\"",
        ] {
            assert!(
                ExperimentConfig::from_toml(MINIMAL, &[o.into()]).is_err(),
                "{o}"
            );
        }
    }
}
