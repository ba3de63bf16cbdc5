//! Multi-sample generation over chat-completion endpoints and mock
//! providers, with an on-disk content-addressed cache and retry.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::prompting::PromptTemplate;

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 128;
pub const CACHE_FORMAT_VERSION: u32 = 1;

/// Facts about the query that only mock providers may look at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestContext {
    pub case_id: Option<String>,
    pub gold: Option<String>,
    /// Charge under test for yes/no verification prompts.
    pub charge: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenRequest {
    pub prompt: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub model_id: String,
    #[serde(skip)]
    pub context: RequestContext,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>, model_id: impl Into<String>) -> Self {
        GenRequest {
            prompt: prompt.into(),
            n_samples: DEFAULT_SAMPLES,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            model_id: model_id.into(),
            context: RequestContext::default(),
        }
    }

    pub fn with_context(mut self, context: RequestContext) -> Self {
        self.context = context;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidParameter("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// How the samples of a result were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One request with `n` set server-side.
    ServerSide,
    /// The provider ignored `n`; samples came from repeated calls.
    Sequential,
    Mock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenResult {
    pub samples: Vec<String>,
    pub provider_id: String,
    pub latency: Duration,
    pub from_cache: bool,
    pub attempts: u32,
    pub sampling: SamplingMode,
}

/// Digest of every request field that influences the samples.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn of(provider_id: &str, req: &GenRequest) -> Self {
        let mut buf = Vec::new();
        let mut put = |field: &[u8]| {
            buf.extend_from_slice(&(field.len() as u64).to_le_bytes());
            buf.extend_from_slice(field);
        };
        put(format!("gen/v{CACHE_FORMAT_VERSION}").as_bytes());
        put(provider_id.as_bytes());
        put(req.model_id.as_bytes());
        put(req.prompt.as_bytes());
        put(&(req.n_samples as u64).to_le_bytes());
        put(&req.temperature.to_bits().to_le_bytes());
        put(&req.max_new_tokens.to_le_bytes());
        CacheKey(sha256_hex(buf))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Timeouts, 5xx and 429; worth retrying.
    Transient(String),
    Auth(String),
    Fatal(String),
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProviderError::Transient(m) => write!(f, "transient: {m}"),
            ProviderError::Auth(m) => write!(f, "auth: {m}"),
            ProviderError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub samples: Vec<String>,
    pub sampling: SamplingMode,
}

/// A text generator. Implementations must return exactly `n_samples` texts.
pub trait Provider: Send + Sync {
    /// Stable identity that enters the cache key. Never includes secrets.
    fn id(&self) -> String;

    fn complete(&self, req: &GenRequest) -> std::result::Result<Completion, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Backoff before attempt `attempt + 1`, where `attempt >= 1`.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(
            1u32.checked_shl(attempt.saturating_sub(1))
                .unwrap_or(u32::MAX),
        );
        let capped = exp.min(self.max_delay);
        if self.jitter {
            capped.mul_f64(rand::rng().random_range(0.5..=1.0))
        } else {
            capped
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Request fields echoed into each cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEcho {
    pub model_id: String,
    pub prompt: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_new_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub format_version: u32,
    pub key: CacheKey,
    pub provider_id: String,
    pub request: RequestEcho,
    pub samples: Vec<String>,
    pub sampling: SamplingMode,
}

/// Generation cache: in memory, optionally backed by one file per key.
#[derive(Debug, Default)]
pub struct GenCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<CacheKey, CacheEntry>>,
}

impl GenCache {
    pub fn in_memory() -> Self {
        GenCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(GenCache {
            dir: Some(dir),
            mem: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(dir: &Path, key: &CacheKey) -> PathBuf {
        dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>> {
        if let Some(e) = self.mem.read().unwrap().get(key) {
            return Ok(Some(e.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = Self::path_for(dir, key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| Error::Artifact {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if entry.format_version != CACHE_FORMAT_VERSION || entry.key != *key {
            return Err(Error::Artifact {
                path,
                message: "cache entry does not match its key".into(),
            });
        }
        self.mem.write().unwrap().insert(key.clone(), entry.clone());
        Ok(Some(entry))
    }

    pub fn put(&self, entry: CacheEntry) -> Result<()> {
        if let Some(dir) = &self.dir {
            let mut bytes = serde_json::to_vec_pretty(&entry)?;
            bytes.push(b'\n');
            write_atomic(&Self::path_for(dir, &entry.key), &bytes)?;
        }
        self.mem.write().unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }
}

/// Provider handle plus cache and retry policy.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: GenCache,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, cache: GenCache, retry: RetryPolicy) -> Self {
        Gateway {
            provider,
            cache,
            retry,
        }
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    pub fn cache(&self) -> &GenCache {
        &self.cache
    }

    pub fn key(&self, req: &GenRequest) -> CacheKey {
        CacheKey::of(&self.provider.id(), req)
    }

    /// Returns `n_samples` texts, from the cache when possible.
    pub fn generate(&self, req: &GenRequest) -> Result<GenResult> {
        req.validate()?;
        let started = Instant::now();
        let provider_id = self.provider.id();
        let key = CacheKey::of(&provider_id, req);
        if let Some(hit) = self.cache.get(&key)? {
            return Ok(GenResult {
                samples: hit.samples,
                provider_id,
                latency: started.elapsed(),
                from_cache: true,
                attempts: 0,
                sampling: hit.sampling,
            });
        }
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        let completion = loop {
            attempt += 1;
            match self.provider.complete(req) {
                Ok(c) => break c,
                Err(ProviderError::Auth(m)) => return Err(Error::Auth(m)),
                Err(ProviderError::Fatal(m)) => return Err(Error::Provider(m)),
                Err(ProviderError::Transient(m)) => {
                    if attempt >= max_attempts {
                        return Err(Error::RetriesExhausted {
                            attempts: attempt,
                            message: m,
                        });
                    }
                    let wait = self.retry.delay(attempt);
                    tracing::warn!(attempt, ?wait, error = %m, "transient provider failure");
                    thread::sleep(wait);
                }
            }
        };
        if completion.samples.len() != req.n_samples {
            return Err(Error::Provider(format!(
                "expected {} samples, provider returned {}",
                req.n_samples,
                completion.samples.len()
            )));
        }
        self.cache.put(CacheEntry {
            format_version: CACHE_FORMAT_VERSION,
            key,
            provider_id: provider_id.clone(),
            request: RequestEcho {
                model_id: req.model_id.clone(),
                prompt: req.prompt.clone(),
                n_samples: req.n_samples,
                temperature: req.temperature,
                max_new_tokens: req.max_new_tokens,
            },
            samples: completion.samples.clone(),
            sampling: completion.sampling,
        })?;
        Ok(GenResult {
            samples: completion.samples,
            provider_id,
            latency: started.elapsed(),
            from_cache: false,
            attempts: attempt,
            sampling: completion.sampling,
        })
    }
}

/// Deterministic stand-ins for a real model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockKind {
    Constant(String),
    /// Case id to the texts to replay; cycled if shorter than `n_samples`.
    Scripted(BTreeMap<String, Vec<String>>),
    /// Answers with the query's gold charge.
    EchoGold,
    /// Answers with the first listed candidate.
    FirstCandidate,
    /// Answers with the charge of the first demonstration.
    FirstDemo,
    /// For yes/no prompts: "yes" when the charge asked about is the gold one.
    GoldJudge,
}

impl MockKind {
    fn name(&self) -> &'static str {
        match self {
            MockKind::Constant(_) => "constant",
            MockKind::Scripted(_) => "scripted",
            MockKind::EchoGold => "echo_gold",
            MockKind::FirstCandidate => "first_candidate",
            MockKind::FirstDemo => "first_demo",
            MockKind::GoldJudge => "gold_judge",
        }
    }
}

pub struct MockProvider {
    kind: MockKind,
    template: Option<PromptTemplate>,
    id: String,
}

impl MockProvider {
    /// `template` is needed by the kinds that read the rendered prompt.
    pub fn new(kind: MockKind, template: Option<PromptTemplate>) -> Result<Self> {
        if matches!(kind, MockKind::FirstCandidate | MockKind::FirstDemo) && template.is_none() {
            return Err(Error::InvalidParameter(format!(
                "mock `{}` needs the prompt template",
                kind.name()
            )));
        }
        let config = match &kind {
            MockKind::Constant(text) => sha256_hex(text),
            MockKind::Scripted(fixture) => {
                sha256_hex(serde_json::to_vec(fixture).expect("fixture serializes"))
            }
            _ => template
                .as_ref()
                .map(PromptTemplate::hash)
                .unwrap_or_default(),
        };
        let id = format!("mock:{}:{}", kind.name(), &config[..config.len().min(12)]);
        Ok(MockProvider { kind, template, id })
    }

    fn answer(&self, req: &GenRequest) -> std::result::Result<Vec<String>, ProviderError> {
        let n = req.n_samples;
        let repeat = |s: String| vec![s; n];
        let ctx = &req.context;
        match &self.kind {
            MockKind::Constant(text) => Ok(repeat(text.clone())),
            MockKind::Scripted(fixture) => {
                let case = ctx
                    .case_id
                    .as_deref()
                    .ok_or_else(|| ProviderError::Fatal("scripted mock needs a case id".into()))?;
                let texts = fixture.get(case).filter(|t| !t.is_empty()).ok_or_else(|| {
                    ProviderError::Fatal(Error::MissingFixture(case.to_owned()).to_string())
                })?;
                Ok(texts.iter().cycle().take(n).cloned().collect())
            }
            MockKind::EchoGold => {
                ctx.gold.clone().map(repeat).ok_or_else(|| {
                    ProviderError::Fatal("echo_gold mock needs the gold label".into())
                })
            }
            MockKind::FirstCandidate => {
                let t = self.template.as_ref().expect("checked at construction");
                let first = t
                    .parse_candidates(&req.prompt)
                    .and_then(|c| c.into_iter().next())
                    .unwrap_or_default();
                Ok(repeat(first))
            }
            MockKind::FirstDemo => {
                let t = self.template.as_ref().expect("checked at construction");
                Ok(repeat(
                    t.parse_first_demo_charge(&req.prompt).unwrap_or_default(),
                ))
            }
            MockKind::GoldJudge => {
                let yes = ctx.gold.is_some() && ctx.gold == ctx.charge;
                Ok(repeat(if yes { "yes" } else { "no" }.to_owned()))
            }
        }
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &GenRequest) -> std::result::Result<Completion, ProviderError> {
        Ok(Completion {
            samples: self.answer(req)?,
            sampling: SamplingMode::Mock,
        })
    }
}

pub fn mock_provider(
    kind: MockKind,
    template: Option<PromptTemplate>,
) -> Result<Arc<dyn Provider>> {
    Ok(Arc::new(MockProvider::new(kind, template)?))
}

/// Client for `POST {base_url}/v1/chat/completions`.
pub struct ChatCompletionsProvider {
    base_url: String,
    api_key: Option<String>,
    supports_n: bool,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    n: usize,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

impl ChatCompletionsProvider {
    /// `api_key` is sent as a bearer token when present.
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        supports_n: bool,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(ChatCompletionsProvider {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            supports_n,
            client,
        })
    }

    /// Key read from the environment variable `var`, if set.
    pub fn from_env(
        base_url: impl Into<String>,
        var: &str,
        timeout: Duration,
        supports_n: bool,
    ) -> Result<Self> {
        Self::new(
            base_url,
            std::env::var(var).ok().filter(|k| !k.is_empty()),
            timeout,
            supports_n,
        )
    }

    fn call(&self, req: &GenRequest, n: usize) -> std::result::Result<Vec<String>, ProviderError> {
        let body = ChatBody {
            model: &req.model_id,
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            n,
            temperature: req.temperature,
            max_tokens: req.max_new_tokens,
        };
        let mut rb = self
            .client
            .post(format!("{}/v1/chat/completions", self.base_url))
            .json(&body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ProviderError::Transient(e.to_string())
            } else {
                ProviderError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        if !status.is_success() {
            let msg = format!(
                "HTTP {}: {}",
                status.as_u16(),
                text.chars().take(500).collect::<String>()
            );
            return Err(match status.as_u16() {
                401 | 403 => ProviderError::Auth(msg),
                429 | 500..=599 | 408 => ProviderError::Transient(msg),
                _ => ProviderError::Fatal(msg),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Fatal(format!("bad response body: {e}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }
}

impl Provider for ChatCompletionsProvider {
    fn id(&self) -> String {
        format!("chat:{}", self.base_url)
    }

    fn complete(&self, req: &GenRequest) -> std::result::Result<Completion, ProviderError> {
        let mut samples = Vec::with_capacity(req.n_samples);
        let mut sampling = SamplingMode::ServerSide;
        if self.supports_n {
            samples = self.call(req, req.n_samples)?;
            samples.truncate(req.n_samples);
        }
        while samples.len() < req.n_samples {
            sampling = SamplingMode::Sequential;
            let mut more = self.call(req, 1)?;
            if more.is_empty() {
                return Err(ProviderError::Fatal("response without choices".into()));
            }
            more.truncate(req.n_samples - samples.len());
            samples.extend(more);
        }
        Ok(Completion { samples, sampling })
    }
}
