//! Case records: ingestion, balanced sampling, tokenization and truncation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One legal case: its fact description and the charge it was judged under.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub fact: String,
    pub charge: String,
}

impl Case {
    pub fn new(id: impl Into<String>, fact: impl Into<String>, charge: impl Into<String>) -> Self {
        Case {
            id: id.into(),
            fact: fact.into(),
            charge: charge.into(),
        }
    }
}

/// Ordered set of distinct charge names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("label set"));
        }
        let mut seen = HashSet::with_capacity(labels.len());
        for label in &labels {
            if label.is_empty() {
                return Err(Error::InvalidParameter("empty label name".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::DuplicateId(label.clone()));
            }
        }
        Ok(LabelSet { labels })
    }

    /// Distinct charges of `cases`, sorted by their string order.
    pub fn from_cases<'a>(cases: impl IntoIterator<Item = &'a Case>) -> Result<Self> {
        let set: BTreeSet<&str> = cases.into_iter().map(|c| c.charge.as_str()).collect();
        Self::new(set.into_iter().map(str::to_owned).collect())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.position(label).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;
    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSet::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

/// On-disk corpus layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// JSON Lines with `id`, `fact`, `charge`.
    #[default]
    Canonical,
    /// Published CAIL records: `fact` plus `meta.accusation`.
    Cail,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Skip CAIL records that list more than one accusation.
    pub drop_multi_charge: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalRecord {
    id: String,
    fact: String,
    charge: String,
}

#[derive(Deserialize)]
struct CailRecord {
    #[serde(default)]
    id: Option<String>,
    fact: String,
    meta: CailMeta,
}

#[derive(Deserialize)]
struct CailMeta {
    accusation: Vec<String>,
}

/// Reads a corpus file, returning the cases in file order.
pub fn ingest(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Case>> {
    ingest_with(path, format, &IngestOptions::default())
}

pub fn ingest_with(
    path: impl AsRef<Path>,
    format: CorpusFormat,
    options: &IngestOptions,
) -> Result<Vec<Case>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut cases = Vec::new();
    let mut ids = HashSet::new();
    let mut multi_charge = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let case = match format {
            CorpusFormat::Canonical => {
                let rec: CanonicalRecord =
                    serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                Case::new(rec.id, rec.fact, rec.charge)
            }
            CorpusFormat::Cail => {
                let rec: CailRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                let Some(first) = rec.meta.accusation.first() else {
                    return Err(bad("empty accusation list".into()));
                };
                if rec.meta.accusation.len() > 1 {
                    multi_charge += 1;
                    if options.drop_multi_charge {
                        continue;
                    }
                }
                let id = rec.id.unwrap_or_else(|| format!("{stem}-{line_no}"));
                Case::new(id, rec.fact, first.trim())
            }
        };
        if case.id.is_empty() {
            return Err(bad("empty id".into()));
        }
        if case.fact.trim().is_empty() {
            return Err(bad("empty fact".into()));
        }
        if case.charge.is_empty() {
            return Err(bad("empty charge".into()));
        }
        if !ids.insert(case.id.clone()) {
            return Err(bad(format!("duplicate id `{}`", case.id)));
        }
        cases.push(case);
    }
    if multi_charge > 0 {
        tracing::warn!(
            path = %path.display(),
            multi_charge,
            dropped = options.drop_multi_charge,
            "records with several accusations"
        );
    }
    if cases.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(cases)
}

/// Writes cases as canonical JSON Lines.
pub fn write_jsonl(path: impl AsRef<Path>, cases: &[Case]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for case in cases {
        serde_json::to_writer(&mut out, case)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A label that could not fill its quota.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub label: String,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Grouped by label in string order, file order within a label.
    pub cases: Vec<Case>,
    pub shortfalls: Vec<Shortfall>,
}

/// Draws `per_label` cases of every charge uniformly without replacement.
///
/// Labels with fewer cases contribute all of them and are reported in
/// [`Sample::shortfalls`].
pub fn sample_balanced(cases: &[Case], per_label: usize, seed: u64) -> Sample {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        by_label.entry(case.charge.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    let mut shortfalls = Vec::new();
    for (label, members) in by_label {
        if members.len() <= per_label {
            if members.len() < per_label {
                shortfalls.push(Shortfall {
                    label: label.to_owned(),
                    requested: per_label,
                    available: members.len(),
                });
            }
            picked.extend(members.iter().map(|&i| cases[i].clone()));
            continue;
        }
        let mut chosen = rand::seq::index::sample(&mut rng, members.len(), per_label).into_vec();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|j| cases[members[j]].clone()));
    }
    for s in &shortfalls {
        tracing::warn!(label = %s.label, available = s.available, requested = s.requested, "under-populated label");
    }
    Sample {
        cases: picked,
        shortfalls,
    }
}

/// Per-label case quotas for the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quotas {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for Quotas {
    fn default() -> Self {
        Quotas {
            train: 10,
            validation: 10,
            test: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Case>,
    pub validation: Vec<Case>,
    pub test: Vec<Case>,
    pub per_label_counts: BTreeMap<String, SplitCounts>,
    pub shortfalls: Vec<Shortfall>,
}

impl CorpusSplit {
    /// Samples disjoint train/validation/test splits.
    ///
    /// Test cases come from `test_pool`. Validation cases come from
    /// `validation_pool` when given, otherwise from what remains of
    /// `train_pool` after the training draw. Ids already taken by an earlier
    /// split are never reused.
    pub fn build(
        train_pool: &[Case],
        validation_pool: Option<&[Case]>,
        test_pool: &[Case],
        quotas: Quotas,
        seed: u64,
    ) -> Self {
        let test = sample_balanced(test_pool, quotas.test, seed);
        let mut taken: HashSet<String> = test.cases.iter().map(|c| c.id.clone()).collect();

        let remaining = |pool: &[Case], taken: &HashSet<String>| -> Vec<Case> {
            pool.iter()
                .filter(|c| !taken.contains(&c.id))
                .cloned()
                .collect()
        };
        let train = sample_balanced(
            &remaining(train_pool, &taken),
            quotas.train,
            seed.wrapping_add(1),
        );
        taken.extend(train.cases.iter().map(|c| c.id.clone()));
        let val_pool = remaining(validation_pool.unwrap_or(train_pool), &taken);
        let validation = sample_balanced(&val_pool, quotas.validation, seed.wrapping_add(2));

        let mut per_label_counts: BTreeMap<String, SplitCounts> = BTreeMap::new();
        for c in &train.cases {
            per_label_counts.entry(c.charge.clone()).or_default().train += 1;
        }
        for c in &validation.cases {
            per_label_counts
                .entry(c.charge.clone())
                .or_default()
                .validation += 1;
        }
        for c in &test.cases {
            per_label_counts.entry(c.charge.clone()).or_default().test += 1;
        }
        let mut shortfalls = test.shortfalls;
        shortfalls.extend(train.shortfalls);
        shortfalls.extend(validation.shortfalls);
        CorpusSplit {
            train: train.cases,
            validation: validation.cases,
            test: test.cases,
            per_label_counts,
            shortfalls,
        }
    }
}

/// Tokenization scheme for BM25 and default token counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One token per CJK ideograph, lowercased ASCII alphanumeric runs,
    /// everything else dropped.
    #[default]
    CjkChar,
    Whitespace,
}

impl Scheme {
    pub fn id(self) -> &'static str {
        match self {
            Scheme::CjkChar => "cjk_char",
            Scheme::Whitespace => "whitespace",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<String>,
    pub scheme_id: String,
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3007
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x2F800..=0x2FA1F
        | 0x30000..=0x3134F)
}

fn cjk_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_ascii_alphanumeric() {
            run_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = run_start.take() {
            spans.push(start..i);
        }
        if is_cjk(c) {
            spans.push(i..i + c.len_utf8());
        }
    }
    if let Some(start) = run_start {
        spans.push(start..text.len());
    }
    spans
}

fn whitespace_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(s..i);
            }
        } else {
            start.get_or_insert(i);
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

/// Splits `text` into tokens under `scheme`.
pub fn tokenize(text: &str, scheme: Scheme) -> TokenStream {
    TokenStream {
        tokens: tokens(text, scheme),
        scheme_id: scheme.id().to_owned(),
    }
}

pub(crate) fn tokens(text: &str, scheme: Scheme) -> Vec<String> {
    let spans = scheme.spans(text);
    spans
        .into_iter()
        .map(|r| match scheme {
            Scheme::CjkChar => text[r].to_ascii_lowercase(),
            Scheme::Whitespace => text[r].to_owned(),
        })
        .collect()
}

/// Token boundaries used to measure and cut text.
///
/// Model-specific tokenizers plug in here; [`Scheme`] is the default.
pub trait TokenCounter: Send + Sync {
    fn counter_id(&self) -> String;

    /// Byte ranges of the tokens of `text`, in order.
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

impl TokenCounter for Scheme {
    fn counter_id(&self) -> String {
        self.id().to_owned()
    }

    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        match self {
            Scheme::CjkChar => cjk_spans(text),
            Scheme::Whitespace => whitespace_spans(text),
        }
    }
}

/// Cuts `text` right after its `limit`-th token. Text within the limit is
/// returned unchanged.
pub fn truncate(text: &str, limit: usize, counter: &dyn TokenCounter) -> String {
    let spans = counter.spans(text);
    if spans.len() <= limit {
        return text.to_owned();
    }
    match limit.checked_sub(1) {
        Some(last) => text[..spans[last].end].to_owned(),
        None => String::new(),
    }
}
