//! Label candidates, demonstration selection and prompt rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bm25::RankedHit;
use crate::casebase::CaseBase;
use crate::corpus::{truncate, Case, Scheme, TokenCounter};
use crate::error::{Error, Result};
use crate::fsutil::sha256_hex;
use crate::retrieval_lab::{Flag, PlannedDemo};
use crate::scalar::Scalar;

/// Default number of retrieved cases whose charges form the candidate list.
pub const DEFAULT_POOL_SIZE: usize = 10;
pub const DEMO_TOKEN_LIMIT: usize = 500;
pub const QUERY_TOKEN_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionForm {
    Open,
    MultiChoice,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    #[default]
    Retrieved,
    Fixed,
    Simulated,
}

/// One cell of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskSetting {
    pub question_form: QuestionForm,
    pub n_shots: usize,
    pub demo_source: DemoSource,
}

impl TaskSetting {
    pub fn new(
        question_form: QuestionForm,
        n_shots: usize,
        demo_source: DemoSource,
    ) -> Result<Self> {
        if n_shots > 4 {
            return Err(Error::InvalidParameter(format!(
                "{n_shots} shots; at most 4 are supported"
            )));
        }
        Ok(TaskSetting {
            question_form,
            n_shots,
            demo_source: if n_shots == 0 {
                DemoSource::Retrieved
            } else {
                demo_source
            },
        })
    }

    /// Zero-shot open, few-shot open, zero-shot multi-choice, few-shot
    /// multi-choice.
    pub fn canonical(shots: usize) -> Result<[TaskSetting; 4]> {
        Ok([
            TaskSetting::new(QuestionForm::Open, 0, DemoSource::Retrieved)?,
            TaskSetting::new(QuestionForm::Open, shots, DemoSource::Retrieved)?,
            TaskSetting::new(QuestionForm::MultiChoice, 0, DemoSource::Retrieved)?,
            TaskSetting::new(QuestionForm::MultiChoice, shots, DemoSource::Retrieved)?,
        ])
    }

    pub fn is_multi_choice(&self) -> bool {
        self.question_form == QuestionForm::MultiChoice
    }
}

impl fmt::Display for TaskSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match self.question_form {
            QuestionForm::Open => "open",
            QuestionForm::MultiChoice => "mc",
        };
        write!(f, "{form}-{}shot", self.n_shots)?;
        if self.n_shots > 0 {
            let src = match self.demo_source {
                DemoSource::Retrieved => "retrieved",
                DemoSource::Fixed => "fixed",
                DemoSource::Simulated => "simulated",
            };
            write!(f, "-{src}")?;
        }
        Ok(())
    }
}

/// Token limits applied to demonstration and query facts.
#[derive(Clone)]
pub struct Truncation {
    pub demo_limit: usize,
    pub query_limit: usize,
    pub counter: Arc<dyn TokenCounter>,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            demo_limit: DEMO_TOKEN_LIMIT,
            query_limit: QUERY_TOKEN_LIMIT,
            counter: Arc::new(Scheme::CjkChar),
        }
    }
}

impl fmt::Debug for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Truncation")
            .field("demo_limit", &self.demo_limit)
            .field("query_limit", &self.query_limit)
            .field("counter", &self.counter.counter_id())
            .finish()
    }
}

impl Truncation {
    pub fn demo(&self, fact: &str) -> String {
        truncate(fact, self.demo_limit, self.counter.as_ref())
    }

    pub fn query(&self, fact: &str) -> String {
        truncate(fact, self.query_limit, self.counter.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    /// Already truncated.
    pub fact: String,
    pub charge: String,
    pub source_id: String,
    pub truth_flag: Option<Flag>,
}

impl Demonstration {
    pub fn from_case(case: &Case, truth_flag: Option<Flag>, trunc: &Truncation) -> Self {
        Demonstration {
            fact: trunc.demo(&case.fact),
            charge: case.charge.clone(),
            source_id: case.id.clone(),
            truth_flag,
        }
    }
}

/// Distinct charges offered as options in a multi-choice prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateList {
    pub labels: Vec<String>,
    /// Whether the gold charge is among `labels`. Evaluation metadata only,
    /// never rendered.
    pub contains_gold: Option<bool>,
}

impl CandidateList {
    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

/// Distinct charges of the top `pool_size` hits, in order of first appearance.
pub fn make_candidates<S: Scalar>(
    hits: &[RankedHit<S>],
    base: &CaseBase<S>,
    pool_size: usize,
    gold: Option<&str>,
) -> Result<CandidateList> {
    if pool_size == 0 {
        return Err(Error::InvalidParameter(
            "candidate pool size must be >= 1".into(),
        ));
    }
    if hits.is_empty() {
        return Err(Error::EmptyInput("retrieval hits"));
    }
    let mut labels: Vec<String> = Vec::new();
    for h in hits.iter().take(pool_size) {
        let label = base.label(h);
        if !labels.iter().any(|l| l == label) {
            labels.push(label.to_owned());
        }
    }
    let contains_gold = gold.map(|g| labels.iter().any(|l| l == g));
    Ok(CandidateList {
        labels,
        contains_gold,
    })
}

/// Appends the gold charge when it is missing.
pub fn inject_gold(candidates: &CandidateList, gold: &str) -> CandidateList {
    let mut out = candidates.clone();
    if !out.contains(gold) {
        out.labels.push(gold.to_owned());
    }
    out.contains_gold = Some(true);
    out
}

/// Top-`n` hits as demonstrations. With `candidates`, hits whose charge is
/// not a candidate are skipped in favour of the next ranked hit.
pub fn select_demonstrations<S: Scalar>(
    hits: &[RankedHit<S>],
    base: &CaseBase<S>,
    n: usize,
    candidates: Option<&CandidateList>,
    trunc: &Truncation,
) -> Result<Vec<Demonstration>> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidParameter(format!(
            "{n} demonstrations requested; expected 1..=4"
        )));
    }
    let demos: Vec<Demonstration> = hits
        .iter()
        .filter(|h| candidates.is_none_or(|c| c.contains(base.label(h))))
        .take(n)
        .map(|h| Demonstration::from_case(base.case(h.doc), None, trunc))
        .collect();
    if demos.len() < n {
        return Err(Error::DemonstrationShortfall {
            requested: n,
            available: demos.len(),
        });
    }
    Ok(demos)
}

/// Demonstrations named by a simulated plan entry.
pub fn demos_from_plan<S: Scalar>(
    planned: &[PlannedDemo],
    base: &CaseBase<S>,
    trunc: &Truncation,
) -> Result<Vec<Demonstration>> {
    planned
        .iter()
        .map(|p| {
            base.case_by_id(&p.demo_id)
                .map(|c| Demonstration::from_case(c, Some(p.flag), trunc))
                .ok_or_else(|| Error::UnknownDocument(p.demo_id.clone()))
        })
        .collect()
}

/// The first `n` pool cases, shared by every query.
pub fn fixed_demos(pool: &[Case], n: usize, trunc: &Truncation) -> Result<Vec<Demonstration>> {
    if pool.len() < n {
        return Err(Error::DemonstrationShortfall {
            requested: n,
            available: pool.len(),
        });
    }
    Ok(pool[..n]
        .iter()
        .map(|c| Demonstration::from_case(c, None, trunc))
        .collect())
}

/// Demonstration sets to run for a fixed-demo setting: one run per pool case
/// in the 1-shot setting (metrics are averaged afterwards), a single run of
/// the first `n` cases otherwise.
pub fn fixed_demo_runs(
    pool: &[Case],
    n: usize,
    trunc: &Truncation,
) -> Result<Vec<Vec<Demonstration>>> {
    if n == 1 {
        if pool.is_empty() {
            return Err(Error::DemonstrationShortfall {
                requested: 1,
                available: 0,
            });
        }
        return Ok(pool
            .iter()
            .map(|c| vec![Demonstration::from_case(c, None, trunc)])
            .collect());
    }
    Ok(vec![fixed_demos(pool, n, trunc)?])
}

/// Charges to verify one by one: the candidates plus the gold charge.
pub fn verification_charges(candidates: &CandidateList, gold: &str) -> Vec<String> {
    inject_gold(candidates, gold).labels
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Lit(String),
    Slot(String),
}

/// Text with `{name}` placeholders; `{{` and `}}` escape braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    source: String,
    segments: Vec<Segment>,
}

impl Block {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    lit.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    lit.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                            _ => {
                                return Err(Error::Template(format!(
                                    "unterminated placeholder in `{source}`"
                                )))
                            }
                        }
                    }
                    if name.is_empty() {
                        return Err(Error::Template(format!("empty placeholder in `{source}`")));
                    }
                    if !lit.is_empty() {
                        segments.push(Segment::Lit(std::mem::take(&mut lit)));
                    }
                    segments.push(Segment::Slot(name));
                }
                '}' => return Err(Error::Template(format!("stray `}}` in `{source}`"))),
                other => lit.push(other),
            }
        }
        if !lit.is_empty() {
            segments.push(Segment::Lit(lit));
        }
        Ok(Block {
            source: source.to_owned(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Lit(_) => None,
        })
    }

    /// Substitutes every placeholder in one pass; values are never rescanned.
    pub fn fill(&self, values: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.source.len());
        for seg in &self.segments {
            match seg {
                Segment::Lit(l) => out.push_str(l),
                Segment::Slot(name) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| {
                            Error::Template(format!("unresolved placeholder {{{name}}}"))
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Literal text directly before and after `name`.
    fn around(&self, name: &str) -> Option<(&str, &str)> {
        let i = self
            .segments
            .iter()
            .position(|s| matches!(s, Segment::Slot(n) if n == name))?;
        let lit = |j: Option<usize>| match j.and_then(|j| self.segments.get(j)) {
            Some(Segment::Lit(l)) => l.as_str(),
            _ => "",
        };
        Some((lit(i.checked_sub(1)), lit(Some(i + 1))))
    }

    fn check(&self, role: &str, allowed: &[&str], required: &[&str]) -> Result<()> {
        for p in self.placeholders() {
            if !allowed.contains(&p) {
                return Err(Error::Template(format!(
                    "{role}: unknown placeholder {{{p}}}"
                )));
            }
        }
        for r in required {
            if !self.placeholders().any(|p| p == *r) {
                return Err(Error::Template(format!(
                    "{role}: missing placeholder {{{r}}}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    language: String,
    joiner: String,
    candidate_separator: String,
    roles: BTreeMap<String, String>,
}

const ROLES: [&str; 6] = [
    "instruction",
    "instruction_zero_shot_open",
    "candidates",
    "demonstration",
    "query",
    "verification",
];

/// Prompt layout: instruction, candidate block (multi-choice only),
/// demonstrations, query; parts joined by `joiner`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub language: String,
    pub instruction: String,
    pub instruction_zero_shot_open: String,
    pub candidate_block: Block,
    pub candidate_separator: String,
    pub demo_block: Block,
    pub query_block: Block,
    pub verification_block: Block,
    pub joiner: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    Zh,
    En,
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix("\r\n")
        .or_else(|| s.strip_suffix('\n'))
        .unwrap_or(s)
}

impl PromptTemplate {
    /// Shipped templates.
    pub fn builtin(language: Language) -> Self {
        macro_rules! files {
            ($dir:literal) => {
                [
                    (
                        "manifest.toml",
                        include_str!(concat!("../templates/", $dir, "/manifest.toml")),
                    ),
                    (
                        "instruction.txt",
                        include_str!(concat!("../templates/", $dir, "/instruction.txt")),
                    ),
                    (
                        "instruction_zero_shot_open.txt",
                        include_str!(concat!(
                            "../templates/",
                            $dir,
                            "/instruction_zero_shot_open.txt"
                        )),
                    ),
                    (
                        "candidates.txt",
                        include_str!(concat!("../templates/", $dir, "/candidates.txt")),
                    ),
                    (
                        "demonstration.txt",
                        include_str!(concat!("../templates/", $dir, "/demonstration.txt")),
                    ),
                    (
                        "query.txt",
                        include_str!(concat!("../templates/", $dir, "/query.txt")),
                    ),
                    (
                        "verification.txt",
                        include_str!(concat!("../templates/", $dir, "/verification.txt")),
                    ),
                ]
            };
        }
        let files = match language {
            Language::Zh => files!("zh"),
            Language::En => files!("en"),
        };
        let lookup = |name: &str| -> Result<String> {
            files
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, c)| c.to_string())
                .ok_or_else(|| Error::Template(format!("missing builtin file {name}")))
        };
        Self::from_sources(&lookup("manifest.toml").unwrap(), lookup)
            .expect("builtin templates are valid")
    }

    /// Loads a template set from a manifest file mapping roles to files in
    /// the same directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        Self::from_sources(&text, |name| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        })
    }

    fn from_sources(manifest: &str, read: impl Fn(&str) -> Result<String>) -> Result<Self> {
        let m: Manifest = toml::from_str(manifest).map_err(|e| Error::Template(e.to_string()))?;
        for role in m.roles.keys() {
            if !ROLES.contains(&role.as_str()) {
                return Err(Error::Template(format!("unknown role `{role}`")));
            }
        }
        let text = |role: &str| -> Result<String> {
            let file = m
                .roles
                .get(role)
                .ok_or_else(|| Error::Template(format!("manifest lacks role `{role}`")))?;
            Ok(strip_final_newline(&read(file)?).to_owned())
        };
        let instruction = text("instruction")?;
        let instruction_zero_shot_open = text("instruction_zero_shot_open")?;
        for (role, t) in [
            ("instruction", &instruction),
            ("instruction_zero_shot_open", &instruction_zero_shot_open),
        ] {
            Block::parse(t)?.check(role, &[], &[])?;
        }
        let candidate_block = Block::parse(&text("candidates")?)?;
        candidate_block.check("candidates", &["candidates"], &["candidates"])?;
        let demo_block = Block::parse(&text("demonstration")?)?;
        demo_block.check(
            "demonstration",
            &["demo_fact", "demo_charge"],
            &["demo_fact", "demo_charge"],
        )?;
        let query_block = Block::parse(&text("query")?)?;
        query_block.check("query", &["query_fact"], &["query_fact"])?;
        let verification_block = Block::parse(&text("verification")?)?;
        verification_block.check("verification", &["query_fact", "charge"], &["charge"])?;
        Ok(PromptTemplate {
            language: m.language,
            instruction: Block::parse(&instruction)?.fill(&[])?,
            instruction_zero_shot_open: Block::parse(&instruction_zero_shot_open)?.fill(&[])?,
            candidate_block,
            candidate_separator: m.candidate_separator,
            demo_block,
            query_block,
            verification_block,
            joiner: m.joiner,
        })
    }

    /// Content hash over every part of the template.
    pub fn hash(&self) -> String {
        let parts = [
            self.language.as_str(),
            &self.instruction,
            &self.instruction_zero_shot_open,
            self.candidate_block.source(),
            &self.candidate_separator,
            self.demo_block.source(),
            self.query_block.source(),
            self.verification_block.source(),
            &self.joiner,
        ];
        let mut buf = Vec::new();
        for p in parts {
            buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
            buf.extend_from_slice(p.as_bytes());
        }
        sha256_hex(buf)
    }

    /// Candidate labels listed in a prompt rendered with this template.
    pub fn parse_candidates(&self, prompt: &str) -> Option<Vec<String>> {
        let (before, after) = self.candidate_block.around("candidates")?;
        let body = between(
            prompt,
            before,
            if after.is_empty() {
                &self.joiner
            } else {
                after
            },
        )?;
        Some(
            body.split(self.candidate_separator.as_str())
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect(),
        )
    }

    /// Charge of the first demonstration in a prompt rendered with this
    /// template.
    pub fn parse_first_demo_charge(&self, prompt: &str) -> Option<String> {
        let (before, after) = self.demo_block.around("demo_charge")?;
        let body = between(
            prompt,
            before,
            if after.is_empty() {
                &self.joiner
            } else {
                after
            },
        )?;
        let body = body.trim();
        (!body.is_empty()).then(|| body.to_owned())
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = if start.is_empty() {
        0
    } else {
        text.find(start)? + start.len()
    };
    let rest = &text[from..];
    let to = if end.is_empty() {
        rest.len()
    } else {
        rest.find(end).unwrap_or(rest.len())
    };
    Some(&rest[..to])
}

/// Renders the prompt for one query. The query fact must already be
/// truncated.
pub fn render(
    template: &PromptTemplate,
    setting: &TaskSetting,
    query_fact: &str,
    demos: &[Demonstration],
    candidates: Option<&CandidateList>,
) -> Result<String> {
    if demos.len() != setting.n_shots {
        return Err(Error::InvalidParameter(format!(
            "{} demonstrations for a {}-shot setting",
            demos.len(),
            setting.n_shots
        )));
    }
    let mut parts: Vec<String> = Vec::with_capacity(demos.len() + 3);
    let zero_shot_open = setting.n_shots == 0 && setting.question_form == QuestionForm::Open;
    parts.push(if zero_shot_open {
        template.instruction_zero_shot_open.clone()
    } else {
        template.instruction.clone()
    });
    if setting.is_multi_choice() {
        let cands = candidates.ok_or_else(|| {
            Error::InvalidParameter("multi-choice setting without candidates".into())
        })?;
        let joined = cands.labels.join(&template.candidate_separator);
        parts.push(template.candidate_block.fill(&[("candidates", &joined)])?);
    }
    for d in demos {
        parts.push(
            template
                .demo_block
                .fill(&[("demo_fact", &d.fact), ("demo_charge", &d.charge)])?,
        );
    }
    parts.push(template.query_block.fill(&[("query_fact", query_fact)])?);
    Ok(parts.join(&template.joiner))
}

/// Yes/no question about a single charge.
pub fn verification_prompt(
    template: &PromptTemplate,
    query_fact: &str,
    charge: &str,
) -> Result<String> {
    template
        .verification_block
        .fill(&[("query_fact", query_fact), ("charge", charge)])
}
