#![allow(dead_code)]

use std::path::{Path, PathBuf};

use caseprompt::ExperimentConfig;
use caseprompt_core::corpus::{write_jsonl, Case};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LABELS: [(&str, &str); 3] = [
    ("盗窃罪", "偷窃取走手机钱包财物商场撬锁"),
    ("诈骗罪", "骗谎称投资转账网络虚假冒充"),
    ("故意伤害罪", "打伤殴斗刀砍医院轻伤拳脚"),
];

const NOISE: &str = "被告人于某日在某地与被害人发生经查明事实清楚";

/// Balanced synthetic corpus: each fact mixes label-specific characters
/// with shared filler.
pub fn synthetic_cases(per_label: usize, seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<char> = NOISE.chars().collect();
    let mut out = Vec::new();
    for (li, (label, vocab)) in LABELS.iter().enumerate() {
        let vocab: Vec<char> = vocab.chars().collect();
        for i in 0..per_label {
            let mut fact = String::new();
            for _ in 0..10 {
                fact.push(*vocab.choose(&mut rng).unwrap());
            }
            for _ in 0..8 {
                fact.push(*noise.choose(&mut rng).unwrap());
            }
            out.push(Case::new(format!("c{li}-{i:03}"), fact, *label));
        }
    }
    out
}

pub fn write_corpus(dir: &Path, per_label: usize, seed: u64) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    write_jsonl(&path, &synthetic_cases(per_label, seed)).unwrap();
    path
}

/// 30-case corpus split into 5 train, 2 validation and 3 test cases per
/// label.
pub fn toy_config(dir: &Path, provider: &str, extra: &str) -> ExperimentConfig {
    let corpus = write_corpus(dir, 10, 7);
    let text = format!(
        r#"
[corpus]
train = "{c}"
test = "{c}"

[sampling]
enabled = true
seed = 3
quotas = {{ train = 5, validation = 2, test = 3 }}

[provider]
{provider}

[output]
dir = "{out}"
run_id = "toy"
parallelism = 3
{extra}
"#,
        c = corpus.display(),
        out = dir.join("runs").display(),
    );
    ExperimentConfig::from_toml(&text, &[]).unwrap()
}

pub fn with(mut cfg: ExperimentConfig, overrides: &[&str]) -> ExperimentConfig {
    let text = toml::to_string(&cfg).unwrap();
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    cfg = ExperimentConfig::from_toml(&text, &o).unwrap();
    cfg
}
