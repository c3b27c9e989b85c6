//! Pipeline configuration. One structured file configures every stage;
//! credentials come only from environment variables named here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{MarginMode, MarginSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fixture-only mode: never talk to a network provider.
    #[serde(default)]
    pub offline: bool,
    pub paths: PathsConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub related: RelatedConfig,
    #[serde(default)]
    pub evidence: EvidenceConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub axioms: AxiomsConfig,
    #[serde(default)]
    pub margin: MarginConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub train: TrainStageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory all stage artifacts and manifests are written to.
    pub work_dir: PathBuf,
    /// Input post archive (XML rows or JSONL).
    pub archive: PathBuf,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// Per-pair-type human preference fractions for the validation gate.
    #[serde(default)]
    pub judgments: Option<PathBuf>,
    /// Annotated pairs for the agreement metric.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Pre-scored evidence passages; when unset, evidence is mined from the
    /// corpus itself.
    #[serde(default)]
    pub passages: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub format: String,
    pub forum: String,
    pub min_answers: usize,
    pub gap_ratio: f64,
    /// Per-forum post caps applied after filtering.
    pub caps: BTreeMap<String, usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            format: "jsonl".to_string(),
            forum: "default".to_string(),
            min_answers: 2,
            gap_ratio: 1.3,
            caps: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    /// "offline" (hashed bag-of-words) or "http".
    pub provider: String,
    pub dim: usize,
    pub endpoint: String,
    pub api_key_env: String,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            provider: "offline".to_string(),
            dim: 256,
            endpoint: String::new(),
            api_key_env: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelatedConfig {
    pub k: usize,
    /// Relatedness ceiling: neighbors at or above this dot product are
    /// treated as paraphrases and excluded.
    pub t_q: f64,
}

impl Default for RelatedConfig {
    fn default() -> Self {
        RelatedConfig { k: 10, t_q: 0.92 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvidenceConfig {
    pub top_k: usize,
    /// Irrelevance threshold; unset means the 25th percentile of each
    /// question's retrieval scores.
    pub t_doc: Option<f64>,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        EvidenceConfig {
            top_k: 3,
            t_doc: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    /// "synthetic", "fixture", or "http".
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub requests_per_minute: u32,
    pub endpoint: String,
    pub api_key_env: String,
    /// Record every response into the fixtures file.
    pub record_fixtures: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            provider: "synthetic".to_string(),
            model: "synthetic-v1".to_string(),
            temperature: 0.0,
            max_tokens: 1024,
            requests_per_minute: 60,
            endpoint: String::new(),
            api_key_env: String::new(),
            record_fixtures: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxiomsConfig {
    pub enabled: Vec<u8>,
    /// Hard negatives sampled per post for axiom 1.
    pub axiom1_negatives: usize,
    /// Per-pair upvote gap for axiom 0; null disables the per-pair rule.
    pub per_pair_gap_ratio: Option<f64>,
    pub utilization_ngram: usize,
    pub utilization_low: f64,
    pub utilization_high: f64,
}

impl Default for AxiomsConfig {
    fn default() -> Self {
        AxiomsConfig {
            enabled: vec![0, 1, 2, 3, 4, 5],
            axiom1_negatives: 4,
            per_pair_gap_ratio: Some(1.3),
            utilization_ngram: 2,
            utilization_low: 0.35,
            utilization_high: 1.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Strategy for pairs lacking upvotes on both sides: "upvote_ratio"
    /// (generated pairs fall back to the fixed constant), "fixed"
    /// (everything gets the constant), or "ai_feedback" (critique-then-score
    /// margins for generated pairs, with rejection under the minimum gap).
    pub mode: MarginMode,
    pub fixed_value: f64,
    pub min_score_gap: i64,
    pub scale: f64,
    pub cap: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        let spec = MarginSpec::default();
        MarginConfig {
            mode: MarginMode::UpvoteRatio,
            fixed_value: spec.fixed_value,
            min_score_gap: spec.min_score_gap,
            scale: spec.scale,
            cap: spec.cap,
        }
    }
}

impl MarginConfig {
    pub fn spec(&self, mode: MarginMode) -> MarginSpec {
        MarginSpec {
            mode,
            fixed_value: self.fixed_value,
            min_score_gap: self.min_score_gap,
            scale: self.scale,
            cap: self.cap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub threshold: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig { threshold: 0.70 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainStageConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub hash_bits: u8,
    pub evidence_dropout: f64,
    pub l2: f64,
    pub parallel: bool,
    /// Fraction of questions held out of training for evaluation.
    pub holdout_fraction: f64,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        TrainStageConfig {
            learning_rate: 0.5,
            warmup_steps: 100,
            total_steps: 4000,
            hash_bits: 18,
            evidence_dropout: 0.5,
            l2: 0.0,
            parallel: false,
            holdout_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hard_negatives_per_task: usize,
    pub ndcg_cutoff: Option<usize>,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hard_negatives_per_task: 5,
            ndcg_cutoff: None,
            histogram_bins: 30,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus.gap_ratio <= 1.0 {
            return Err(Error::config("corpus.gap_ratio must exceed 1"));
        }
        self.corpus.format.parse::<crate::corpus::ArchiveFormat>()?;
        if !(0.0..1.0).contains(&self.train.holdout_fraction) {
            return Err(Error::config("train.holdout_fraction must be in [0, 1)"));
        }
        if self.train.hash_bits == 0 || self.train.hash_bits > 28 {
            return Err(Error::config("train.hash_bits must be in 1..=28"));
        }
        if self.axioms.utilization_low >= self.axioms.utilization_high {
            return Err(Error::config("utilization bounds must be ordered"));
        }
        match self.llm.provider.as_str() {
            "synthetic" | "fixture" | "http" => {}
            other => return Err(Error::config(format!("unknown llm provider: {other}"))),
        }
        match self.embed.provider.as_str() {
            "offline" | "http" => {}
            other => return Err(Error::config(format!("unknown embed provider: {other}"))),
        }
        if self.llm.provider == "fixture" && self.paths.fixtures.is_none() {
            return Err(Error::config("llm.provider = fixture requires paths.fixtures"));
        }
        if self.offline && self.llm.provider == "http" && self.paths.fixtures.is_none() {
            return Err(Error::config(
                "offline mode needs paths.fixtures to replace the http provider",
            ));
        }
        for axiom in &self.axioms.enabled {
            if *axiom > 5 {
                return Err(Error::config(format!("unknown axiom {axiom}")));
            }
        }
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(name)
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.paths.work_dir.join(format!("{stage}.manifest.json"))
    }
}

/// Read a config file (TOML) and apply command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, offline: bool) -> Result<PipelineConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: PipelineConfig =
        toml::from_str(&raw).map_err(|e| Error::config(format!("bad config: {e}")))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if offline {
        config.offline = true;
    }
    if config.offline {
        if config.embed.provider == "http" {
            config.embed.provider = "offline".to_string();
        }
        if config.llm.provider == "http" {
            config.llm.provider = "fixture".to_string();
        }
    }
    config.validate()?;
    Ok(config)
}
