//! Run configuration shared by every subcommand.
//!
//! A single JSON file. Relative paths resolve against the directory holding
//! the file. The API credential never lives here; it comes from
//! `REWRITE_API_KEY`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rewrite_forge_core::mixture::DEFAULT_TOLERANCE;
use rewrite_forge_core::rewrite::RewriteError;
use rewrite_forge_core::{
    CountingScheme, QualityTier, RetryPolicy, RewriteStyle, SamplingParams, SaturationParams, StyleTemplate,
    TemplateSet, TierPolicy,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientConfig, RateLimit};
use crate::job::RewriteSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is not valid: {detail}")]
    Parse { path: String, detail: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Token budget of each quality-tier subset.
    pub subset_budget: u64,
    /// Training budget of each condition. Defaults to four times the subset budget.
    #[serde(default)]
    pub target_budget: Option<u64>,
    /// Allowed deviation from the target, as a fraction of it.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl Budgets {
    pub fn target(&self) -> u64 {
        self.target_budget.unwrap_or(self.subset_budget.saturating_mul(4))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriteConfig {
    pub endpoint: String,
    pub model: String,
    pub styles: Vec<RewriteStyle>,
    pub sampling: SamplingParams,
    pub rate: RateLimit,
    pub retry: RetryPolicy,
    pub timeout_secs: f64,
    pub concurrency: usize,
    pub failure_ceiling: f64,
    pub max_input_tokens: u64,
    /// Replacements for the built-in per-style templates.
    pub templates: Vec<StyleTemplate>,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            model: "Qwen/Qwen2.5-7B-Instruct".into(),
            styles: RewriteStyle::ALL.to_vec(),
            sampling: SamplingParams::default(),
            rate: RateLimit::default(),
            retry: RetryPolicy::default(),
            timeout_secs: 120.0,
            concurrency: 16,
            failure_ceiling: 0.05,
            max_input_tokens: 8192,
            templates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub shard_tokens: u64,
    pub reshuffle_epochs: bool,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            shard_tokens: 1 << 20,
            reshuffle_epochs: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub partition: u64,
    pub rewrite: u64,
    pub mixture: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            partition: 17,
            rewrite: 23,
            mixture: 29,
        }
    }
}

impl Seeds {
    /// `--seed` sets every stage seed from one value.
    pub fn from_one(seed: u64) -> Self {
        Self {
            partition: seed,
            rewrite: seed.wrapping_add(1),
            mixture: seed.wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// JSON array of task specs.
    pub task_specs: Option<PathBuf>,
    /// JSON Lines of task results.
    pub results: Option<PathBuf>,
    /// Overall curve files, one per model scale.
    pub curves: Vec<PathBuf>,
    /// Per-category curve files, one per model scale.
    pub category_curves: Vec<PathBuf>,
    /// Checkpoint at which condition gaps are reported.
    pub gap_at_tokens: f64,
    pub saturation: SaturationParams,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            task_specs: None,
            results: None,
            curves: Vec::new(),
            category_curves: Vec::new(),
            gap_at_tokens: 30.0,
            saturation: SaturationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_path: PathBuf,
    #[serde(default)]
    pub counting_scheme: CountingScheme,
    #[serde(default)]
    pub tier_policy: TierPolicy,
    #[serde(default = "default_tiers")]
    pub tiers: Vec<QualityTier>,
    pub budgets: Budgets,
    #[serde(default)]
    pub rewrite: RewriteConfig,
    #[serde(default)]
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
    /// Directory the config was loaded from; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_tiers() -> Vec<QualityTier> {
    vec![QualityTier::High, QualityTier::Low]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.resolve(&self.corpus_path)
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Checks values and that every referenced input exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let must_exist = |label: &str, p: &Path| -> Result<(), ConfigError> {
            let full = self.resolve(p);
            if full.is_file() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!(
                    "{label} {} does not exist",
                    full.display()
                )))
            }
        };
        must_exist("corpus_path", &self.corpus_path)?;
        if let CountingScheme::VocabularyFile { path } = &self.counting_scheme {
            must_exist("vocabulary file", Path::new(path))?;
        }
        self.tier_policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tiers.is_empty() {
            return bad("tiers is empty".into());
        }
        if self.tiers.contains(&QualityTier::Unassigned) {
            return bad("tiers may only list high and low".into());
        }
        if self.budgets.subset_budget == 0 {
            return bad("budgets.subset_budget must be positive".into());
        }
        if self.budgets.target() == 0 {
            return bad("budgets.target_budget must be positive".into());
        }
        let tol = self.budgets.tolerance;
        if !(tol.is_finite() && (0.0..1.0).contains(&tol)) {
            return bad(format!("budgets.tolerance must be within [0, 1), got {tol}"));
        }
        if !(self.rewrite.timeout_secs.is_finite() && self.rewrite.timeout_secs > 0.0) {
            return bad("rewrite.timeout_secs must be positive".into());
        }
        if self.rewrite.endpoint.is_empty() {
            return bad("rewrite.endpoint is empty".into());
        }
        self.rewrite_settings()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.mixture.shard_tokens == 0 {
            return bad("mixture.shard_tokens must be positive".into());
        }
        for p in [&self.evaluation.task_specs, &self.evaluation.results]
            .into_iter()
            .flatten()
        {
            must_exist("evaluation input", p)?;
        }
        for p in self.evaluation.curves.iter().chain(&self.evaluation.category_curves) {
            must_exist("curve file", p)?;
        }
        let eps = self.evaluation.saturation.epsilon;
        if !(eps.is_finite() && eps > 0.0) || self.evaluation.saturation.min_tail == 0 {
            return bad("evaluation.saturation needs epsilon > 0 and min_tail >= 1".into());
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateSet, RewriteError> {
        TemplateSet::with_overrides(self.rewrite.templates.iter().cloned())
    }

    pub fn rewrite_settings(&self) -> Result<RewriteSettings, ConfigError> {
        let r = &self.rewrite;
        Ok(RewriteSettings {
            model: r.model.clone(),
            styles: r.styles.clone(),
            sampling: r.sampling.clone(),
            templates: self.templates().map_err(|e| ConfigError::Invalid(e.to_string()))?,
            retry: r.retry.clone(),
            max_input_tokens: r.max_input_tokens,
            failure_ceiling: r.failure_ceiling,
            attempt_seed: self.seeds.rewrite,
            concurrency: r.concurrency,
            counting_scheme: self.counting_scheme.clone(),
        })
    }

    pub fn client_config(&self) -> ClientConfig {
        let mut c = ClientConfig::new(self.rewrite.endpoint.clone()).with_env_key();
        c.timeout = Duration::from_secs_f64(self.rewrite.timeout_secs);
        c.rate = self.rewrite.rate.clone();
        c
    }
}
