//! The run configuration: one strict JSON file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rmd_core::diffusion::{
    DiffusionSchedule, PosteriorRule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_INFER_STEPS, DEFAULT_STEPS,
};
use rmd_core::evaluator::{EvaluatorConfig, EvaluatorTrainConfig};
use rmd_core::mixture::{GridSpec, TailConfig};
use rmd_core::smt::SmtConfig;
use rmd_core::synthetic::SyntheticConfig;
use rmd_core::text::ProviderConfig;
use rmd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const SEED_ENV: &str = "REMODIFF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Respaced sampling steps.
    pub n_infer: usize,
    /// Use the literal posterior-mean expression instead of the standard one.
    pub literal_posterior: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            n_infer: DEFAULT_INFER_STEPS,
            literal_posterior: false,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> rmd_core::Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn rule(&self) -> PosteriorRule {
        if self.literal_posterior {
            PosteriorRule::Transcribed
        } else {
            PosteriorRule::Standard
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSection {
    pub model: EvaluatorConfig,
    pub train: EvaluatorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSection {
    pub grid: GridSpec,
    /// Training captions used as the FID evaluation set.
    pub eval_prompts: usize,
    pub tail: TailConfig,
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            eval_prompts: 64,
            tail: TailConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generated samples per test prompt (≥ 2 enables multimodality).
    pub samples_per_prompt: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples_per_prompt: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root holding `train/` and `test/` splits.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub provider: ProviderConfig,
    pub lambda: f64,
    pub model: SmtConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub evaluator: EvaluatorSection,
    pub mixture: MixtureSection,
    pub eval: EvalSection,
    pub synthetic: SyntheticConfig,
    /// Directory relative paths resolve against (the config file's directory).
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            provider: ProviderConfig::Stub {
                seed: 0,
                dim: rmd_core::text::STUB_DIM,
            },
            lambda: rmd_core::retrieval::DEFAULT_LAMBDA,
            model: SmtConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            evaluator: EvaluatorSection::default(),
            mixture: MixtureSection::default(),
            eval: EvalSection::default(),
            synthetic: SyntheticConfig::default(),
            base: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config; relative paths resolve against the
    /// config file's directory. `REMODIFF_SEED` overrides `seed`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        cfg.base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        cfg.apply_seed();
        cfg.evaluator.model.pose_dim = cfg.model.pose_dim();
        cfg.evaluator.model.text_dim = cfg.model.text_dim;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        self.train.seed = rmd_core::seed::derive(self.seed, "config/train");
        self.evaluator.train.seed = rmd_core::seed::derive(self.seed, "config/evaluator");
        self.mixture.tail.seed = rmd_core::seed::derive(self.seed, "config/tail");
        self.synthetic.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: rmd_core::Error| UsageError(format!("invalid config: {e}"));
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.schedule.build().map_err(usage)?;
        if self.schedule.n_infer == 0 || self.schedule.n_infer > self.schedule.steps {
            bail!(UsageError(format!(
                "schedule.n_infer must be in 1..={}",
                self.schedule.steps
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(UsageError(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.synthetic.joints != self.model.joints {
            bail!(UsageError(format!(
                "synthetic.joints ({}) differs from model.joints ({})",
                self.synthetic.joints, self.model.joints
            )));
        }
        if self.mixture.eval_prompts < 2 {
            bail!(UsageError("mixture.eval_prompts must be at least 2".into()));
        }
        self.mixture.grid.axis().map_err(usage)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn train_dir(&self) -> PathBuf {
        self.dataset_dir().join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.dataset_dir().join("test")
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.resolve(&self.output_dir).join(name)
    }

    pub fn index_path(&self) -> PathBuf {
        self.out("index.rmix")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out("model.rmck")
    }

    pub fn evaluator_path(&self) -> PathBuf {
        self.out("evaluator.rmck")
    }

    pub fn mixture_path(&self) -> PathBuf {
        self.out("mixture.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out("metrics.json")
    }

    /// The provider config with any fixture path resolved.
    pub fn provider_config(&self) -> ProviderConfig {
        match &self.provider {
            ProviderConfig::Fixture { path } => ProviderConfig::Fixture { path: self.resolve(path) },
            other => other.clone(),
        }
    }
}

/// Parses the config path argument, mapping a missing file to a usage error.
pub fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}
