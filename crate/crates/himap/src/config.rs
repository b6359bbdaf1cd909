//! Experiment configuration files (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use himap_core::model::{ModelConfig, TrainSpec};
use himap_core::perturb::{parse_windows, InterventionKind};
use himap_core::prune::{parse_schedule, PruneSchedule};
use himap_core::task::SyntheticTaskSpec;
use serde::{Deserialize, Serialize};

/// A schedule given inline or by name (a preset or the compact `K:R,K:R` form).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleRef {
    Named(String),
    Explicit(PruneSchedule),
}

impl ScheduleRef {
    pub fn resolve(&self) -> Result<PruneSchedule> {
        match self {
            ScheduleRef::Named(name) => {
                parse_schedule(name).with_context(|| format!("unknown schedule `{name}`"))
            }
            ScheduleRef::Explicit(s) => Ok(s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kinds: Vec<InterventionKind>,
    /// Comma-separated windows, e.g. `first2,last2,3-5`.
    pub windows: String,
    /// Seed for `v_random_block`; falls back to the global seed.
    #[serde(default)]
    pub random_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub train: TrainSpec,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub schedule: ScheduleRef,
    #[serde(default)]
    pub intervention: Option<InterventionSpec>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Seed 42 throughout, 4000 training and 200 evaluation examples.
    pub fn reference() -> Self {
        Self {
            model: ModelConfig::reference(),
            task: SyntheticTaskSpec::default(),
            train: TrainSpec::reference(),
            train_examples: 4000,
            eval_examples: 200,
            schedule: ScheduleRef::Named("toy-aggressive".into()),
            intervention: Some(InterventionSpec {
                kinds: vec![InterventionKind::VtBlock, InterventionKind::VvBlock],
                windows: "first2,last2".into(),
                random_seed: None,
            }),
            output_dir: PathBuf::from("runs/reference"),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.task.validate().context("task")?;
        self.task
            .check_vocab(self.model.vocab)
            .context("task vocabulary")?;
        if self.task.sequence_len() > self.model.max_seq {
            bail!(
                "task sequences have {} tokens, model max_seq is {}",
                self.task.sequence_len(),
                self.model.max_seq
            );
        }
        self.train.validate().context("train")?;
        if self.train_examples == 0 || self.eval_examples == 0 {
            bail!("train_examples and eval_examples must be at least 1");
        }
        self.schedule
            .resolve()?
            .validate(Some(self.model.layers))
            .context("schedule")?;
        if let Some(iv) = &self.intervention {
            if iv.kinds.is_empty() {
                bail!("intervention lists no kinds");
            }
            parse_windows(&iv.windows, self.model.layers).context("intervention windows")?;
        }
        Ok(())
    }

    pub fn random_seed(&self) -> u64 {
        self.intervention
            .as_ref()
            .and_then(|iv| iv.random_seed)
            .unwrap_or(self.seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("malformed config {}", path.display()))?;
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }
}
