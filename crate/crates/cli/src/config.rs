//! Experiment files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use noisy_fedavg::analysis::BoundVariant;
use noisy_fedavg::engine::RunConfig;
use noisy_fedavg::policy::PolicyKind;
use noisy_fedavg::task::{make_task, QuadraticTask, TaskFile, TaskSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Generate(TaskSpec),
    /// Path to a task JSON file, relative to the experiment file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// Seed-mean squared distance below the convergence bound at every round.
    Bound {
        #[serde(default)]
        variant: Option<BoundVariant>,
        /// Radius of the ball over which the gradient bound is taken; the
        /// largest observed distance when absent.
        #[serde(default)]
        radius: Option<f64>,
    },
    /// Log-log slope of the seed-mean over rounds `from..=to` within `[min, max]`.
    Slope { from: usize, to: usize, min: f64, max: f64 },
    /// Log-log slope over the final third above `min`.
    Plateau { min: f64 },
}

fn default_replicas() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub task: TaskSource,
    pub run: RunConfig,
    /// Replica `i` runs with seed `run.seed + i`.
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let exp: Self = serde_json::from_str(text)?;
        if exp.replicas == 0 {
            bail!("replicas must be at least 1");
        }
        Ok(exp)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut exp = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        // task files are resolved against the experiment file's directory
        if let TaskSource::File(p) = &mut exp.task {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(exp)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("experiment serializes")
    }

    pub fn build_task(&self) -> anyhow::Result<QuadraticTask> {
        Ok(match &self.task {
            TaskSource::Generate(spec) => make_task(spec)?,
            TaskSource::File(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading task {}", p.display()))?;
                let file: TaskFile =
                    serde_json::from_str(&text).with_context(|| format!("parsing task {}", p.display()))?;
                QuadraticTask::from_file(file)?
            }
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicas as u64)
            .map(|i| self.run.seed.wrapping_add(i))
            .collect()
    }

    /// Bound variant implied by the policy and participation.
    pub fn default_variant(&self) -> BoundVariant {
        match self.run.policy {
            PolicyKind::Theorem1MtFull {} => BoundVariant::Thm1,
            PolicyKind::Theorem2MtPartial {} => BoundVariant::Thm2,
            PolicyKind::Theorem3Mdt { .. } => BoundVariant::Thm3,
            _ if self.run.participants < self.run.clients => BoundVariant::Thm2,
            _ => BoundVariant::Thm1,
        }
    }

    pub fn nu(&self) -> Option<f64> {
        match self.run.policy {
            PolicyKind::Theorem3Mdt { nu } => Some(nu),
            _ => None,
        }
    }
}
