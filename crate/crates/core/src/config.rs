//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, GenOptions, TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::nn::LmConfig;
use crate::train::TrainConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "ATTEMPT_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    #[default]
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    #[serde(default)]
    pub role: TaskRole,
    /// Synthetic generator; exclusive with `path`.
    pub kind: Option<TaskKind>,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    /// JSONL dataset file.
    pub path: Option<PathBuf>,
}

fn default_size() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seed for backbone initialization and pretraining.
    #[serde(default)]
    pub lm_seed: u64,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: GenOptions,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    /// Backbone checkpoint; defaults to `<output_dir>/lm.ckpt`.
    pub lm_checkpoint: Option<PathBuf>,
    /// Bank prompt checkpoints; defaults to one per source task under `<output_dir>/prompts`.
    #[serde(default)]
    pub bank: Vec<PathBuf>,
    /// Pretrained attention module to start target training from.
    pub prior: Option<PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: default_output(),
            lm_seed: 0,
            lm: LmConfig::default(),
            train: TrainConfig::default(),
            data: GenOptions::default(),
            tasks: Vec::new(),
            lm_checkpoint: None,
            bank: Vec::new(),
            prior: None,
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.train.validate(self.lm.model_dim)?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Config(format!("task `{}` listed twice", t.id)));
            }
            if t.kind.is_some() == t.path.is_some() {
                return Err(Error::Config(format!("task `{}` needs exactly one of `kind` or `path`", t.id)));
            }
        }
        if self.data.vocab_size != self.lm.vocab_size {
            return Err(Error::Config(format!(
                "data.vocab_size {} differs from lm.vocab_size {}",
                self.data.vocab_size, self.lm.vocab_size
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn lm_path(&self) -> PathBuf {
        match &self.lm_checkpoint {
            Some(p) => self.resolve(p),
            None => self.output_dir().join("lm.ckpt"),
        }
    }

    pub fn source_prompt_path(&self, task_id: &str) -> PathBuf {
        self.output_dir().join("prompts").join(format!("{task_id}.ckpt"))
    }

    pub fn bank_paths(&self) -> Vec<PathBuf> {
        if self.bank.is_empty() {
            self.tasks_with(TaskRole::Source).map(|t| self.source_prompt_path(&t.id)).collect()
        } else {
            self.bank.iter().map(|p| self.resolve(p)).collect()
        }
    }

    pub fn prior_path(&self) -> Option<PathBuf> {
        self.prior.as_deref().map(|p| self.resolve(p))
    }

    pub fn tasks_with(&self, role: TaskRole) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(move |t| t.role == role)
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("no task `{id}` in config")))
    }

    /// Fails with a resolution error naming the first missing input.
    pub fn require(what: &str, paths: &[PathBuf]) -> Result<()> {
        match paths.iter().find(|p| !p.is_file()) {
            Some(p) => Err(Error::Resolution {
                what: what.to_string(),
                path: p.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Checks that every dataset file exists.
    pub fn require_datasets<'a>(&self, tasks: impl IntoIterator<Item = &'a TaskSpec>) -> Result<()> {
        let files: Vec<PathBuf> = tasks
            .into_iter()
            .filter_map(|t| t.path.as_deref())
            .map(|p| self.resolve(p))
            .collect();
        Self::require("dataset", &files)
    }

    pub fn load_task(&self, spec: &TaskSpec) -> Result<TaskDataset> {
        let ds = match (&spec.kind, &spec.path) {
            (Some(kind), None) => data::gen_synthetic_task_with(*kind, spec.size, spec.seed, &self.data)?,
            (None, Some(path)) => data::load_jsonl(&self.resolve(path), self.lm.vocab_size, self.lm.max_len)?,
            _ => return Err(Error::Config(format!("task `{}` needs exactly one of `kind` or `path`", spec.id))),
        };
        Ok(ds.renamed(&spec.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
output_dir = "out"
bank = ["prompts/a.ckpt"]

[lm]
model_dim = 32
n_heads = 2
ff_dim = 64

[train]
epochs = 2
prompt_length = 4
bottleneck = 8

[[tasks]]
id = "copy"
kind = "copy"
size = 100

[[tasks]]
id = "rev"
role = "target"
path = "data/rev.jsonl"
"#;

    #[test]
    fn parses_and_resolves_relative_paths() {
        let cfg = ExperimentConfig::from_toml(TEXT, Path::new("/exp")).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.lm.model_dim, 32);
        assert_eq!(cfg.bank_paths(), [PathBuf::from("/exp/prompts/a.ckpt")]);
        assert_eq!(cfg.tasks_with(TaskRole::Target).count(), 1);
        if std::env::var(OUTPUT_DIR_ENV).is_err() {
            assert_eq!(cfg.lm_path(), PathBuf::from("/exp/out/lm.ckpt"));
        }
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/exp")).unwrap();
        assert_eq!(again.tasks, cfg.tasks);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["colour = 1", "[train]\nlearning_rate = 0.1", "[lm]\nwidth = 3", "[[tasks]]\nid='x'\nkind='copy'\nfoo=1"] {
            assert!(matches!(ExperimentConfig::from_toml(bad, Path::new(".")), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn task_needs_one_source() {
        let both = "[[tasks]]\nid='x'\nkind='copy'\npath='a.jsonl'";
        let neither = "[[tasks]]\nid='x'";
        for t in [both, neither] {
            assert!(ExperimentConfig::from_toml(t, Path::new(".")).is_err());
        }
    }

    #[test]
    fn missing_inputs_are_resolution_errors() {
        let cfg = ExperimentConfig::from_toml(TEXT, Path::new("/nonexistent")).unwrap();
        let err = ExperimentConfig::require("bank prompt", &cfg.bank_paths()).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }));
        assert!(cfg.require_datasets(&cfg.tasks).is_err());
    }
}
