//! Run configuration files and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use egclmil::bagdata::Task;
use egclmil::losses::{ExpertPairSet, LossConfig, LossMode};
use egclmil::model::ModelSettings;
use egclmil::train::{Experiment, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainMode {
    #[default]
    Native,
    Macenko,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainSettings {
    pub mode: StainMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Cohort manifest of native-stain embeddings.
    pub cohort: PathBuf,
    /// Cohort manifest of embeddings from Macenko-normalized patches.
    #[serde(default)]
    pub cohort_macenko: Option<PathBuf>,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_task() -> Task {
    Task::SevenClass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub stain: StainSettings,
    pub paths: PathsConfig,
    /// JSON file of class-name pairs; its own gamma is superseded by
    /// `loss.gamma`.
    #[serde(default)]
    pub expert_pairs: Option<PathBuf>,
}

/// Flag values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub mode: Option<LossMode>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub runs_dir: Option<PathBuf>,
}

/// Parses a JSON file into `T`; errors name the file and the offending
/// field path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        if field == "." {
            CliError::Config(format!("{}: {}", path.display(), e.inner()))
        } else {
            CliError::Config(format!("{}: field `{field}`: {}", path.display(), e.inner()))
        }
    })?;
    de.end()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(value)
}

fn absolute(base: &Path, p: &Path) -> Result<PathBuf, CliError> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).map_err(|e| CliError::Config(format!("{}: {e}", joined.display())))
}

impl RunConfigFile {
    /// Loads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.cohort = absolute(base, &cfg.paths.cohort)?;
        if let Some(p) = &cfg.paths.cohort_macenko {
            cfg.paths.cohort_macenko = Some(absolute(base, p)?);
        }
        cfg.paths.runs_dir = absolute(base, &cfg.paths.runs_dir)?;
        if let Some(p) = &cfg.expert_pairs {
            cfg.expert_pairs = Some(absolute(base, p)?);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(task) = o.task {
            self.task = task;
        }
        if let Some(mode) = o.mode {
            self.loss.mode = mode;
        }
        if let Some(lambda) = o.lambda {
            self.loss.lambda = lambda;
        }
        if let Some(gamma) = o.gamma {
            self.loss.gamma = gamma;
        }
        if let Some(dir) = &o.runs_dir {
            self.paths.runs_dir = absolute(Path::new("."), dir)?;
        }
        Ok(())
    }

    /// Checks every section that does not need the cohort.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(CliError::Config(format!("run_id {id:?} is not a plain directory name")));
            }
        }
        if self.stain.mode == StainMode::Macenko && self.paths.cohort_macenko.is_none() {
            return Err(CliError::Config(
                "stain.mode is macenko but paths.cohort_macenko is not set".into(),
            ));
        }
        Ok(())
    }

    pub fn default_run_id(&self) -> String {
        format!(
            "task{}_{}_{}_lambda{}_seed{}",
            self.task.n_classes(),
            self.model.kind,
            self.loss.mode,
            self.loss.lambda,
            self.train.seed
        )
    }

    /// Fills the run id so that the echoed config is complete.
    pub fn resolve_run_id(&mut self) {
        if self.run_id.is_none() {
            self.run_id = Some(self.default_run_id());
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.default_run_id())
    }

    /// Manifest selected by the stain mode.
    pub fn cohort_path(&self) -> Result<&Path, CliError> {
        match self.stain.mode {
            StainMode::Native => Ok(&self.paths.cohort),
            StainMode::Macenko => self
                .paths
                .cohort_macenko
                .as_deref()
                .ok_or_else(|| CliError::Config("paths.cohort_macenko is not set".into())),
        }
    }

    /// Expert pairs resolved against the task's class names, with
    /// `loss.gamma`.
    pub fn expert_pairs(&self, class_names: &[String]) -> Result<ExpertPairSet, CliError> {
        let pairs = match &self.expert_pairs {
            Some(path) => ExpertPairSet::load(path, class_names)
                .and_then(|p| p.with_gamma(self.loss.gamma)),
            None => ExpertPairSet::default_for(class_names, self.loss.gamma),
        };
        pairs.map_err(|e| CliError::Config(e.to_string()))
    }

    /// Experiment for the configured mode. Pairs are resolved when
    /// `need_pairs` is set or the mode is EGCL.
    pub fn experiment(&self, class_names: &[String], need_pairs: bool) -> Result<Experiment, CliError> {
        let pairs = if need_pairs || self.loss.mode == LossMode::Egcl {
            Some(self.expert_pairs(class_names)?)
        } else {
            None
        };
        let exp = Experiment {
            train: self.train.clone(),
            model: self.model,
            loss: self.loss,
            pairs,
        };
        exp.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(exp)
    }
}
