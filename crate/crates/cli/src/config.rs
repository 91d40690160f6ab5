//! Run configuration: a TOML file whose every field is optional, overridden
//! by command-line flags.
//!
//! ```toml
//! seed = 7
//! data = "data/"
//! out = "runs/a"
//! threads = 1
//!
//! [task]      # generator settings, see `TaskConfig`
//! dim = 16
//! noise_sigma = 0.1
//!
//! [split]
//! train = 2000
//! val = 250
//! test = 250
//! negative_fraction = 0.5
//!
//! [model]
//! heads = 1
//! order = "va"            # va | av | cat-va | cat-av
//!
//! [model.spatial]
//! tau = 0.005
//! target_aware = true
//! mode = "literal"        # literal | renormalize
//!
//! [train]     # see `TrainConfig`
//! batch_size = 64
//! epochs = 30
//!
//! [train.loss]
//! lambda = 0.5
//! csl_enabled = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tjstg_core::jtg::InterleaveOrder;
use tjstg_core::model::ModelConfig;
use tjstg_core::synth::{SplitCounts, TaskConfig, DEFAULT_NEGATIVE_FRACTION};
use tjstg_core::train::TrainConfig;
use tjstg_core::tsg::SpatialConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub task: TaskConfig,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub negative_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let c = SplitCounts::default();
        SplitSection { train: c.train, val: c.val, test: c.test, negative_fraction: DEFAULT_NEGATIVE_FRACTION }
    }
}

impl SplitSection {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train, val: self.val, test: self.test }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub heads: usize,
    pub order: InterleaveOrder,
    pub spatial: SpatialConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { heads: 1, order: InterleaveOrder::Va, spatial: SpatialConfig::default() }
    }
}

impl ModelSection {
    pub fn model_config(&self, dim: usize, answers: usize) -> ModelConfig {
        ModelConfig { dim, answers, heads: self.heads, spatial: self.spatial, order: self.order }
    }
}

/// The part of a run that determines its results; paths and thread counts
/// are left out so relocated runs produce identical artifacts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord<'a> {
    pub seed: u64,
    pub task: &'a TaskConfig,
    pub model: &'a ModelSection,
    pub train: &'a TrainConfig,
    pub stage2_only: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Contract(m) => CliError::Contract(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Contract(format!("invalid config: {}", e.message().trim())))
    }

    pub fn from_option(path: Option<&Path>) -> Result<RunConfig, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.threads == Some(0) {
            return Err(CliError::Contract("threads: must be >= 1".into()));
        }
        let s = &self.split;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return Err(CliError::Contract("split: train, val and test must each be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&s.negative_fraction) {
            return Err(CliError::Contract(format!(
                "split.negative_fraction: must be in [0, 1], got {}",
                s.negative_fraction
            )));
        }
        self.task.validate().map_err(CliError::from)?;
        self.train.validate().map_err(|e| CliError::Contract(format!("train.{}", strip(&e))))?;
        self.model.model_config(self.task.dim, self.task.answers).validate().map_err(|e| CliError::Contract(format!("model: {}", strip(&e))))?;
        Ok(())
    }
}

fn strip(e: &tjstg_core::Error) -> String {
    let s = e.to_string();
    s.strip_prefix("contract violation: ").map(str::to_string).unwrap_or(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tjstg_core::tsg::GroundingMode;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn partial_sections_fill_in() {
        let c = RunConfig::parse(
            "seed = 3\n[task]\ndim = 8\n[model]\norder = \"cat-av\"\n[model.spatial]\nmode = \"renormalize\"\n[train.loss]\ncsl_enabled = false\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.task.dim, 8);
        assert_eq!(c.task.segments, TaskConfig::default().segments);
        assert_eq!(c.model.order, InterleaveOrder::CatAv);
        assert_eq!(c.model.spatial.mode, GroundingMode::Renormalize);
        assert_eq!(c.model.spatial.tau, 0.005);
        assert!(!c.train.loss.csl_enabled);
        assert_eq!(c.train.loss.lambda, 0.5);
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = RunConfig::parse("[train]\nbatchsize = 3\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.train.lr0 = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.lr0"));
        let mut c = RunConfig::default();
        c.model.spatial.tau = -0.5;
        assert!(c.validate().unwrap_err().to_string().contains("tau"));
        let mut c = RunConfig::default();
        c.task.noise_sigma = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("noise_sigma"));
    }
}
