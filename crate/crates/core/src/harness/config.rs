use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::{NetworkSpec, TrainConfig};
use crate::proposals::DEFAULT_MIN_BOX_SIDE;
use crate::segmentation::SegParams;
use crate::svm::SvmConfig;

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "SCNN_DATA_ROOT";

/// Every configuration key with its default value. Optional keys are
/// commented out.
pub const CONFIG_REFERENCE: &str = include_str!("config_reference.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub segmentation: SegmentationConfig,
    pub proposals: ProposalConfig,
    pub surrogate: SurrogateConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub svm: SvmConfig,
    pub experiment: SweepConfig,
    pub transfer: TransferConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub stl10: Option<PathBuf>,
    pub cifar10: Option<PathBuf>,
    pub cifar100: Option<PathBuf>,
    pub unlabeled_limit: Option<usize>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub folds: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub sigma: f32,
    pub k: f32,
    pub min_size: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        let p = SegParams::default();
        Self {
            sigma: p.sigma,
            k: p.k,
            min_size: p.min_size,
        }
    }
}

impl SegmentationConfig {
    pub fn params(&self) -> SegParams {
        SegParams {
            sigma: self.sigma,
            k: self.k,
            min_size: self.min_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub min_box_side: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            min_box_side: DEFAULT_MIN_BOX_SIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub classes: usize,
    pub holdout_fraction: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            classes: 20000,
            holdout_fraction: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            preset: "64-128-256_512".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub classes: Vec<usize>,
    pub architectures: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            classes: vec![5000, 10000, 15000, 20000, 25000, 30000],
            architectures: vec!["64-128-256_512".into()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            output_dir: PathBuf::from("scnn-out"),
            data: DataConfig::default(),
            segmentation: SegmentationConfig::default(),
            proposals: ProposalConfig::default(),
            surrogate: SurrogateConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            svm: SvmConfig::default(),
            experiment: SweepConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text. Paths are left as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for section in ["train", "svm"] {
            if let Some(toml::Value::Table(t)) = raw.get(section) {
                for key in ["seed", "threads"] {
                    if t.contains_key(key) {
                        return Err(Error::Config(format!(
                            "[{section}] {key} is not configurable per stage; set the top-level {key}"
                        )));
                    }
                }
            }
        }
        let cfg: Self = raw.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.root,
            &mut self.data.stl10,
            &mut self.data.cifar10,
            &mut self.data.cifar100,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation
            .params()
            .validate()
            .map_err(|_| Error::Config(format!("invalid [segmentation] {:?}", self.segmentation)))?;
        if self.proposals.min_box_side == 0 {
            return Err(Error::Config("proposals.min_box_side must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.surrogate.holdout_fraction) {
            return Err(Error::Config(format!(
                "surrogate.holdout_fraction {} outside [0, 1)",
                self.surrogate.holdout_fraction
            )));
        }
        self.check_classes(self.surrogate.classes)?;
        let mut archs = self.experiment.architectures.clone();
        archs.push(self.network.preset.clone());
        for a in &archs {
            NetworkSpec::preset(a, 2)?;
        }
        if self.data.folds.as_ref().is_some_and(|f| f.is_empty()) {
            return Err(Error::Config("data.folds is empty".into()));
        }
        self.train.validate().map_err(|e| Error::Config(format!("[train] {e}")))?;
        self.svm.validate()?;
        Ok(())
    }

    /// A class count must be positive and no larger than the unlabeled limit.
    pub fn check_classes(&self, c: usize) -> Result<()> {
        if c == 0 {
            return Err(Error::Config("class count must be at least 1".into()));
        }
        match self.data.unlabeled_limit {
            Some(limit) if limit < c => Err(Error::Config(format!(
                "data.unlabeled_limit {limit} leaves fewer source images than the {c} classes requested"
            ))),
            _ => Ok(()),
        }
    }

    /// Dataset root: `data.root`, then `$SCNN_DATA_ROOT`, then `data`.
    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn stl10_dir(&self) -> PathBuf {
        self.data.stl10.clone().unwrap_or_else(|| self.data_root().join("stl10_binary"))
    }

    pub fn cifar10_dir(&self) -> PathBuf {
        self.data
            .cifar10
            .clone()
            .unwrap_or_else(|| self.data_root().join("cifar-10-batches-bin"))
    }

    pub fn cifar100_dir(&self) -> PathBuf {
        self.data
            .cifar100
            .clone()
            .unwrap_or_else(|| self.data_root().join("cifar-100-binary"))
    }

    /// Training settings with the top-level seed and thread count applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.train.clone()
        }
    }

    pub fn svm_config(&self) -> SvmConfig {
        SvmConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.svm.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_lists_the_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str(CONFIG_REFERENCE).unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "bogus = 1",
            "[train]\nseed = 3",
            "[svm]\nthreads = 2",
            "[network]\npreset = \"1-2-3_4\"",
            "[surrogate]\nholdout_fraction = 1.0",
            "[surrogate]\nclasses = 50\n[data]\nunlabeled_limit = 10",
            "[surrogate]\nclasses = 0",
            "[train]\nbatch_size = 0",
            "[segmentation]\nk = -1.0",
            "[data]\nfolds = []",
            "seed = \"x\"",
        ] {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config(_)) => {}
                other => panic!("{text:?}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn top_level_seed_and_threads_reach_stages() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\nthreads = 3").unwrap();
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(cfg.svm_config().threads, 3);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "output_dir = \"out\"\n[data]\nroot = \"d\"\ncifar10 = \"/abs/c10\"").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.stl10_dir(), dir.path().join("d").join("stl10_binary"));
        assert_eq!(cfg.cifar10_dir(), PathBuf::from("/abs/c10"));
    }
}
