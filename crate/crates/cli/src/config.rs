use std::path::{Path, PathBuf};

use mcfrcl::data::{SyntheticSpec, DEFAULT_CLASS_PAIRS};
use mcfrcl::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "MCFRCL_DATA_DIR";

pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    #[default]
    Synthetic,
}

impl DatasetKind {
    /// Subdirectory looked up under `MCFRCL_DATA_DIR`.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fashion-mnist",
            DatasetKind::Synthetic => "",
        }
    }
}

/// Everything needed to reproduce a set of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Used when `dataset` is `synthetic`.
    pub synthetic: SyntheticSpec,
    /// Directory holding the four IDX files. Relative paths resolve against
    /// the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Classes of each task, for IDX datasets.
    pub class_groups: Vec<Vec<usize>>,
    /// Keep at most this many training examples per task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Seed of the `train_limit` subset, independent of the training seed.
    pub subset_seed: u64,
    /// Number of seeds; run `i` uses `train.seed + i`.
    pub runs: usize,
    pub plot: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::default(),
            synthetic: SyntheticSpec::default(),
            data_dir: None,
            class_groups: DEFAULT_CLASS_PAIRS.iter().map(|p| p.to_vec()).collect(),
            train_limit: None,
            subset_seed: 0,
            runs: 1,
            plot: true,
            output_dir: None,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs == 0 {
            return Err(CliError::Config("`runs` must be >= 1".into()));
        }
        if self.train_limit == Some(0) {
            return Err(CliError::Config("`train_limit` must be >= 1".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset != DatasetKind::Synthetic {
            let dir = self
                .data_dir
                .as_ref()
                .ok_or_else(|| CliError::Config(format!("no data directory for {:?}", self.dataset)))?;
            for name in IDX_FILES {
                let path = dir.join(name);
                if !path.is_file() {
                    return Err(CliError::Config(format!("missing data file {}", path.display())));
                }
            }
        }
        Ok(())
    }

    /// JSON of this config without the output directory; what reports embed.
    pub fn echo(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes")
    }

    /// The config of run `i`: one run with the derived seed.
    pub fn for_run(&self, i: usize) -> ExperimentConfig {
        let mut c = self.clone();
        c.runs = 1;
        c.train.seed = self.train.seed.wrapping_add(i as u64);
        c
    }
}

fn locate_data_dir(kind: DatasetKind, configured: Option<PathBuf>, base: &Path) -> Option<PathBuf> {
    if kind == DatasetKind::Synthetic {
        return configured;
    }
    if let Some(dir) = configured {
        return Some(if dir.is_relative() { base.join(dir) } else { dir });
    }
    let root = PathBuf::from(std::env::var_os(DATA_DIR_ENV)?);
    let nested = root.join(kind.dir_name());
    Some(if nested.join(IDX_FILES[0]).is_file() {
        nested
    } else {
        root
    })
}

/// Parses and validates a config document. `base` anchors relative data paths.
pub fn parse_config(json: &str, base: &Path) -> Result<ExperimentConfig, CliError> {
    let mut config: ExperimentConfig =
        serde_json::from_str(json).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    config.data_dir = locate_data_dir(config.dataset, config.data_dir.take(), base);
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
