//! Run configuration: built-in defaults, an optional TOML file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spnn::circuit::CircuitParams;
use spnn::phasor_net::{conv_stack, dense_stack};
use spnn::train::{DEFAULT_BATCH_SIZE, DEFAULT_INIT_GAIN};
use spnn::{Error, LayerSpec, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl DatasetName {
    pub fn default_epochs(self) -> usize {
        match self {
            DatasetName::Mnist => 20,
            DatasetName::Cifar10 => 30,
        }
    }

    /// `(channels, height, width)`.
    pub fn geometry(self) -> (usize, usize, usize) {
        match self {
            DatasetName::Mnist => (1, 28, 28),
            DatasetName::Cifar10 => (3, 32, 32),
        }
    }

    pub fn from_input_len(len: usize) -> Option<Self> {
        [DatasetName::Mnist, DatasetName::Cifar10].into_iter().find(|d| {
            let (c, h, w) = d.geometry();
            c * h * w == len
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Preset {
    #[serde(rename = "fc-mnist")]
    #[value(name = "fc-mnist")]
    FcMnist,
    #[serde(rename = "conv")]
    Conv,
}

impl Preset {
    pub fn layers(self, dataset: DatasetName, theta: f64) -> Vec<LayerSpec> {
        let (c, h, w) = dataset.geometry();
        let specs = match self {
            Preset::FcMnist => dense_stack(&[c * h * w, 512, 512, 10]),
            Preset::Conv => conv_stack(c, h, w, 10),
        };
        specs.into_iter().map(|s| s.with_threshold(theta)).collect()
    }
}

/// Circuit values that may be overridden on top of the defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitOverrides {
    pub period: Option<f64>,
    pub dt: Option<f64>,
    pub threshold: Option<f64>,
    pub n_cycles: Option<usize>,
}

impl CircuitOverrides {
    fn or(self, base: CircuitOverrides) -> Self {
        CircuitOverrides {
            period: self.period.or(base.period),
            dt: self.dt.or(base.dt),
            threshold: self.threshold.or(base.threshold),
            n_cycles: self.n_cycles.or(base.n_cycles),
        }
    }

    /// Parameters for period `T` with the remaining overrides applied.
    /// Returns whether the threshold was set explicitly.
    pub fn params(&self) -> Result<(CircuitParams, bool)> {
        let mut p = CircuitParams::with_period(self.period.unwrap_or(10.0));
        if let Some(dt) = self.dt {
            p.dt = dt;
        }
        if let Some(t) = self.threshold {
            p.threshold = t;
        }
        if let Some(n) = self.n_cycles {
            p.n_cycles = n;
        }
        p.validate()?;
        Ok((p, self.threshold.is_some()))
    }
}

/// Every field optional, as read from a file or the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub dataset: Option<DatasetName>,
    pub data_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub theta: Option<f64>,
    pub init_gain: Option<f64>,
    pub phase_shift_seed: Option<u64>,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub calibration_examples: Option<usize>,
    #[serde(default)]
    pub circuit: CircuitOverrides,
}

impl PartialConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("config file {}: {e}", path.display())))
    }

    /// Fields of `self` win over those of `base`.
    pub fn or(self, base: PartialConfig) -> Self {
        PartialConfig {
            dataset: self.dataset.or(base.dataset),
            data_dir: self.data_dir.or(base.data_dir),
            preset: self.preset.or(base.preset),
            epochs: self.epochs.or(base.epochs),
            batch_size: self.batch_size.or(base.batch_size),
            learning_rate: self.learning_rate.or(base.learning_rate),
            seed: self.seed.or(base.seed),
            theta: self.theta.or(base.theta),
            init_gain: self.init_gain.or(base.init_gain),
            phase_shift_seed: self.phase_shift_seed.or(base.phase_shift_seed),
            limit_train: self.limit_train.or(base.limit_train),
            limit_test: self.limit_test.or(base.limit_test),
            calibration_examples: self.calibration_examples.or(base.calibration_examples),
            circuit: self.circuit.or(base.circuit),
        }
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let dataset = self.dataset.unwrap_or(DatasetName::Mnist);
        let preset = self.preset.unwrap_or(match dataset {
            DatasetName::Mnist => Preset::FcMnist,
            DatasetName::Cifar10 => Preset::Conv,
        });
        let cfg = RunConfig {
            dataset,
            data_dir: self.data_dir.unwrap_or_else(default_data_dir),
            preset,
            epochs: self.epochs.unwrap_or(dataset.default_epochs()),
            batch_size: self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            learning_rate: self.learning_rate.unwrap_or(spnn::optim::DEFAULT_LEARNING_RATE),
            seed: self.seed.unwrap_or(0),
            theta: self.theta.unwrap_or(0.0),
            init_gain: self.init_gain.unwrap_or(DEFAULT_INIT_GAIN),
            phase_shift_seed: self.phase_shift_seed,
            limit_train: self.limit_train,
            limit_test: self.limit_test,
            calibration_examples: self.calibration_examples.unwrap_or(0),
            circuit: self.circuit,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn default_data_dir() -> PathBuf {
    std::env::var_os("SPNN_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// A fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub data_dir: PathBuf,
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub theta: f64,
    pub init_gain: f64,
    pub phase_shift_seed: Option<u64>,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub calibration_examples: usize,
    pub circuit: CircuitOverrides,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.preset == Preset::FcMnist && self.dataset != DatasetName::Mnist {
            return bad("the fc-mnist preset only fits MNIST".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive and finite, got {}", self.learning_rate));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be finite and >= 0, got {}", self.theta));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return bad(format!("init gain must be positive and finite, got {}", self.init_gain));
        }
        if self.limit_train == Some(0) || self.limit_test == Some(0) {
            return bad("dataset limits must be >= 1".into());
        }
        self.circuit.params()?;
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.preset.layers(self.dataset, self.theta)
    }
}
