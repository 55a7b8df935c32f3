//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 7
//! output = "runs/mnist"
//!
//! [data]
//! source = "mnist"          # or "blobs"
//! dir = "data/mnist"
//!
//! [model]
//! kind = "cnn"              # or "mlp"
//! scale = 0.25
//!
//! [train]
//! learning_rate = 0.1
//! max_epochs = 30
//!
//! [[attacks]]
//! kind = "P"
//!
//! [probe]
//! regions = 8
//! ```
//!
//! Every omitted value takes its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{load_idx, synth_blobs, Dataset};
use crate::detect::ProbeParams;
use crate::error::{Error, Result};
use crate::network::{build_mnist_cnn_with_dropout, build_synthetic_mlp, NetworkSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// `train-images-idx3-ubyte[.gz]` and friends under `dir`.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        spread: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
}

fn default_test_per_class() -> usize {
    50
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Mnist {
            dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelChoice {
    Cnn {
        #[serde(default = "default_scale")]
        scale: f64,
        /// Dropout rate at the dense layers.
        #[serde(default = "default_dropout")]
        dropout: f64,
    },
    Mlp {
        hidden: Vec<usize>,
    },
}

fn default_scale() -> f64 {
    0.25
}

fn default_dropout() -> f64 {
    0.5
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice::Cnn {
            scale: default_scale(),
            dropout: default_dropout(),
        }
    }
}

/// Sizes of the evaluation studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySizes {
    /// Evaluation inputs drawn from the test split.
    pub pool: usize,
    /// Genuine/adversarial pairs per attack in the detection study.
    pub pairs: usize,
    /// Inputs per attack in the countermeasure study.
    pub countermeasure: usize,
}

impl Default for StudySizes {
    fn default() -> Self {
        Self {
            pool: 500,
            pairs: 200,
            countermeasure: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataSource,
    pub model: ModelChoice,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    pub probe: ProbeParams,
    pub study: StudySizes,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs"),
            data: DataSource::default(),
            model: ModelChoice::default(),
            train: TrainConfig::default(),
            attacks: AttackKind::ALL.iter().map(|&k| AttackConfig::new(k)).collect(),
            probe: ProbeParams::default(),
            study: StudySizes::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.validate()?;
        for a in &self.attacks {
            if !(a.budget() > 0.0 && a.resolution > 0.0) {
                return Err(Error::Config(format!("{} attack: budget and resolution must be positive", a.kind)));
            }
        }
        match &self.model {
            ModelChoice::Cnn { scale, .. } if !(*scale > 0.0 && *scale <= 1.0) => Err(Error::Config(format!("model scale {scale}"))),
            ModelChoice::Cnn { dropout, .. } if !(0.0..1.0).contains(dropout) => {
                Err(Error::Config(format!("dropout rate {dropout}")))
            }
            _ => Ok(()),
        }
    }

    /// Architecture for the configured data.
    pub fn network(&self) -> Result<NetworkSpec> {
        match (&self.model, &self.data) {
            (ModelChoice::Cnn { scale, dropout }, _) => build_mnist_cnn_with_dropout(*scale, *dropout),
            (ModelChoice::Mlp { hidden }, DataSource::Blobs { classes, .. }) => build_synthetic_mlp(2, hidden, *classes),
            (ModelChoice::Mlp { hidden }, DataSource::Mnist { .. }) => {
                let mut layers = Vec::new();
                for &h in hidden {
                    layers.push(crate::network::LayerSpec::Dense { units: h });
                    layers.push(crate::network::LayerSpec::Relu);
                }
                layers.push(crate::network::LayerSpec::Dense { units: 10 });
                layers.push(crate::network::LayerSpec::Softmax);
                NetworkSpec::new([1, 28, 28], 10, layers)
            }
        }
    }

    /// `(train, test)` splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let load = |prefix: &str| {
                    let pick = |name: String| {
                        let gz = dir.join(format!("{name}.gz"));
                        if gz.exists() {
                            gz
                        } else {
                            dir.join(name)
                        }
                    };
                    load_idx(
                        pick(format!("{prefix}-images-idx3-ubyte")),
                        pick(format!("{prefix}-labels-idx1-ubyte")),
                    )
                };
                let mut train = load("train")?;
                let mut test = load("t10k")?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                train.split = "train".into();
                test.split = "test".into();
                Ok((train, test))
            }
            DataSource::Blobs {
                classes,
                per_class,
                spread,
                test_per_class,
            } => {
                let mut train = synth_blobs(*classes, *per_class, *spread, self.seed)?;
                let mut test = synth_blobs(*classes, *test_per_class, *spread, self.seed.wrapping_add(1))?;
                train.split = "train".into();
                test.split = "test".into();
                Ok((train, test))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.probe.regions, 8);
        assert_eq!(c.probe.ranking, 1.25);
        assert_eq!(c.probe.shadows, 4);
        assert_eq!(c.probe.region_size, 4);
        assert_eq!(c.probe.threshold, 0.625);
        assert_eq!(c.train.learning_rate, 0.1);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(AttackConfig::new(AttackKind::G).budget(), 0.25);
        assert_eq!(AttackConfig::new(AttackKind::P).budget(), 112.0);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = "seed = 3\n[train]\nmax_epochs = 5\n[probe]\nshadows = 2\n";
        let p = RunConfig::from_toml(partial).unwrap();
        assert_eq!((p.seed, p.train.max_epochs, p.probe.shadows), (3, 5, 2));
        assert_eq!(p.train.batch_size, 128);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[probe]\nthreshold = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[train]\nmomentum = 1.0\n").is_err());
        assert!(RunConfig::from_toml("nonsense = 1\n").is_err());
    }
}
