//! Trained-model container and its JSON file format.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "spec": { "input_shape": [c, h, w], "classes": k, "layers": [ {"kind": "conv2d", ...}, ... ] },
//!   "meta": { "epochs": e, "final_loss": l, "temperature": t },
//!   "parameters": [ { "name": "layer0.weight", "shape": [...], "values": [...] }, ... ]
//! }
//! ```
//!
//! Values are written in scientific notation with 17 significant digits so
//! every `f64` survives a round trip unchanged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::network::{Model, NetworkSpec, Weights};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Training metadata stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub final_loss: f64,
    /// Softmax temperature used while training (1 for ordinary models).
    pub temperature: f64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        Self {
            epochs: 0,
            final_loss: f64::NAN,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub meta: TrainMeta,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format_version: u32,
    spec: &'a NetworkSpec,
    meta: MetaOut,
    parameters: Vec<ParamOut<'a>>,
}

#[derive(Serialize)]
struct MetaOut {
    epochs: usize,
    final_loss: Box<RawValue>,
    temperature: Box<RawValue>,
}

#[derive(Serialize)]
struct ParamOut<'a> {
    name: &'a str,
    shape: &'a [usize],
    values: Box<RawValue>,
}

#[derive(Deserialize)]
struct FileIn {
    format_version: u32,
    spec: NetworkSpec,
    meta: MetaIn,
    parameters: Vec<ParamIn>,
}

#[derive(Deserialize)]
struct MetaIn {
    epochs: usize,
    final_loss: Option<f64>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ParamIn {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn raw(text: String) -> Box<RawValue> {
    RawValue::from_string(text).expect("formatted numbers are valid JSON")
}

fn number(v: f64) -> Box<RawValue> {
    if v.is_finite() {
        raw(format!("{v:.16e}"))
    } else {
        raw("null".into())
    }
}

impl Checkpoint {
    /// Validates that `weights` match `spec`.
    pub fn new(spec: NetworkSpec, weights: Weights, meta: TrainMeta) -> Result<Self> {
        spec.check_weights(&weights)?;
        for (name, t) in &weights {
            t.check_finite(name)?;
        }
        if !(meta.temperature > 0.0) {
            return Err(Error::Checkpoint(format!("temperature {}", meta.temperature)));
        }
        Ok(Self { spec, weights, meta })
    }

    /// Freshly initialized, untrained checkpoint.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let weights = spec.init_weights(seed);
        Self {
            spec,
            weights,
            meta: TrainMeta::default(),
        }
    }

    pub fn model(&self) -> Model<'_> {
        Model::new(&self.spec, &self.weights)
    }

    pub fn to_json(&self) -> String {
        let parameters = self
            .weights
            .iter()
            .map(|(name, t)| {
                let mut s = String::with_capacity(t.len() * 24 + 2);
                s.push('[');
                for (i, v) in t.data().iter().enumerate() {
                    if i > 0 {
                        s.push(',');
                    }
                    let _ = write!(s, "{v:.16e}");
                }
                s.push(']');
                ParamOut {
                    name,
                    shape: t.shape(),
                    values: raw(s),
                }
            })
            .collect();
        let file = FileOut {
            format_version: FORMAT_VERSION,
            spec: &self.spec,
            meta: MetaOut {
                epochs: self.meta.epochs,
                final_loss: number(self.meta.final_loss),
                temperature: number(self.meta.temperature),
            },
            parameters,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FileIn = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (supported: {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut weights = Weights::new();
        for p in file.parameters {
            let t = Tensor::new(p.shape, p.values).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
            if weights.insert(p.name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
        }
        let meta = TrainMeta {
            epochs: file.meta.epochs,
            final_loss: file.meta.final_loss.unwrap_or(f64::NAN),
            temperature: file.meta.temperature,
        };
        Self::new(file.spec, weights, meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Bitwise equality of weights and metadata (NaN-safe).
    pub fn bit_identical(&self, other: &Checkpoint) -> bool {
        let bits = |v: f64| v.to_bits();
        self.spec == other.spec
            && self.meta.epochs == other.meta.epochs
            && bits(self.meta.final_loss) == bits(other.meta.final_loss)
            && bits(self.meta.temperature) == bits(other.meta.temperature)
            && self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| bits(*x) == bits(*y))
            })
    }
}
