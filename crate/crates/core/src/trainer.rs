//! Minibatch training with Nesterov momentum and a loss-driven learning
//! rate, plus the hardening schemes: adversarial augmentation, robust
//! (worst-case perturbation) training and distillation.
//!
//! Per minibatch: `v ← μv − λ∇ℓ(w + μv)`, `w ← w + v`. After each epoch:
//! `λ ← λ·exp((ℓ* − ℓ)/s)` with `s = s_improve` if `ℓ* ≥ ℓ`, else `s_worsen`,
//! where `ℓ` is the mean epoch loss and `ℓ*` the best so far.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackConfig, AttackKind};
use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::parameter_gradients;
use crate::network::{argmax, Model, Mode, NetworkSpec, Weights};
use crate::rng::{rng_stream, tag};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L1,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L1 => "l1",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "l∞" | "inf" => Ok(Norm::Linf),
            "l1" => Ok(Norm::L1),
            _ => Err(Error::Config(format!("unknown norm {s:?} (expected linf or l1)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Defense {
    None,
    Augmented { attack: AttackKind, alpha: f64 },
    Robust { norm: Norm, budget: f64 },
    Distill { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub s_improve: f64,
    pub s_worsen: f64,
    pub seed: u64,
    /// Softmax temperature of the training loss.
    pub temperature: f64,
    pub defense: Defense,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 128,
            max_epochs: 240,
            s_improve: 2.5,
            s_worsen: 0.75,
            seed: 0,
            temperature: 1.0,
            defense: Defense::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {}", self.momentum));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epochs must be at least 1".into());
        }
        if !(self.s_improve > 0.0 && self.s_worsen > 0.0) {
            return bad("adaptive-rate constants must be positive".into());
        }
        if !(self.temperature >= 1.0) {
            return bad(format!("temperature {}", self.temperature));
        }
        match self.defense {
            Defense::Augmented { alpha, .. } if !(0.0..=1.0).contains(&alpha) => bad(format!("alpha {alpha}")),
            Defense::Robust { budget, .. } if !(budget >= 0.0) => bad(format!("robust budget {budget}")),
            Defense::Distill { temperature } if !(temperature > 1.0) => {
                bad(format!("distillation temperature {temperature} must exceed 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Fraction of training examples classified correctly during the
    /// epoch's own (dropout-active) forward passes.
    pub accuracy: f64,
    /// Learning rate used during the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub updates: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("records serialize") + "\n")
            .collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }
}

/// One Nesterov update given the gradient taken at `w + μv`.
pub fn nesterov_step(
    weights: &Weights,
    velocity: &Weights,
    gradient: &Weights,
    learning_rate: f64,
    momentum: f64,
) -> Result<(Weights, Weights)> {
    let mut w_out = Weights::new();
    let mut v_out = Weights::new();
    for (name, w) in weights {
        let (v, g) = match (velocity.get(name), gradient.get(name)) {
            (Some(v), Some(g)) if v.shape() == w.shape() && g.shape() == w.shape() => (v, g),
            _ => return Err(Error::Shape(format!("velocity or gradient for {name} missing or misshapen"))),
        };
        let v2 = v.zip_with(g, |v, g| momentum * v - learning_rate * g)?;
        w_out.insert(name.clone(), w.add(&v2)?);
        v_out.insert(name.clone(), v2);
    }
    if velocity.len() != weights.len() || gradient.len() != weights.len() {
        return Err(Error::Shape("velocity or gradient has extra entries".into()));
    }
    Ok((w_out, v_out))
}

/// `λ·exp((ℓ* − ℓ)/s)`, `s = s_improve` when `ℓ* ≥ ℓ`, otherwise `s_worsen`.
pub fn adaptive_lr_update(learning_rate: f64, best_loss: f64, epoch_loss: f64, s_improve: f64, s_worsen: f64) -> f64 {
    let s = if best_loss >= epoch_loss { s_improve } else { s_worsen };
    learning_rate * ((best_loss - epoch_loss) / s).exp()
}

/// Perturbation of the given norm and budget maximising `⟨g, r⟩`:
/// `budget·sign(g)` for l∞; for l1 the budget goes to the largest `|g_i|`
/// first, at most 2 per component (the full pixel range).
pub fn robust_perturbation(gradient: &[f64], norm: Norm, budget: f64) -> Result<Vec<f64>> {
    if !(budget > 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation budget {budget}")));
    }
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    match norm {
        Norm::Linf => Ok(gradient.iter().map(|&g| budget * sign(g)).collect()),
        Norm::L1 => {
            let mut order: Vec<usize> = (0..gradient.len()).filter(|&i| gradient[i] != 0.0).collect();
            order.sort_by(|&a, &b| gradient[b].abs().total_cmp(&gradient[a].abs()).then(a.cmp(&b)));
            let mut r = vec![0.0; gradient.len()];
            let mut left = budget;
            for i in order {
                if left <= 0.0 {
                    break;
                }
                let m = left.min(2.0);
                r[i] = m * sign(gradient[i]);
                left -= m;
            }
            Ok(r)
        }
    }
}

/// Training targets: hard labels or full distributions.
enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a [Vec<f64>]),
}

impl Targets<'_> {
    fn row(&self, i: usize, k: usize, out: &mut Vec<f64>) {
        match self {
            Targets::Hard(l) => out.extend((0..k).map(|j| if j == l[i] { 1.0 } else { 0.0 })),
            Targets::Soft(p) => out.extend_from_slice(&p[i]),
        }
    }
}

/// Rows fed to one update: inputs, target rows and per-row loss weights.
struct Batch {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    labels: Vec<usize>,
}

fn batch_gradient(
    spec: &NetworkSpec,
    weights: &Weights,
    batch: Batch,
    temperature: f64,
    mode: Mode,
) -> Result<(f64, Weights, usize)> {
    let k = spec.classes();
    let [c, h, w] = spec.input_shape();
    let n = batch.weights.len();
    let model = Model::new(spec, weights);
    let mut tape = Tape::new();
    let x = Tensor::from_parts(vec![n, c, h, w], batch.inputs);
    let rec = model.record(&mut tape, x, temperature, mode, true)?;
    let z = tape.value(rec.logits);
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(z.row(i)) == l)
        .count();
    let loss = tape.softmax_cross_entropy(rec.scaled, Tensor::from_parts(vec![n, k], batch.targets), batch.weights)?;
    let value = tape.value(loss).item()?;
    let grads = parameter_gradients(&tape, loss)?;
    Ok((value, grads, correct))
}

/// Builds the rows of one minibatch; `current` is the checkpoint at the
/// pre-update weights for schemes that craft against the model.
fn build_batch(
    data: &Dataset,
    targets: &Targets<'_>,
    idx: &[usize],
    config: &TrainConfig,
    current: Option<&Checkpoint>,
) -> Result<Batch> {
    let k = data.classes;
    let b = idx.len() as f64;
    let mut out = Batch {
        inputs: Vec::with_capacity(idx.len() * data.example_len()),
        targets: Vec::with_capacity(idx.len() * k),
        weights: Vec::with_capacity(idx.len()),
        labels: Vec::with_capacity(idx.len()),
    };
    let push = |out: &mut Batch, x: &[f64], i: usize, weight: f64| {
        out.inputs.extend_from_slice(x);
        targets.row(i, k, &mut out.targets);
        out.weights.push(weight);
        out.labels.push(data.labels[i]);
    };
    match (&config.defense, current) {
        (Defense::Augmented { attack: kind, alpha }, Some(ckpt)) if *alpha < 1.0 => {
            let cfg = AttackConfig {
                seed: config.seed,
                ..AttackConfig::new(*kind)
            };
            for &i in idx {
                push(&mut out, data.example(i), i, alpha / b);
            }
            for &i in idx {
                let x = data.example(i);
                let crafted = attack(ckpt, x, &cfg)?;
                let partner = if crafted.success { crafted.adversarial.as_slice() } else { x };
                push(&mut out, partner, i, (1.0 - alpha) / b);
            }
        }
        (Defense::Robust { norm, budget }, Some(ckpt)) if *budget > 0.0 => {
            let n = idx.len();
            let [c, h, w] = data.example_shape();
            let mut xs = Vec::with_capacity(n * data.example_len());
            let mut rows = Vec::with_capacity(n * k);
            for &i in idx {
                xs.extend_from_slice(data.example(i));
                targets.row(i, k, &mut rows);
            }
            // Examples are independent in eval mode, so the gradient of the
            // summed loss holds every per-example input gradient.
            let model = ckpt.model();
            let mut tape = Tape::new();
            let rec = model.record(
                &mut tape,
                Tensor::from_parts(vec![n, c, h, w], xs.clone()),
                config.temperature,
                Mode::Eval,
                false,
            )?;
            let loss = tape.softmax_cross_entropy(rec.scaled, Tensor::from_parts(vec![n, k], rows), vec![1.0; n])?;
            let g = crate::grad::input_gradient(&tape, loss)?;
            let len = data.example_len();
            for (j, &i) in idx.iter().enumerate() {
                let r = robust_perturbation(&g.data()[j * len..(j + 1) * len], *norm, *budget)?;
                let x: Vec<f64> = xs[j * len..(j + 1) * len]
                    .iter()
                    .zip(&r)
                    .map(|(a, d)| (a + d).clamp(-1.0, 1.0))
                    .collect();
                push(&mut out, &x, i, 1.0 / b);
            }
        }
        _ => {
            for &i in idx {
                push(&mut out, data.example(i), i, 1.0 / b);
            }
        }
    }
    Ok(out)
}

fn needs_current(defense: &Defense) -> bool {
    match *defense {
        Defense::Augmented { alpha, .. } => alpha < 1.0,
        Defense::Robust { budget, .. } => budget > 0.0,
        _ => false,
    }
}

/// The shared training loop.
fn fit(
    spec: &NetworkSpec,
    data: &Dataset,
    targets: Targets<'_>,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if data.classes != spec.classes() || data.example_shape() != spec.input_shape() {
        return Err(Error::Dataset(format!(
            "dataset {:?} with {} classes does not fit the network {:?} with {}",
            data.example_shape(),
            data.classes,
            spec.input_shape(),
            spec.classes()
        )));
    }
    let mut weights = spec.init_weights(init_seed);
    let mut velocity: Weights = weights.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
    let mut lr = config.learning_rate;
    let mut best = f64::NAN;
    let mut report = TrainReport::default();
    let mut calm = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        let mut correct = 0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let current = if needs_current(&config.defense) {
                Some(Checkpoint {
                    spec: spec.clone(),
                    weights: weights.clone(),
                    meta: TrainMeta {
                        temperature: config.temperature,
                        ..TrainMeta::default()
                    },
                })
            } else {
                None
            };
            let batch = build_batch(data, &targets, idx, config, current.as_ref())?;
            let lookahead: Weights = weights
                .iter()
                .map(|(n, w)| Ok((n.clone(), w.zip_with(&velocity[n], |w, v| w + config.momentum * v)?)))
                .collect::<Result<_>>()?;
            let mode = Mode::Train {
                seed: config.seed,
                labels: [epoch as u64, bi as u64],
            };
            let (loss, grads, ok) = batch_gradient(spec, &lookahead, batch, config.temperature, mode)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let (w, v) = nesterov_step(&weights, &velocity, &grads, lr, config.momentum)?;
            if w.values().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            weights = w;
            velocity = v;
            total += loss;
            correct += ok;
            batches += 1;
            report.updates += 1;
        }
        let loss = total / batches as f64;
        let accuracy = correct as f64 / data.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            accuracy,
            learning_rate: lr,
        });
        if epoch == 0 {
            best = loss;
        }
        lr = adaptive_lr_update(lr, best, loss, config.s_improve, config.s_worsen);
        best = best.min(loss);
        let prev = report.epochs.len().checked_sub(2).map(|i| report.epochs[i].loss);
        calm = match prev {
            Some(p) if accuracy == 1.0 && (p - loss).abs() < 1e-6 => calm + 1,
            _ => 0,
        };
        if calm >= 5 {
            report.stopped_early = true;
            break;
        }
    }
    let meta = TrainMeta {
        epochs: report.epochs.len(),
        final_loss: report.final_loss(),
        temperature: config.temperature,
    };
    Ok((Checkpoint::new(spec.clone(), weights, meta)?, report))
}

/// Plain training on hard labels (any defense in `config` is ignored).
pub fn train(spec: &NetworkSpec, data: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    let plain = TrainConfig {
        defense: Defense::None,
        ..config.clone()
    };
    fit(spec, data, Targets::Hard(&data.labels), &plain, config.seed)
}

/// Minibatches of genuine rows weighted `α` and adversarial partners
/// crafted against the current weights weighted `1 − α`.
pub fn train_augmented(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
    attack: AttackKind,
    alpha: f64,
) -> Result<(Checkpoint, TrainReport)> {
    let cfg = TrainConfig {
        defense: Defense::Augmented { attack, alpha },
        ..config.clone()
    };
    fit(spec, data, Targets::Hard(&data.labels), &cfg, config.seed)
}

/// Every minibatch example replaced by its worst-case perturbation under
/// the given norm budget.
pub fn train_robust(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
    norm: Norm,
    budget: f64,
) -> Result<(Checkpoint, TrainReport)> {
    let cfg = TrainConfig {
        defense: Defense::Robust { norm, budget },
        ..config.clone()
    };
    fit(spec, data, Targets::Hard(&data.labels), &cfg, config.seed)
}

/// Teacher at temperature `τ` on hard labels, then a student of the same
/// architecture at `τ` on the teacher's soft labels.
pub fn distill(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
    temperature: f64,
) -> Result<(Checkpoint, Checkpoint, TrainReport)> {
    let cfg = TrainConfig {
        temperature,
        defense: Defense::Distill { temperature },
        ..config.clone()
    };
    cfg.validate()?;
    let (teacher, _) = fit(spec, data, Targets::Hard(&data.labels), &cfg, config.seed)?;
    let model = teacher.model();
    let soft: Vec<Vec<f64>> = (0..data.len()).map(|i| model.probs(data.example(i), temperature)).collect();
    let (student, report) = fit(spec, data, Targets::Soft(&soft), &cfg, config.seed.wrapping_add(1))?;
    Ok((teacher, student, report))
}

/// Fraction of `data` classified correctly.
pub fn accuracy(ckpt: &Checkpoint, data: &Dataset) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let model = ckpt.model();
    let ok = (0..data.len())
        .filter(|&i| model.predict(data.example(i)) == data.labels[i])
        .count();
    ok as f64 / data.len() as f64
}
