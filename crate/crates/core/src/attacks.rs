//! Input-crafting attacks and the probe-raising countermeasures.
//!
//! * G: one loss-gradient sign direction, smallest step on a grid.
//! * H: sign of the difference of two softmax Jacobian rows, same grid.
//! * P: per round flip the two components with the largest `−α·β`.
//! * C: as P with `|α − β|` scoring on logits divided by a temperature.
//!
//! `α_i = ∂σ_t/∂x_i` and `β_i = Σ_{j≠t} ∂σ_j/∂x_i` for target class `t`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::detect::{flip_value, probe_at_least, ProbeParams};
use crate::error::{Error, Result};
use crate::grad::{loss_and_gradient, probs_vjps};
use crate::network::{argmax, Model};
use crate::rng::{rng_stream, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    G,
    H,
    P,
    C,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::G, AttackKind::H, AttackKind::P, AttackKind::C];

    /// G and H step along a sign direction; P and C flip components.
    pub fn is_grid(self) -> bool {
        matches!(self, AttackKind::G | AttackKind::H)
    }

    /// Budget limit: `‖r‖∞` for G/H, flipped components for P/C.
    pub fn default_budget(self) -> f64 {
        if self.is_grid() {
            0.25
        } else {
            112.0
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackKind::G => "G",
            AttackKind::H => "H",
            AttackKind::P => "P",
            AttackKind::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "G" => Ok(AttackKind::G),
            "H" => Ok(AttackKind::H),
            "P" => Ok(AttackKind::P),
            "C" => Ok(AttackKind::C),
            _ => Err(Error::Config(format!("unknown attack {s:?} (expected G, H, P or C)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Absent means untargeted.
    #[serde(default)]
    pub target: Option<usize>,
    /// Class the input is meant to leave; defaults to its current prediction.
    #[serde(default)]
    pub source: Option<usize>,
    /// Defaults to [`AttackKind::default_budget`].
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    /// C only: defaults to the checkpoint's training temperature.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_resolution() -> f64 {
    0.01
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            target: None,
            source: None,
            budget: None,
            resolution: default_resolution(),
            temperature: None,
            seed: 0,
        }
    }

    pub fn targeted(kind: AttackKind, target: usize) -> Self {
        Self {
            target: Some(target),
            ..Self::new(kind)
        }
    }

    pub fn budget(&self) -> f64 {
        self.budget.unwrap_or(self.kind.default_budget())
    }

    /// Same attack with four times the default budget (448 flips or `δ = 1`).
    pub fn amplified(&self) -> Self {
        Self {
            budget: Some(4.0 * self.kind.default_budget()),
            ..self.clone()
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        let b = self.budget();
        if !(b > 0.0) {
            return Err(Error::Config(format!("attack budget {b}")));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config(format!("attack resolution {}", self.resolution)));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("attack temperature {t}")));
            }
        }
        for c in [self.target, self.source].into_iter().flatten() {
            if c >= classes {
                return Err(Error::InvalidArgument(format!("class {c} with {classes} classes")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub success: bool,
    #[serde(skip)]
    pub adversarial: Vec<f64>,
    #[serde(skip)]
    pub perturbation: Vec<f64>,
    pub class_before: usize,
    pub class_after: usize,
    pub target: Option<usize>,
    /// Grid steps tried (G/H) or flipping rounds (P/C).
    pub iterations: usize,
    /// `‖r‖∞` for G/H, changed-component count for P/C.
    pub amplitude: f64,
    /// Countermeasures only: whether the probe goal was reached.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub goal_met: Option<bool>,
    /// Countermeasures only: amplitude of the minimal attack they started from.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base_amplitude: Option<f64>,
}

impl AttackResult {
    /// `amplitude / base_amplitude` for countermeasure results.
    pub fn amplitude_ratio(&self) -> Option<f64> {
        self.base_amplitude.map(|b| if b > 0.0 { self.amplitude / b } else { 1.0 })
    }
}

/// What counts as success for one attack instance.
#[derive(Debug, Clone, Copy)]
struct Goal {
    source: usize,
    target: usize,
    targeted: bool,
}

impl Goal {
    fn reached(&self, class: usize) -> bool {
        if self.targeted {
            class == self.target
        } else {
            class != self.source
        }
    }
}

/// Per-kind amplitude of `adv − x`.
pub fn amplitude(kind: AttackKind, x: &[f64], adv: &[f64]) -> f64 {
    if kind.is_grid() {
        x.iter().zip(adv).fold(0.0, |m, (a, b)| f64::max(m, (b - a).abs()))
    } else {
        x.iter().zip(adv).filter(|(a, b)| a != b).count() as f64
    }
}

struct Crafter<'a> {
    ckpt: &'a Checkpoint,
    model: Model<'a>,
    cfg: &'a AttackConfig,
    x: &'a [f64],
    goal: Goal,
    class_before: usize,
}

impl<'a> Crafter<'a> {
    fn new(ckpt: &'a Checkpoint, x: &'a [f64], cfg: &'a AttackConfig) -> Result<Self> {
        let model = ckpt.model();
        let k = ckpt.spec.classes();
        cfg.validate(k)?;
        if x.len() != ckpt.spec.input_len() {
            return Err(Error::Shape(format!("input of length {} for {}", x.len(), ckpt.spec.input_len())));
        }
        if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("input outside [-1, 1]".into()));
        }
        let z = model.logits(x);
        let class_before = argmax(&z);
        let source = cfg.source.unwrap_or(class_before);
        let goal = match cfg.target {
            Some(t) if t == source => {
                return Err(Error::InvalidArgument(format!("target {t} equals the current class")));
            }
            Some(t) => Goal {
                source,
                target: t,
                targeted: true,
            },
            None => {
                // Runner-up logit among classes other than the source.
                let mut best: Option<usize> = None;
                for (j, &v) in z.iter().enumerate() {
                    if j != source && best.is_none_or(|b| v > z[b]) {
                        best = Some(j);
                    }
                }
                Goal {
                    source,
                    target: best.ok_or_else(|| Error::InvalidArgument("need two classes".into()))?,
                    targeted: false,
                }
            }
        };
        Ok(Self {
            ckpt,
            model,
            cfg,
            x,
            goal,
            class_before,
        })
    }

    fn tensor(&self, v: &[f64]) -> Tensor {
        let [c, h, w] = self.ckpt.spec.input_shape();
        Tensor::from_parts(vec![c, h, w], v.to_vec())
    }

    fn finish(&self, adv: Vec<f64>, iterations: usize, claimed: bool) -> AttackResult {
        let class_after = self.model.predict(&adv);
        let reached = self.goal.reached(class_after);
        debug_assert!(!claimed || reached, "attack claimed success without reaching its goal");
        AttackResult {
            kind: self.cfg.kind,
            success: claimed && reached,
            perturbation: adv.iter().zip(self.x).map(|(a, b)| a - b).collect(),
            amplitude: amplitude(self.cfg.kind, self.x, &adv),
            adversarial: adv,
            class_before: self.class_before,
            class_after,
            target: self.cfg.target,
            iterations,
            goal_met: None,
            base_amplitude: None,
        }
    }

    fn already_there(&self) -> Option<AttackResult> {
        self.goal
            .reached(self.class_before)
            .then(|| self.finish(self.x.to_vec(), 0, true))
    }

    fn step_count(&self, budget: f64) -> usize {
        (budget / self.cfg.resolution + 1e-9).floor() as usize
    }

    fn along(&self, dir: &[f64], delta: f64) -> Vec<f64> {
        self.x
            .iter()
            .zip(dir)
            .map(|(&v, &d)| (v + delta * d).clamp(-1.0, 1.0))
            .collect()
    }

    /// Sign direction for the grid attacks.
    fn direction(&self) -> Result<Vec<f64>> {
        let xt = self.tensor(self.x);
        let raw = match self.cfg.kind {
            AttackKind::G => {
                let (_, g) = loss_and_gradient(self.model, &xt, self.goal.target, 1.0)?;
                g.into_data().into_iter().map(|v| -v).collect::<Vec<_>>()
            }
            AttackKind::H => {
                let k = self.ckpt.spec.classes();
                let mut seed = vec![0.0; k];
                seed[self.goal.target] += 1.0;
                seed[self.goal.source] -= 1.0;
                let (_, mut g) = probs_vjps(self.model, &xt, 1.0, &[&seed])?;
                g.pop().expect("one seed").into_data()
            }
            _ => unreachable!("grid direction for a flipping attack"),
        };
        Ok(raw.into_iter().map(sign).collect())
    }

    fn grid_attack(&self) -> Result<AttackResult> {
        if let Some(r) = self.already_there() {
            return Ok(r);
        }
        let dir = self.direction()?;
        let steps = self.step_count(self.cfg.budget());
        if dir.iter().all(|&d| d == 0.0) {
            return Ok(self.finish(self.x.to_vec(), 0, false));
        }
        let mut last = self.x.to_vec();
        for k in 1..=steps {
            let adv = self.along(&dir, k as f64 * self.cfg.resolution);
            if self.goal.reached(self.model.predict(&adv)) {
                return Ok(self.finish(adv, k, true));
            }
            last = adv;
        }
        Ok(self.finish(last, steps, false))
    }

    fn temperature(&self) -> f64 {
        match self.cfg.kind {
            AttackKind::C => self.cfg.temperature.unwrap_or(self.ckpt.meta.temperature),
            _ => 1.0,
        }
    }

    /// Saliency scores and flip targets at `cur`.
    fn saliency(&self, cur: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.ckpt.spec.classes();
        let t = self.goal.target;
        let mut ea = vec![0.0; k];
        ea[t] = 1.0;
        let eb: Vec<f64> = (0..k).map(|j| if j == t { 0.0 } else { 1.0 }).collect();
        let (_, g) = probs_vjps(self.model, &self.tensor(cur), self.temperature(), &[&ea, &eb])?;
        let (alpha, beta) = (g[0].data(), g[1].data());
        let scores = alpha
            .iter()
            .zip(beta)
            .map(|(&a, &b)| match self.cfg.kind {
                AttackKind::P => p_score(a, b),
                _ => c_score(a, b),
            })
            .collect();
        let targets = alpha.iter().map(|&a| flip_target(a)).collect();
        Ok((scores, targets))
    }

    /// One flipping round: picks up to `room` components and returns them
    /// with their new values, or nothing when no candidate is left.
    fn pick(&self, cur: &[f64], excluded: &[bool], room: usize) -> Result<Vec<(usize, f64)>> {
        let (scores, targets) = self.saliency(cur)?;
        let candidates = (0..cur.len()).filter(|&i| !excluded[i] && cur[i] != targets[i]);
        Ok(top_two(&scores, candidates)
            .into_iter()
            .take(room)
            .map(|i| (i, targets[i]))
            .collect())
    }

    fn flip_attack(&self) -> Result<AttackResult> {
        if let Some(r) = self.already_there() {
            return Ok(r);
        }
        let budget = self.cfg.budget().floor() as usize;
        let mut cur = self.x.to_vec();
        let mut excluded = vec![false; cur.len()];
        let mut count = 0;
        let mut rounds = 0;
        loop {
            if self.goal.reached(self.model.predict(&cur)) {
                return Ok(self.finish(cur, rounds, true));
            }
            if count >= budget {
                break;
            }
            let picked = self.pick(&cur, &excluded, budget - count)?;
            if picked.is_empty() {
                break;
            }
            for (i, v) in picked {
                cur[i] = v;
                excluded[i] = true;
                count += 1;
            }
            rounds += 1;
        }
        Ok(self.finish(cur, rounds, false))
    }

    fn run(&self) -> Result<AttackResult> {
        if self.cfg.kind.is_grid() {
            self.grid_attack()
        } else {
            self.flip_attack()
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Flip value for a component with target-class sensitivity `alpha`.
pub fn flip_target(alpha: f64) -> f64 {
    if alpha > 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn p_score(alpha: f64, beta: f64) -> f64 {
    -alpha * beta
}

pub fn c_score(alpha: f64, beta: f64) -> f64 {
    (alpha - beta).abs()
}

/// The two highest-scoring candidates, lower index first on ties.
pub fn top_two(scores: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(3);
    for i in candidates {
        let pos = best
            .iter()
            .position(|&b| scores[i] > scores[b] || (scores[i] == scores[b] && i < b))
            .unwrap_or(best.len());
        best.insert(pos, i);
        best.truncate(2);
    }
    best
}

/// Runs the configured attack on `x`.
pub fn attack(ckpt: &Checkpoint, x: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    Crafter::new(ckpt, x, cfg)?.run()
}

fn with_kind(cfg: &AttackConfig, kind: AttackKind) -> Result<AttackConfig> {
    if cfg.kind != kind {
        return Err(Error::Config(format!("{} attack called with a {} configuration", kind, cfg.kind)));
    }
    Ok(cfg.clone())
}

pub fn g_attack(ckpt: &Checkpoint, x: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    attack(ckpt, x, &with_kind(cfg, AttackKind::G)?)
}

pub fn h_attack(ckpt: &Checkpoint, x: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    attack(ckpt, x, &with_kind(cfg, AttackKind::H)?)
}

pub fn p_attack(ckpt: &Checkpoint, x: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    attack(ckpt, x, &with_kind(cfg, AttackKind::P)?)
}

pub fn c_attack(ckpt: &Checkpoint, x: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    attack(ckpt, x, &with_kind(cfg, AttackKind::C)?)
}

/// Index of the first state whose probe reaches the goal. Gallops over
/// indices `0, 1, 3, 7, …` and bisects the last gap, so the search assumes
/// the probe grows along the trajectory.
fn first_reaching(len: usize, mut reaches: impl FnMut(usize) -> Result<bool>) -> Result<Option<usize>> {
    if len == 0 {
        return Ok(None);
    }
    let mut below = None;
    let mut step = 1;
    let mut i = 0;
    let hit = loop {
        if reaches(i)? {
            break i;
        }
        below = Some(i);
        if i == len - 1 {
            return Ok(None);
        }
        i = (i + step).min(len - 1);
        step *= 2;
    };
    let (mut lo, mut hi) = (below.map_or(0, |b| b + 1), hit);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(hi))
}

/// Picks the first trajectory state meeting the probe goal.
fn settle(
    crafter: &Crafter<'_>,
    base: &AttackResult,
    states: Vec<(Vec<f64>, usize)>,
    goal: f64,
    params: &ProbeParams,
) -> Result<AttackResult> {
    let found = first_reaching(states.len(), |i| probe_at_least(crafter.ckpt, &states[i].0, goal, params))?;
    let (adv, iterations, met) = match found {
        Some(i) => (states[i].0.clone(), states[i].1, true),
        None => match states.last() {
            Some((s, it)) => (s.clone(), *it, false),
            None => (base.adversarial.clone(), base.iterations, false),
        },
    };
    let mut out = crafter.finish(adv, iterations, true);
    out.goal_met = Some(met);
    out.base_amplitude = Some(base.amplitude);
    Ok(out)
}

fn unchanged(base: AttackResult, met: bool) -> AttackResult {
    AttackResult {
        goal_met: Some(met),
        base_amplitude: Some(base.amplitude),
        ..base
    }
}

/// Runs the minimal attack, then keeps perturbing with the same selection
/// rule (only moves that keep the adversarial class) until the probe of the
/// result reaches `goal` or the budget of `cfg` (use
/// [`AttackConfig::amplified`]) runs out.
pub fn amplified_attack(
    ckpt: &Checkpoint,
    x: &[f64],
    cfg: &AttackConfig,
    goal: f64,
    params: &ProbeParams,
) -> Result<AttackResult> {
    let minimal = AttackConfig {
        budget: Some(cfg.budget().min(cfg.kind.default_budget())),
        ..cfg.clone()
    };
    let crafter = Crafter::new(ckpt, x, cfg)?;
    let base = Crafter::new(ckpt, x, &minimal)?.run()?;
    if !base.success {
        return Err(Error::AttackFailed {
            kind: cfg.kind.to_string(),
        });
    }
    if goal <= 0.0 {
        return Ok(unchanged(base, true));
    }
    if probe_at_least(ckpt, &base.adversarial, goal, params)? {
        return Ok(unchanged(base, true));
    }
    let mut states = Vec::new();
    if cfg.kind.is_grid() {
        let dir = crafter.direction()?;
        for k in base.iterations + 1..=crafter.step_count(cfg.budget()) {
            let adv = crafter.along(&dir, k as f64 * cfg.resolution);
            if crafter.goal.reached(crafter.model.predict(&adv)) {
                states.push((adv, k));
            }
        }
    } else {
        let budget = cfg.budget().floor() as usize;
        let mut cur = base.adversarial.clone();
        let mut excluded: Vec<bool> = base.perturbation.iter().map(|&r| r != 0.0).collect();
        let mut count = base.amplitude as usize;
        let mut rounds = base.iterations;
        while count < budget {
            let picked = crafter.pick(&cur, &excluded, budget - count)?;
            if picked.is_empty() {
                break;
            }
            let saved: Vec<(usize, f64)> = picked.iter().map(|&(i, _)| (i, cur[i])).collect();
            for &(i, v) in &picked {
                cur[i] = v;
                excluded[i] = true;
            }
            rounds += 1;
            if crafter.goal.reached(crafter.model.predict(&cur)) {
                count += picked.len();
                states.push((cur.clone(), rounds));
            } else {
                for (i, v) in saved {
                    cur[i] = v;
                }
            }
        }
    }
    settle(&crafter, &base, states, goal, params)
}

/// Random countermeasure: starting from a successful minimal attack on `x`, applies
/// random class-preserving moves until the probe reaches `goal` or the
/// budget of `cfg` runs out. P/C flip uniformly chosen untouched components
/// to their farther extreme; G/H add growing multiples of a random sign
/// vector.
pub fn random_amplification(
    ckpt: &Checkpoint,
    x: &[f64],
    base: &AttackResult,
    cfg: &AttackConfig,
    goal: f64,
    params: &ProbeParams,
) -> Result<AttackResult> {
    let crafter = Crafter::new(ckpt, x, cfg)?;
    if !base.success || base.kind != cfg.kind {
        return Err(Error::InvalidArgument("random amplification needs a successful base attack of the same kind".into()));
    }
    if goal <= 0.0 || probe_at_least(ckpt, &base.adversarial, goal, params)? {
        return Ok(unchanged(base.clone(), true));
    }
    let mut rng = rng_stream(cfg.seed, &[tag::RANDOM_FLIP]);
    let budget = cfg.budget();
    let mut states = Vec::new();
    if cfg.kind.is_grid() {
        let dir: Vec<f64> = (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        for k in 1.. {
            let d = k as f64 * cfg.resolution;
            let adv: Vec<f64> = base
                .adversarial
                .iter()
                .zip(&dir)
                .map(|(&v, &s)| (v + d * s).clamp(-1.0, 1.0))
                .collect();
            if amplitude(cfg.kind, x, &adv) > budget + 1e-12 || d > 2.0 {
                break;
            }
            if crafter.goal.reached(crafter.model.predict(&adv)) {
                states.push((adv, base.iterations + k));
            }
        }
    } else {
        let mut order: Vec<usize> = (0..x.len()).filter(|&i| base.perturbation[i] == 0.0).collect();
        order.shuffle(&mut rng);
        let mut cur = base.adversarial.clone();
        let mut count = base.amplitude as usize;
        let mut moves = base.iterations;
        for i in order {
            if count + 1 > budget.floor() as usize {
                break;
            }
            let old = cur[i];
            cur[i] = flip_value(old);
            moves += 1;
            if crafter.goal.reached(crafter.model.predict(&cur)) {
                count += 1;
                states.push((cur.clone(), moves));
            } else {
                cur[i] = old;
            }
        }
    }
    settle(&crafter, base, states, goal, params)
}
