//! Evaluation harness: detection metrics, ratio distributions, resilience
//! tables and the countermeasure and distillation studies.
//!
//! Every study draws its attack targets from the `TARGET` stream labelled
//! with the input index, so results do not depend on evaluation order.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{amplified_attack, attack, random_amplification, AttackConfig, AttackKind, AttackResult};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::detect::{analyze, probe, DetectionReport, ProbeParams, Verdict};
use crate::error::{Error, Result};
use crate::rng::{rng_stream, tag};

/// Detection outcomes with "adversarial" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, adversarial: bool, flagged: bool) {
        match (adversarial, flagged) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `(tp/(tp+fp), tp/(tp+fn))`; a zero denominator is an error, not 0.
pub fn precision_recall(c: &ConfusionCounts) -> Result<(f64, f64)> {
    if c.tp + c.fp == 0 {
        return Err(Error::Undefined("precision"));
    }
    if c.tp + c.fn_ == 0 {
        return Err(Error::Undefined("recall"));
    }
    Ok((c.tp as f64 / (c.tp + c.fp) as f64, c.tp as f64 / (c.tp + c.fn_) as f64))
}

/// Fraction of suspicious reports whose recovered class equals the true label.
pub fn recovery_rate(reports: &[DetectionReport], labels: &[usize]) -> Result<f64> {
    if reports.len() != labels.len() {
        return Err(Error::Shape(format!("{} reports for {} labels", reports.len(), labels.len())));
    }
    let suspicious: Vec<(usize, usize)> = reports
        .iter()
        .zip(labels)
        .filter(|(r, _)| r.verdict == Verdict::Suspicious)
        .map(|(r, &l)| (r.recovered.expect("suspicious reports carry a recovered class"), l))
        .collect();
    if suspicious.is_empty() {
        return Err(Error::Undefined("recovery rate"));
    }
    Ok(suspicious.iter().filter(|(a, b)| a == b).count() as f64 / suspicious.len() as f64)
}

/// Sorted sample of ratios.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioDistribution {
    values: Vec<f64>,
}

impl RatioDistribution {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("NaN ratio".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Nearest-rank quantile, `q ∈ [0, 1]`.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.values.is_empty() || !(0.0..=1.0).contains(&q) {
            return None;
        }
        let rank = ((q * self.values.len() as f64).ceil() as usize).max(1);
        Some(self.values[rank - 1])
    }

    pub fn median(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let n = self.values.len();
        Some(if n % 2 == 1 {
            self.values[n / 2]
        } else {
            0.5 * (self.values[n / 2 - 1] + self.values[n / 2])
        })
    }

    /// Fraction of values in `[lo, hi]`.
    pub fn fraction_within(&self, lo: f64, hi: f64) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let k = self.values.iter().filter(|&&v| v >= lo && v <= hi).count();
        Some(k as f64 / self.values.len() as f64)
    }

    /// Named quantiles for reports.
    pub fn summary(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        for (name, q) in [("min", 0.0), ("p10", 0.1), ("p25", 0.25), ("p75", 0.75), ("p90", 0.9), ("max", 1.0)] {
            if let Some(v) = self.quantile(q) {
                m.insert(name, v);
            }
        }
        if let Some(v) = self.median() {
            m.insert("median", v);
        }
        m
    }

    /// `value,cdf` lines of the empirical distribution.
    pub fn to_csv(&self) -> String {
        let n = self.values.len() as f64;
        let mut s = String::from("value,cdf\n");
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{v},{}\n", (i + 1) as f64 / n));
        }
        s
    }
}

/// Random target class other than `label` for input `index`.
pub fn random_target(seed: u64, index: usize, label: usize, classes: usize) -> usize {
    let mut rng = rng_stream(seed, &[tag::TARGET, index as u64]);
    let t = rng.random_range(0..classes - 1);
    if t >= label {
        t + 1
    } else {
        t
    }
}

/// Indices of `data` that `ckpt` classifies correctly, in order.
pub fn correctly_classified(ckpt: &Checkpoint, data: &Dataset) -> Vec<usize> {
    let model = ckpt.model();
    (0..data.len())
        .into_par_iter()
        .filter(|&i| model.predict(data.example(i)) == data.labels[i])
        .collect()
}

fn targeted(cfg: &AttackConfig, target: usize) -> AttackConfig {
    AttackConfig {
        target: Some(target),
        ..cfg.clone()
    }
}

/// Norm used to compare an attack's perturbation with distances between
/// genuine inputs: `l∞` for G/H, `l1` for P/C.
pub fn attack_norm(kind: AttackKind, a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    if kind.is_grid() {
        d.fold(0.0, f64::max)
    } else {
        d.sum()
    }
}

/// Index of the example of class `class` nearest to `x` under `norm`.
pub fn nearest_in_class(
    data: &Dataset,
    x: &[f64],
    class: usize,
    norm: impl Fn(&[f64], &[f64]) -> f64,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..data.len() {
        if data.labels[i] != class {
            continue;
        }
        let d = norm(x, data.example(i));
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

/// Per-input outcome of [`minimality_ratios`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalityRecord {
    pub index: usize,
    pub kind: AttackKind,
    /// `‖x − x_ε‖ / ‖x − x_*‖`, `x_*` the nearest genuine example of the adversarial class.
    pub nearest_ratio: f64,
    /// Amplitude of re-attacking `x_ε` back to the original class over the
    /// amplitude of the attack itself; `None` when the re-attack failed.
    pub return_ratio: Option<f64>,
}

/// Attacks every input of `inputs` listed in `indices` toward a random
/// target and measures both minimality ratios. `reference` supplies the
/// genuine neighbours.
pub fn minimality_ratios(
    ckpt: &Checkpoint,
    reference: &Dataset,
    inputs: &Dataset,
    indices: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(RatioDistribution, RatioDistribution, Vec<MinimalityRecord>)> {
    if let Some(c) = (0..reference.classes).find(|c| !reference.labels.contains(c)) {
        return Err(Error::Dataset(format!("class {c} absent from the reference set")));
    }
    let records: Vec<Option<MinimalityRecord>> = indices
        .par_iter()
        .map(|&i| -> Result<Option<MinimalityRecord>> {
            let x = inputs.example(i);
            let label = inputs.labels[i];
            let t = random_target(seed, i, label, inputs.classes);
            let res = attack(ckpt, x, &targeted(cfg, t))?;
            if !res.success {
                return Ok(None);
            }
            let ours = attack_norm(cfg.kind, x, &res.adversarial);
            let (_, theirs) = nearest_in_class(reference, x, res.class_after, |a, b| attack_norm(cfg.kind, a, b))
                .expect("every class is present");
            let nearest_ratio = if ours == 0.0 { 0.0 } else { ours / theirs };
            let back = attack(
                ckpt,
                &res.adversarial,
                &AttackConfig {
                    target: Some(res.class_before),
                    source: Some(res.class_after),
                    ..cfg.clone()
                },
            )?;
            let return_ratio = (back.success && res.amplitude > 0.0).then(|| back.amplitude / res.amplitude);
            Ok(Some(MinimalityRecord {
                index: i,
                kind: cfg.kind,
                nearest_ratio,
                return_ratio,
            }))
        })
        .collect::<Result<_>>()?;
    let records: Vec<MinimalityRecord> = records.into_iter().flatten().collect();
    let nearest = RatioDistribution::new(records.iter().map(|r| r.nearest_ratio).collect())?;
    let back = RatioDistribution::new(records.iter().filter_map(|r| r.return_ratio).collect())?;
    Ok((nearest, back, records))
}

/// Success rate of each attack (columns) against each model (rows) over
/// the inputs each model classifies correctly, with random targets.
pub fn resilience_matrix(
    models: &[&Checkpoint],
    attacks: &[AttackConfig],
    inputs: &Dataset,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if models.is_empty() || attacks.is_empty() {
        return Err(Error::InvalidArgument("resilience matrix needs models and attacks".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Dataset("no evaluation inputs".into()));
    }
    models
        .iter()
        .map(|ckpt| {
            let pool = correctly_classified(ckpt, inputs);
            if pool.is_empty() {
                return Err(Error::Dataset("model classifies no evaluation input correctly".into()));
            }
            attacks
                .iter()
                .map(|cfg| {
                    if !(cfg.budget() > 0.0) {
                        return Ok(0.0);
                    }
                    let wins = pool
                        .par_iter()
                        .map(|&i| {
                            let t = random_target(seed, i, inputs.labels[i], inputs.classes);
                            attack(ckpt, inputs.example(i), &targeted(cfg, t)).map(|r| r.success as usize)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(wins.iter().sum::<usize>() as f64 / pool.len() as f64)
                })
                .collect()
        })
        .collect()
}

/// Detection results for one attack over paired genuine/adversarial inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub kind: Option<AttackKind>,
    pub counts: ConfusionCounts,
    pub attempted: usize,
    pub recovered: usize,
    pub suspicious_adversarial: usize,
    pub indeterminate: usize,
}

impl DetectionOutcome {
    pub fn precision_recall(&self) -> Result<(f64, f64)> {
        precision_recall(&self.counts)
    }

    pub fn recovery(&self) -> Result<f64> {
        if self.suspicious_adversarial == 0 {
            return Err(Error::Undefined("recovery rate"));
        }
        Ok(self.recovered as f64 / self.suspicious_adversarial as f64)
    }
}

/// Paired detection study: walks `candidates` in order, attacks each input
/// toward a random target, and for every success analyses both the genuine
/// input and its adversarial version, until `pairs` pairs are collected.
/// Genuine analyses are shared between attacks.
pub fn detection_study(
    ckpt: &Checkpoint,
    inputs: &Dataset,
    candidates: &[usize],
    attacks: &[AttackConfig],
    pairs: usize,
    params: &ProbeParams,
    seed: u64,
) -> Result<Vec<DetectionOutcome>> {
    let mut genuine: BTreeMap<usize, DetectionReport> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for cfg in attacks {
        let mut out = DetectionOutcome {
            kind: Some(cfg.kind),
            ..Default::default()
        };
        let mut paired = 0;
        for chunk in candidates.chunks(16) {
            if paired >= pairs {
                break;
            }
            let crafted: Vec<(usize, AttackResult)> = chunk
                .par_iter()
                .map(|&i| {
                    let t = random_target(seed, i, inputs.labels[i], inputs.classes);
                    attack(ckpt, inputs.example(i), &targeted(cfg, t)).map(|r| (i, r))
                })
                .collect::<Result<_>>()?;
            let mut wins: Vec<(usize, AttackResult)> = Vec::new();
            for (i, r) in crafted {
                if paired + wins.len() >= pairs {
                    break;
                }
                out.attempted += 1;
                if r.success {
                    wins.push((i, r));
                }
            }
            let fresh: Vec<usize> = wins.iter().map(|(i, _)| *i).filter(|i| !genuine.contains_key(i)).collect();
            let reports: Vec<(usize, DetectionReport)> = fresh
                .par_iter()
                .map(|&i| analyze(ckpt, inputs.example(i), params).map(|r| (i, r)))
                .collect::<Result<_>>()?;
            genuine.extend(reports);
            let adv: Vec<DetectionReport> = wins
                .par_iter()
                .map(|(_, r)| analyze(ckpt, &r.adversarial, params))
                .collect::<Result<_>>()?;
            for ((i, _), rep) in wins.iter().zip(&adv) {
                let g = &genuine[i];
                out.counts.record(false, g.verdict == Verdict::Suspicious);
                out.counts.record(true, rep.verdict == Verdict::Suspicious);
                out.indeterminate += g.indeterminate as usize + rep.indeterminate as usize;
                if rep.verdict == Verdict::Suspicious {
                    out.suspicious_adversarial += 1;
                    out.recovered += (rep.recovered == Some(inputs.labels[*i])) as usize;
                }
            }
            paired += wins.len();
        }
        outcomes.push(out);
    }
    Ok(outcomes)
}

/// Countermeasure results for one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountermeasureOutcome {
    pub kind: AttackKind,
    pub attempts: usize,
    pub amplified_failures: usize,
    pub random_failures: usize,
    pub amplified: RatioDistribution,
    pub random: RatioDistribution,
}

impl CountermeasureOutcome {
    pub fn amplified_failure_rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.amplified_failures as f64 / self.attempts as f64)
    }

    pub fn random_failure_rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.random_failures as f64 / self.attempts as f64)
    }
}

/// For each input the goal is the probe of the genuine input itself. The
/// minimal attack is amplified with its own selection rule and, separately,
/// with random moves, both under four times the default budget. Inputs
/// whose genuine probe is not found or whose minimal attack fails are
/// skipped. `goal_scale` multiplies every goal (1 reproduces the study,
/// 0 disables it).
pub fn countermeasure_study(
    ckpt: &Checkpoint,
    inputs: &Dataset,
    indices: &[usize],
    attacks: &[AttackConfig],
    params: &ProbeParams,
    goal_scale: f64,
    seed: u64,
) -> Result<Vec<CountermeasureOutcome>> {
    let goals: Vec<Option<f64>> = indices
        .par_iter()
        .map(|&i| probe(ckpt, inputs.example(i), params).map(|p| p.theta))
        .collect::<Result<_>>()?;
    attacks
        .iter()
        .map(|cfg| {
            let big = cfg.amplified();
            let runs: Vec<Option<(AttackResult, AttackResult)>> = indices
                .par_iter()
                .zip(&goals)
                .map(|(&i, goal)| -> Result<_> {
                    let Some(goal) = goal else { return Ok(None) };
                    let goal = goal * goal_scale;
                    let x = inputs.example(i);
                    let t = random_target(seed, i, inputs.labels[i], inputs.classes);
                    let amp = match amplified_attack(ckpt, x, &targeted(&big, t), goal, params) {
                        Ok(r) => r,
                        Err(Error::AttackFailed { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                    let base = attack(ckpt, x, &targeted(cfg, t))?;
                    let rnd = random_amplification(ckpt, x, &base, &targeted(&big, t), goal, params)?;
                    Ok(Some((amp, rnd)))
                })
                .collect::<Result<_>>()?;
            let runs: Vec<(AttackResult, AttackResult)> = runs.into_iter().flatten().collect();
            let met = |r: &AttackResult| r.goal_met == Some(true);
            Ok(CountermeasureOutcome {
                kind: cfg.kind,
                attempts: runs.len(),
                amplified_failures: runs.iter().filter(|(a, _)| !met(a)).count(),
                random_failures: runs.iter().filter(|(_, r)| !met(r)).count(),
                amplified: RatioDistribution::new(
                    runs.iter().filter(|(a, _)| met(a)).filter_map(|(a, _)| a.amplitude_ratio()).collect(),
                )?,
                random: RatioDistribution::new(
                    runs.iter().filter(|(_, r)| met(r)).filter_map(|(_, r)| r.amplitude_ratio()).collect(),
                )?,
            })
        })
        .collect()
}

/// Detection on a distilled model of (1) P-Attack inputs crafted against the
/// original model that the distilled model still classifies correctly and
/// (2) C-Attack inputs crafted against the distilled model itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynergyOutcome {
    pub defended: usize,
    pub defended_flagged: usize,
    pub penetrating: usize,
    pub penetrating_flagged: usize,
    pub attempted: usize,
}

impl SynergyOutcome {
    pub fn defended_rate(&self) -> Result<f64> {
        if self.defended == 0 {
            return Err(Error::Undefined("defended detection rate"));
        }
        Ok(self.defended_flagged as f64 / self.defended as f64)
    }

    pub fn penetrating_rate(&self) -> Result<f64> {
        if self.penetrating == 0 {
            return Err(Error::Undefined("penetrating detection rate"));
        }
        Ok(self.penetrating_flagged as f64 / self.penetrating as f64)
    }
}

pub fn synergy_study(
    original: &Checkpoint,
    distilled: &Checkpoint,
    inputs: &Dataset,
    indices: &[usize],
    params: &ProbeParams,
    seed: u64,
) -> Result<SynergyOutcome> {
    if !(distilled.meta.temperature > 1.0) {
        return Err(Error::InvalidArgument("synergy study needs a distilled checkpoint".into()));
    }
    let flagged = |x: &[f64]| analyze(distilled, x, params).map(|r| r.verdict == Verdict::Suspicious);
    let rows: Vec<(Option<bool>, Option<bool>)> = indices
        .par_iter()
        .map(|&i| -> Result<_> {
            let x = inputs.example(i);
            let label = inputs.labels[i];
            let t = random_target(seed, i, label, inputs.classes);
            let p = attack(original, x, &AttackConfig::targeted(AttackKind::P, t))?;
            let defended = if p.success && distilled.model().predict(&p.adversarial) == label {
                Some(flagged(&p.adversarial)?)
            } else {
                None
            };
            let c = attack(distilled, x, &AttackConfig::targeted(AttackKind::C, t))?;
            let penetrating = if c.success { Some(flagged(&c.adversarial)?) } else { None };
            Ok((defended, penetrating))
        })
        .collect::<Result<_>>()?;
    let mut out = SynergyOutcome {
        attempted: indices.len(),
        ..Default::default()
    };
    for (d, p) in rows {
        if let Some(f) = d {
            out.defended += 1;
            out.defended_flagged += f as usize;
        }
        if let Some(f) = p {
            out.penetrating += 1;
            out.penetrating_flagged += f as usize;
        }
    }
    Ok(out)
}
