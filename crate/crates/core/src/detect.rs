//! Tampering analysis by adversarial-radius probing.
//!
//! Pipeline for one input `x` classified as `o`:
//!
//! 1. rank pixels by `|∂ℓ(f(x), o)/∂x|` and greedily pick `n` square `d×d`
//!    regions maximising `Σ c^{-rank}` over still-uncovered pixels;
//! 2. search the sampling rate `θ` upward: at each level run `T` trials that
//!    flip every region pixel independently with probability `θ` to its
//!    farther extreme; the probe `ρ(x)` is the first level with a
//!    class-changing trial;
//! 3. collect `k` class-changing "shadows" at rate `ρ(x)` and probe each;
//! 4. score `mean 1/(1 + exp(1 − ρ/ρ_s))`, genuine iff above the threshold;
//!    suspicious inputs get the modal shadow class as the recovered class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grad::loss_and_gradient;
use crate::network::argmax;
use crate::rng::{rng_stream, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeParams {
    /// Side `d` of each square region.
    pub region_size: usize,
    /// Number of regions `n`.
    pub regions: usize,
    /// Ranking coefficient `c ≥ 1`.
    pub ranking: f64,
    /// Shadow inputs `k`.
    pub shadows: usize,
    pub threshold: f64,
    /// Trials per sampling-rate level `T`.
    pub trials: usize,
    /// Spacing of the sampling-rate grid; `None` means `1/|π|`.
    pub resolution: Option<f64>,
    /// Shadow generation gives up after `attempt_factor · k` trials.
    pub attempt_factor: usize,
    pub seed: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            region_size: 4,
            regions: 8,
            ranking: 1.25,
            shadows: 4,
            threshold: 0.625,
            trials: 20,
            resolution: None,
            attempt_factor: 100,
            seed: 0,
        }
    }
}

impl ProbeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("probe parameters: {m}")));
        if self.region_size == 0 || self.regions == 0 || self.shadows == 0 || self.trials == 0 {
            return bad("d, n, k and T must be at least 1");
        }
        if !(self.ranking >= 1.0) {
            return bad("ranking coefficient must be ≥ 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if let Some(r) = self.resolution {
            if !(r > 0.0 && r <= 1.0) {
                return bad("resolution must lie in (0, 1]");
            }
        }
        if self.attempt_factor == 0 {
            return bad("attempt factor must be at least 1");
        }
        Ok(())
    }
}

/// A `d×d` window anchored at `(row, col)`; `pixels` are flat spatial indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRegionSet {
    /// In selection order.
    pub regions: Vec<Region>,
    /// Sorted union of all region pixels (the set `π`).
    pub union: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLog {
    pub level: usize,
    pub theta: f64,
    pub trials: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `θ*`, or `None` when no searched level changed the class.
    pub theta: Option<f64>,
    pub log: Vec<LevelLog>,
    /// Class-changing inputs found at `θ*`.
    #[serde(skip)]
    pub witnesses: Vec<Vec<f64>>,
}

impl ProbeResult {
    pub fn found(&self) -> bool {
        self.theta.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Shadow {
    pub input: Vec<f64>,
    pub class: usize,
    pub probs: Vec<f64>,
    pub probe: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ShadowSet {
    pub shadows: Vec<Shadow>,
    pub attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Genuine,
    Suspicious,
}

/// Everything [`analyze`] learned about one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub format_version: u32,
    pub class: usize,
    pub probe: Option<f64>,
    pub shadow_probes: Vec<Option<f64>>,
    pub shadow_classes: Vec<usize>,
    /// `None` when the probe was not found.
    pub score: Option<f64>,
    pub verdict: Verdict,
    pub recovered: Option<usize>,
    /// Probe not found: the verdict defaults to genuine.
    pub indeterminate: bool,
    /// Fewer than `k` shadows were found within the attempt cap.
    pub shadow_shortfall: bool,
    pub params: ProbeParams,
}

/// Input geometry as `(channels, height, width)`.
fn geometry(ckpt: &Checkpoint) -> (usize, usize, usize) {
    let [c, h, w] = ckpt.spec.input_shape();
    (c, h, w)
}

/// Ranks (1 = most salient) of every entry of `saliency` by descending
/// absolute value, lower index first on ties.
pub fn ranks_from_saliency(saliency: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[b].abs().total_cmp(&saliency[a].abs()).then(a.cmp(&b)));
    let mut ranks = vec![0; saliency.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Pixel ranks of `x` from the loss gradient at its predicted class
/// (largest absolute channel gradient per pixel), taken at the checkpoint's
/// training temperature.
pub fn rank_components(ckpt: &Checkpoint, x: &[f64]) -> Result<Vec<usize>> {
    let (c, h, w) = geometry(ckpt);
    let model = ckpt.model();
    let class = model.predict(x);
    let xt = Tensor::new(vec![c, h, w], x.to_vec())?;
    let (_, g) = loss_and_gradient(model, &xt, class, ckpt.meta.temperature)?;
    let g = g.data();
    let per_pixel: Vec<f64> = (0..h * w)
        .map(|p| (0..c).fold(0.0, |m, ch| f64::max(m, g[ch * h * w + p].abs())))
        .collect();
    Ok(ranks_from_saliency(&per_pixel))
}

/// `Σ c^{-rank}` over the region pixels not yet covered.
pub fn region_saliency(region: &[usize], ranks: &[usize], covered: &[bool], c: f64) -> f64 {
    region
        .iter()
        .filter(|&&p| !covered[p])
        .map(|&p| c.powf(-(ranks[p] as f64)))
        .sum()
}

/// Greedy region selection from precomputed pixel ranks on an `h×w` grid.
pub fn select_regions_from_ranks(h: usize, w: usize, ranks: &[usize], params: &ProbeParams) -> Result<SaliencyRegionSet> {
    let d = params.region_size;
    if h < d || w < d {
        return Err(Error::InvalidArgument(format!("image {h}×{w} smaller than region {d}×{d}")));
    }
    let anchors: Vec<Region> = (0..=h - d)
        .flat_map(|row| (0..=w - d).map(move |col| (row, col)))
        .map(|(row, col)| Region {
            row,
            col,
            pixels: (0..d).flat_map(|i| (0..d).map(move |j| (row + i) * w + col + j)).collect(),
        })
        .collect();
    let mut covered = vec![false; h * w];
    let mut taken = vec![false; anchors.len()];
    let mut regions = Vec::new();
    for _ in 0..params.regions {
        let mut best: Option<(usize, f64)> = None;
        for (a, region) in anchors.iter().enumerate() {
            if taken[a] {
                continue;
            }
            let s = region_saliency(&region.pixels, ranks, &covered, params.ranking);
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((a, s));
            }
        }
        let Some((a, _)) = best else { break };
        taken[a] = true;
        for &p in &anchors[a].pixels {
            covered[p] = true;
        }
        regions.push(anchors[a].clone());
    }
    let union = (0..h * w).filter(|&p| covered[p]).collect();
    Ok(SaliencyRegionSet { regions, union })
}

pub fn select_saliency_regions(ckpt: &Checkpoint, x: &[f64], params: &ProbeParams) -> Result<SaliencyRegionSet> {
    let (_, h, w) = geometry(ckpt);
    let d = params.region_size;
    if h < d || w < d {
        return Err(Error::InvalidArgument(format!("image {h}×{w} smaller than region {d}×{d}")));
    }
    let ranks = rank_components(ckpt, x)?;
    select_regions_from_ranks(h, w, &ranks, params)
}

/// Farther of the two extremes `±1` from `v` (−1 on the tie at 0).
pub fn flip_value(v: f64) -> f64 {
    if v >= 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// One random flip perturbation of `x` over the pixels of `union` at rate `theta`.
fn perturb(x: &[f64], union: &[usize], channels: usize, plane: usize, theta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    for &p in union {
        if rng.random::<f64>() < theta {
            for ch in 0..channels {
                let i = ch * plane + p;
                out[i] = flip_value(x[i]);
            }
        }
    }
    out
}

/// Sampling-rate grid: `(level, θ)` pairs with `θ = level · resolution`, capped at 1.
fn levels(union_len: usize, params: &ProbeParams) -> Vec<(usize, f64)> {
    let res = params.resolution.unwrap_or(1.0 / union_len.max(1) as f64);
    let count = (1.0 / res - 1e-9).ceil() as usize;
    (1..=count).map(|l| (l, (l as f64 * res).min(1.0))).collect()
}

/// Searches `θ*` for `x`; `context` separates the random streams of
/// different inputs analysed with the same seed. Levels at or above
/// `stop_before` (when given) are not searched.
fn search_probe(
    ckpt: &Checkpoint,
    x: &[f64],
    regions: &SaliencyRegionSet,
    params: &ProbeParams,
    context: u64,
    stop_before: Option<f64>,
) -> ProbeResult {
    let (c, h, w) = geometry(ckpt);
    let model = ckpt.model();
    let class = model.predict(x);
    let mut log = Vec::new();
    if regions.union.is_empty() {
        return ProbeResult {
            theta: None,
            log,
            witnesses: Vec::new(),
        };
    }
    for (level, theta) in levels(regions.union.len(), params) {
        if stop_before.is_some_and(|s| theta >= s - 1e-12) {
            break;
        }
        let mut witnesses = Vec::new();
        for trial in 0..params.trials {
            let mut rng = rng_stream(params.seed, &[tag::PROBE, context, level as u64, trial as u64]);
            let candidate = perturb(x, &regions.union, c, h * w, theta, &mut rng);
            if model.predict(&candidate) != class {
                witnesses.push(candidate);
            }
        }
        log.push(LevelLog {
            level,
            theta,
            trials: params.trials,
            successes: witnesses.len(),
        });
        if !witnesses.is_empty() {
            return ProbeResult {
                theta: Some(theta),
                log,
                witnesses,
            };
        }
    }
    ProbeResult {
        theta: None,
        log,
        witnesses: Vec::new(),
    }
}

/// Estimates the probe `θ*` of `x` over the given regions.
pub fn estimate_probe(ckpt: &Checkpoint, x: &[f64], regions: &SaliencyRegionSet, params: &ProbeParams) -> Result<ProbeResult> {
    params.validate()?;
    if regions.regions.is_empty() {
        return Err(Error::InvalidArgument("no saliency regions".into()));
    }
    Ok(search_probe(ckpt, x, regions, params, 0, None))
}

/// Region selection followed by probe estimation.
pub fn probe(ckpt: &Checkpoint, x: &[f64], params: &ProbeParams) -> Result<ProbeResult> {
    let regions = select_saliency_regions(ckpt, x, params)?;
    estimate_probe(ckpt, x, &regions, params)
}

/// Whether the probe of `x` is at least `goal`: no searched level below
/// `goal` changes the class. Cheaper than a full search.
pub fn probe_at_least(ckpt: &Checkpoint, x: &[f64], goal: f64, params: &ProbeParams) -> Result<bool> {
    if goal <= 0.0 {
        return Ok(true);
    }
    let regions = select_saliency_regions(ckpt, x, params)?;
    Ok(search_probe(ckpt, x, &regions, params, 0, Some(goal)).theta.is_none())
}

fn collect_shadows(
    ckpt: &Checkpoint,
    x: &[f64],
    theta: f64,
    regions: &SaliencyRegionSet,
    params: &ProbeParams,
) -> Result<ShadowSet> {
    let (c, h, w) = geometry(ckpt);
    let model = ckpt.model();
    let class = model.predict(x);
    let cap = params.attempt_factor * params.shadows;
    let mut inputs = Vec::new();
    let mut attempts = 0;
    while inputs.len() < params.shadows && attempts < cap {
        let mut rng = rng_stream(params.seed, &[tag::SHADOW, attempts as u64]);
        attempts += 1;
        let candidate = perturb(x, &regions.union, c, h * w, theta, &mut rng);
        if model.predict(&candidate) != class {
            inputs.push(candidate);
        }
    }
    let mut shadows = Vec::with_capacity(inputs.len());
    for (s, input) in inputs.into_iter().enumerate() {
        let probs = model.probs(&input, 1.0);
        let own = select_saliency_regions(ckpt, &input, params)?;
        let probe = search_probe(ckpt, &input, &own, params, s as u64 + 1, None).theta;
        shadows.push(Shadow {
            class: argmax(&probs),
            input,
            probs,
            probe,
        });
    }
    Ok(ShadowSet { shadows, attempts })
}

/// Collects `k` class-changing perturbations of `x` at rate `θ*` and probes each.
pub fn generate_shadows(
    ckpt: &Checkpoint,
    x: &[f64],
    theta: Option<f64>,
    regions: &SaliencyRegionSet,
    params: &ProbeParams,
) -> Result<ShadowSet> {
    params.validate()?;
    let theta = theta.ok_or_else(|| Error::InvalidArgument("shadows need a found probe".into()))?;
    let set = collect_shadows(ckpt, x, theta, regions, params)?;
    if set.shadows.len() < params.shadows {
        return Err(Error::UnstableProbe {
            attempts: set.attempts,
            found: set.shadows.len(),
            wanted: params.shadows,
        });
    }
    Ok(set)
}

/// Sigmoid term `1/(1 + exp(1 − ratio))` for one shadow.
pub fn genuineness_term(ratio: f64) -> f64 {
    1.0 / (1.0 + (1.0 - ratio).exp())
}

/// Mean genuineness over the shadows; a shadow whose probe was not found
/// counts as ratio 0. Genuine iff the score exceeds `threshold`.
pub fn differential_analysis(rho: f64, shadow_probes: &[Option<f64>], threshold: f64) -> Result<(f64, Verdict)> {
    if !(rho > 0.0) || shadow_probes.is_empty() {
        return Err(Error::InvalidArgument("differential analysis needs ρ > 0 and shadows".into()));
    }
    let mut total = 0.0;
    for p in shadow_probes {
        let ratio = match *p {
            Some(pe) if pe > 0.0 => rho / pe,
            Some(pe) => return Err(Error::InvalidArgument(format!("shadow probe {pe}"))),
            None => 0.0,
        };
        total += genuineness_term(ratio);
    }
    let score = total / shadow_probes.len() as f64;
    let verdict = if score > threshold { Verdict::Genuine } else { Verdict::Suspicious };
    Ok((score, verdict))
}

/// Modal shadow class; ties go to the class with the highest mean shadow
/// probability, then to the lower class index.
pub fn consensus_analysis(classes: &[usize], probs: &[Vec<f64>]) -> Result<usize> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("consensus over zero shadows".into()));
    }
    let k = probs.first().map_or(0, |p| p.len()).max(classes.iter().max().map_or(0, |m| m + 1));
    let mut counts = vec![0usize; k];
    for &c in classes {
        counts[c] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let mass = |c: usize| probs.iter().map(|p| p.get(c).copied().unwrap_or(0.0)).sum::<f64>() / probs.len().max(1) as f64;
    let mut best: Option<(usize, f64)> = None;
    for c in (0..k).filter(|&c| counts[c] == top) {
        let m = mass(c);
        if best.is_none_or(|(_, bm)| m > bm) {
            best = Some((c, m));
        }
    }
    Ok(best.expect("some class reaches the top count").0)
}

/// Full analysis of one input.
pub fn analyze(ckpt: &Checkpoint, x: &[f64], params: &ProbeParams) -> Result<DetectionReport> {
    params.validate()?;
    let class = ckpt.model().predict(x);
    let regions = select_saliency_regions(ckpt, x, params)?;
    let probe = search_probe(ckpt, x, &regions, params, 0, None);
    let mut report = DetectionReport {
        format_version: 1,
        class,
        probe: probe.theta,
        shadow_probes: Vec::new(),
        shadow_classes: Vec::new(),
        score: None,
        verdict: Verdict::Genuine,
        recovered: None,
        indeterminate: false,
        shadow_shortfall: false,
        params: params.clone(),
    };
    let Some(rho) = probe.theta else {
        report.indeterminate = true;
        return Ok(report);
    };
    let set = collect_shadows(ckpt, x, rho, &regions, params)?;
    report.shadow_shortfall = set.shadows.len() < params.shadows;
    let shadows = if set.shadows.is_empty() {
        // Fall back to the probe's own class-changing witnesses.
        let model = ckpt.model();
        probe
            .witnesses
            .iter()
            .take(params.shadows)
            .enumerate()
            .map(|(s, input)| {
                let probs = model.probs(input, 1.0);
                let own = select_saliency_regions(ckpt, input, params)?;
                Ok(Shadow {
                    class: argmax(&probs),
                    probe: search_probe(ckpt, input, &own, params, s as u64 + 1, None).theta,
                    input: input.clone(),
                    probs,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        set.shadows
    };
    report.shadow_probes = shadows.iter().map(|s| s.probe).collect();
    report.shadow_classes = shadows.iter().map(|s| s.class).collect();
    let (score, verdict) = differential_analysis(rho, &report.shadow_probes, params.threshold)?;
    report.score = Some(score);
    report.verdict = verdict;
    if verdict == Verdict::Suspicious {
        let probs: Vec<Vec<f64>> = shadows.iter().map(|s| s.probs.clone()).collect();
        report.recovered = Some(consensus_analysis(&report.shadow_classes, &probs)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_by_absolute_value() {
        assert_eq!(ranks_from_saliency(&[0.1, -0.9, 0.5]), [3, 1, 2]);
        assert_eq!(ranks_from_saliency(&[0.2; 4]), [1, 2, 3, 4]);
    }

    #[test]
    fn region_saliency_cases() {
        let ranks = [1, 2, 5, 9];
        let none = [false; 4];
        let s = region_saliency(&[0, 1], &ranks, &none, 1.25);
        assert!((s - 1.44).abs() < 1e-12);
        assert_eq!(region_saliency(&[0, 1, 2], &ranks, &none, 1.0), 3.0);
        assert_eq!(region_saliency(&[0, 1], &ranks, &[true, true, false, false], 1.25), 0.0);
    }

    #[test]
    fn differential_examples() {
        let (s, v) = differential_analysis(0.1, &[Some(0.1); 3], 0.625).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert_eq!(v, Verdict::Suspicious);
        let (s, v) = differential_analysis(0.3, &[Some(0.1)], 0.625).unwrap();
        assert!((s - 0.880797077977882).abs() < 1e-12);
        assert_eq!(v, Verdict::Genuine);
        let (s, v) = differential_analysis(0.02, &[Some(0.1)], 0.625).unwrap();
        assert!((s - 0.31002551887238755).abs() < 1e-12);
        assert_eq!(v, Verdict::Suspicious);
        let (s, _) = differential_analysis(0.5, &[None], 0.625).unwrap();
        assert!((s - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);
    }

    #[test]
    fn consensus_majority_and_tie() {
        let p = |c: usize, v: f64| {
            let mut p = vec![0.0; 10];
            p[c] = v;
            p
        };
        assert_eq!(consensus_analysis(&[3, 3, 7, 3], &[p(3, 0.6), p(3, 0.6), p(7, 0.6), p(3, 0.6)]).unwrap(), 3);
        assert_eq!(consensus_analysis(&[3, 3, 7, 7], &[p(3, 0.5), p(3, 0.5), p(7, 0.9), p(7, 0.9)]).unwrap(), 7);
    }

    #[test]
    fn level_grid() {
        let p = ProbeParams::default();
        let l = levels(16, &p);
        assert_eq!(l.len(), 16);
        assert_eq!(l[0], (1, 1.0 / 16.0));
        assert_eq!(l[15].1, 1.0);
    }
}
