mod common;

use std::collections::HashSet;

use advlab::attacks::{attack, AttackConfig, AttackKind};
use advlab::data::{load_idx, pixel_to_unit, write_idx, Dataset};
use advlab::detect::{
    differential_analysis, genuineness_term, ranks_from_saliency, select_regions_from_ranks, ProbeParams, Verdict,
};
use advlab::network::frobenius_radius_bound;
use advlab::trainer::{adaptive_lr_update, nesterov_step, robust_perturbation, Norm};
use advlab::{Checkpoint, Tensor, Weights};
use common::{random_mlp, uniform};
use proptest::prelude::*;

fn probe_value() -> impl Strategy<Value = f64> {
    (1u32..=200).prop_map(|l| l as f64 / 200.0)
}

fn shadow_list() -> impl Strategy<Value = Vec<Option<f64>>> {
    prop::collection::vec(prop::option::weighted(0.9, probe_value()), 1..8)
}

proptest! {
    #[test]
    fn score_lies_between_its_bounds(rho in probe_value(), shadows in shadow_list()) {
        // Every shadow term is at least the ratio-0 value 1/(1+e) and below 1.
        let (s, _) = differential_analysis(rho, &shadows, 0.625).unwrap();
        let floor = 1.0 / (1.0 + std::f64::consts::E);
        prop_assert!(s >= floor - 1e-15 && s <= 1.0);
    }

    #[test]
    fn score_grows_with_the_probe(a in probe_value(), b in probe_value(), shadows in shadow_list()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s_lo, _) = differential_analysis(lo, &shadows, 0.5).unwrap();
        let (s_hi, _) = differential_analysis(hi, &shadows, 0.5).unwrap();
        prop_assert!(s_lo <= s_hi);
    }

    #[test]
    fn score_falls_as_a_shadow_probe_grows(rho in probe_value(), a in probe_value(), b in probe_value()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s_lo, _) = differential_analysis(rho, &[Some(lo)], 0.5).unwrap();
        let (s_hi, _) = differential_analysis(rho, &[Some(hi)], 0.5).unwrap();
        prop_assert!(s_hi <= s_lo);
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry(d in -20.0f64..20.0) {
        prop_assert!((genuineness_term(1.0) - 0.5).abs() < 1e-15);
        let sum = genuineness_term(1.0 + d) + genuineness_term(1.0 - d);
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn verdict_is_strict_at_the_threshold(rho in probe_value(), shadows in shadow_list()) {
        let (s, _) = differential_analysis(rho, &shadows, 0.5).unwrap();
        let (_, at) = differential_analysis(rho, &shadows, s).unwrap();
        prop_assert_eq!(at, Verdict::Suspicious);
        let (_, below) = differential_analysis(rho, &shadows, s * (1.0 - 1e-9)).unwrap();
        prop_assert_eq!(below, Verdict::Genuine);
    }

    #[test]
    fn ranks_are_a_permutation(v in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let r = ranks_from_saliency(&v);
        let mut sorted = r.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (1..=v.len()).collect::<Vec<_>>());
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i].abs() > v[j].abs() {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn greedy_regions_match_a_set_based_oracle(
        seed in any::<u64>(),
        n in 1usize..4,
        d in 2usize..4,
        c in 1.0f64..2.0,
    ) {
        let (h, w) = (8, 9);
        let sal = uniform(h * w, seed, 0);
        let ranks = ranks_from_saliency(&sal);
        let params = ProbeParams { regions: n, region_size: d, ranking: c, ..Default::default() };
        let got = select_regions_from_ranks(h, w, &ranks, &params).unwrap();
        let want = greedy_oracle(h, w, d, n, &ranks, c);
        let anchors: Vec<(usize, usize)> = got.regions.iter().map(|r| (r.row, r.col)).collect();
        prop_assert_eq!(anchors, want);
        let union: HashSet<usize> = got.regions.iter().flat_map(|r| r.pixels.iter().copied()).collect();
        prop_assert_eq!(union.len(), got.union.len());
        prop_assert!(got.union.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn nesterov_matches_closed_form(w in -3.0f64..3.0, v in -1.0f64..1.0, g in -2.0f64..2.0,
                                    lr in 0.001f64..0.5, mu in 0.0f64..0.99) {
        let one = |x: f64| {
            let mut m = Weights::new();
            m.insert("p".into(), Tensor::vector(&[x]));
            m
        };
        let (w2, v2) = nesterov_step(&one(w), &one(v), &one(g), lr, mu).unwrap();
        let v_expect = mu * v - lr * g;
        prop_assert_eq!(v2["p"].data()[0], v_expect);
        prop_assert_eq!(w2["p"].data()[0], w + v_expect);
    }

    #[test]
    fn adaptive_rate_matches_closed_form(lr in 0.001f64..1.0, best in 0.0f64..3.0, loss in 0.0f64..3.0) {
        let got = adaptive_lr_update(lr, best, loss, 2.5, 0.75);
        let s = if best >= loss { 2.5 } else { 0.75 };
        prop_assert!((got - lr * ((best - loss) / s).exp()).abs() <= 1e-15 * got.max(1.0));
        if loss < best { prop_assert!(got > lr); }
        if loss > best { prop_assert!(got < lr); }
    }

    #[test]
    fn robust_perturbation_respects_its_norm(g in prop::collection::vec(-1.0f64..1.0, 1..40), budget in 0.01f64..6.0) {
        let linf = robust_perturbation(&g, Norm::Linf, budget).unwrap();
        prop_assert!(linf.iter().all(|r| r.abs() <= budget));
        let l1 = robust_perturbation(&g, Norm::L1, budget).unwrap();
        let total: f64 = l1.iter().map(|r| r.abs()).sum();
        prop_assert!(total <= budget + 1e-12);
        prop_assert!(l1.iter().all(|r| r.abs() <= 2.0));
        for (r, gi) in linf.iter().chain(&l1).zip(g.iter().cycle()) {
            prop_assert!(r * gi >= 0.0);
        }
    }

    #[test]
    fn checkpoint_json_round_trip(seed in any::<u64>(), hidden in 1usize..6) {
        let c = random_mlp(3, &[hidden], 4, seed);
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        prop_assert!(c.bit_identical(&back));
    }

    #[test]
    fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 12..=12 * 5), seed in any::<u64>()) {
        let n = pixels.len() / 12;
        let data: Vec<f64> = pixels[..n * 12].iter().map(|&p| pixel_to_unit(p)).collect();
        let labels: Vec<usize> = (0..n).map(|i| ((seed >> (i % 60)) % 10) as usize).collect();
        let ds = Dataset::new(Tensor::new(vec![n, 1, 3, 4], data).unwrap(), labels, 10, "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(back.images.data(), ds.images.data());
        prop_assert_eq!(back.labels, ds.labels);
    }
}

/// Greedy selection written over hash sets; ties go to the lowest
/// row-major anchor.
fn greedy_oracle(h: usize, w: usize, d: usize, n: usize, ranks: &[usize], c: f64) -> Vec<(usize, usize)> {
    let mut covered: HashSet<usize> = HashSet::new();
    let mut chosen = Vec::new();
    for _ in 0..n {
        let mut best: Option<((usize, usize), f64)> = None;
        for row in 0..=h - d {
            for col in 0..=w - d {
                if chosen.contains(&(row, col)) {
                    continue;
                }
                let mut s = 0.0;
                for i in row..row + d {
                    for j in col..col + d {
                        if !covered.contains(&(i * w + j)) {
                            s += 1.0 / c.powi(ranks[i * w + j] as i32);
                        }
                    }
                }
                if s > 0.0 && best.map_or(true, |(_, b)| s > b) {
                    best = Some(((row, col), s));
                }
            }
        }
        let Some(((row, col), _)) = best else { break };
        chosen.push((row, col));
        for i in row..row + d {
            for j in col..col + d {
                covered.insert(i * w + j);
            }
        }
    }
    chosen
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// No class change lies closer (in l2) than the Frobenius bound, so every
    /// successful attack must respect it.
    #[test]
    fn attacks_never_beat_the_frobenius_bound(seed in any::<u64>(), depth in 0usize..3) {
        let hidden: Vec<usize> = (0..depth).map(|i| 5 + i).collect();
        let ckpt = random_mlp(4, &hidden, 3, seed);
        let x = uniform(4, seed, 1);
        let bound = frobenius_radius_bound(ckpt.model(), &Tensor::vector(&x)).unwrap();
        for kind in AttackKind::ALL {
            let budget = if kind.is_grid() { 2.0 } else { 4.0 };
            let cfg = AttackConfig { budget: Some(budget), ..AttackConfig::new(kind) };
            let r = attack(&ckpt, &x, &cfg).unwrap();
            if r.success {
                let l2 = r.perturbation.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(bound <= l2 + 1e-12, "{kind}: bound {bound} > {l2}");
            }
        }
    }

    #[test]
    fn successful_attacks_reverify(seed in any::<u64>(), target in 0usize..3) {
        let ckpt = random_mlp(6, &[8], 3, seed);
        let x = uniform(6, seed, 2);
        let class = ckpt.model().predict(&x);
        prop_assume!(target != class);
        for kind in AttackKind::ALL {
            let cfg = AttackConfig { budget: Some(if kind.is_grid() { 2.0 } else { 6.0 }), ..AttackConfig::targeted(kind, target) };
            let r = attack(&ckpt, &x, &cfg).unwrap();
            prop_assert_eq!(r.class_before, class);
            prop_assert_eq!(ckpt.model().predict(&r.adversarial), r.class_after);
            prop_assert!(r.adversarial.iter().all(|v| (-1.0..=1.0).contains(v)));
            for ((a, b), p) in r.adversarial.iter().zip(&x).zip(&r.perturbation) {
                prop_assert_eq!(a - b, *p);
            }
            if r.success {
                prop_assert_eq!(r.class_after, target);
            }
        }
    }
}
