//! Seeded sweeps shared by the focused tests and the acceptance report.
//! Each returns the worst deviation it saw.

use rand::seq::index::sample;
use rand::Rng;
use semmac::distill::{composite_loss_and_grads, kd_loss, DistillConfig};
use semmac::env::EnvState;
use semmac::npm::{pipeline_backward, pipeline_forward, NpmParams};
use semmac::rng::{SeedStream, StreamRng};
use semmac::switch::{mann_whitney_exact, mann_whitney_normal, mann_whitney_one_sided};
use semmac::train::{Experience, TargetRule, TrainConfig};

use super::*;

pub const FD_STEP: f64 = 1e-5;
const FD_COORDS: usize = 40;

fn sampled_indices(n: usize, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    sample(rng, n, k.min(n)).into_vec()
}

pub fn experiences(l: usize, n: usize, rng: &mut StreamRng) -> Vec<Experience> {
    (0..n)
        .map(|i| Experience {
            state: random_state(l, 3, rng),
            actions: (0..l).map(|_| random_action(rng)).collect(),
            rewards: (0..l).map(|_| rng.gen_range(-4.0..10.0)).collect(),
            next_state: random_state(l, 3, rng),
            next_actions: Some((0..l).map(|_| random_action(rng)).collect()),
            terminal: i % 5 == 4,
        })
        .collect()
}

/// Largest |q - q_ref| between the library forward pass and the scalar one.
pub fn forward_worst(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = SeedStream::new(case).rng("states");
        let l = 1 + (case as usize % 4);
        let p = random_params(l, 3, case);
        for _ in 0..5 {
            let s = random_state(l, 3, &mut rng);
            let (q, _) = pipeline_forward(&p, &s).unwrap();
            for (a, b) in q.iter().flatten().zip(naive_q(&p, &s).iter().flatten()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Gradient of a random linear read-out of the full uplink, BS and action
/// network composition against central differences.
pub fn composition_fd_worst(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = SeedStream::new(case).rng("fd-pipeline");
        let l = 1 + (case as usize % 3);
        let p = random_params(l, 3, 1000 + case);
        let s = random_state(l, 3, &mut rng);
        let w: Vec<[f64; 3]> = (0..l)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let f = |q: &NpmParams| -> f64 {
            naive_q(q, &s)
                .iter()
                .zip(&w)
                .map(|(q, w)| q.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (_, cache) = pipeline_forward(&p, &s).unwrap();
        let g = pipeline_backward(&p, &cache, &w).unwrap();
        let idx = sampled_indices(param_count(&p), FD_COORDS, &mut rng);
        worst = worst.max(fd_relative_error(&p, &g, &idx, FD_STEP, f));
    }
    worst
}

/// Gradient of the TD + distillation loss against central differences,
/// alternating the two TD target rules.
pub fn composite_fd_worst(cases: u64) -> f64 {
    let dcfg = DistillConfig::default();
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = SeedStream::new(case).rng("fd-composite");
        let l = 1 + (case as usize % 3);
        let online = random_params(l, 3, 2000 + case);
        let target = random_params(l, 3, 3000 + case);
        let tcfg = TrainConfig {
            target_rule: if case % 2 == 0 { TargetRule::MaxNextQ } else { TargetRule::StoredNextAction },
            ..Default::default()
        };
        let batch = experiences(l, 6, &mut rng);
        let refs: Vec<&Experience> = batch.iter().collect();
        let states: Vec<EnvState> = (0..5).map(|_| random_state(l, 3, &mut rng)).collect();
        let srefs: Vec<&EnvState> = states.iter().collect();
        let teacher: Vec<Vec<[f64; 3]>> =
            (0..5).map(|_| (0..l).map(|_| random_simplex(&mut rng)).collect()).collect();
        let (_, g) = composite_loss_and_grads(&online, &target, &refs, &srefs, &teacher, &tcfg, &dcfg).unwrap();
        let f = |p: &NpmParams| composite_loss_and_grads(p, &target, &refs, &srefs, &teacher, &tcfg, &dcfg).unwrap().0.total;
        let idx = sampled_indices(param_count(&online), FD_COORDS, &mut rng);
        worst = worst.max(fd_relative_error(&online, &g, &idx, FD_STEP, f));
    }
    worst
}

/// Simplex pairs violating non-negativity or zero-iff-equal.
pub fn kld_violations(pairs: usize) -> usize {
    let mut rng = SeedStream::new(77).rng("simplex");
    let mut bad = 0;
    for _ in 0..pairs {
        let m = random_simplex(&mut rng);
        let p = random_simplex(&mut rng);
        let d = kd_loss(&[m], &[p]).unwrap();
        let equal = m.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-6);
        let self_d = kd_loss(&[m], &[m]).unwrap();
        if d < 0.0 || (d <= 1e-12 && !equal) || self_d.abs() >= 1e-12 {
            bad += 1;
        }
    }
    bad
}

/// Draws with ties when `levels` is small.
pub fn rank_sample(rng: &mut StreamRng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / f64::from(levels)).collect()
}

/// Largest |p_exact - p_enumerated| over all sample sizes up to 8, with and
/// without ties. Panics if the exact path is not taken or U disagrees.
pub fn mw_exact_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for n1 in 1..=8 {
        for n2 in 1..=8 {
            let mut rng = SeedStream::new((n1 * 10 + n2) as u64).rng("mw");
            for (rep, levels) in [1000, 1000, 6, 3].into_iter().enumerate() {
                let a = rank_sample(&mut rng, n1, levels);
                let mut b = rank_sample(&mut rng, n2, levels);
                if rep == 1 {
                    b.iter_mut().for_each(|v| *v += 0.3);
                }
                let got = mann_whitney_one_sided(&a, &b).unwrap();
                assert!(got.exact);
                assert_eq!(got.u, u_pairwise(&a, &b));
                worst = worst.max((got.p - mw_enumerate(&a, &b)).abs());
            }
        }
    }
    worst
}

/// Largest |p_normal - p_exact| for sample sizes 8 to 12.
pub fn mw_normal_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for n1 in 8..=12 {
        for n2 in 8..=12 {
            let mut rng = SeedStream::new((n1 * 100 + n2) as u64).rng("mw-approx");
            for shift in [0.0, 0.1, 0.25, 0.4] {
                let a = rank_sample(&mut rng, n1, 10_000);
                let b: Vec<f64> = rank_sample(&mut rng, n2, 10_000).iter().map(|v| v + shift).collect();
                let e = mann_whitney_exact(&a, &b).unwrap().p;
                let n = mann_whitney_normal(&a, &b).unwrap().p;
                worst = worst.max((e - n).abs());
            }
        }
    }
    worst
}

/// Largest deviation from the hand-computed resilience and
/// meta-resilience values.
pub fn metric_examples_worst() -> f64 {
    use semmac::metrics::{meta_resilience, resilience, TargetGrid};
    let grid = TargetGrid::default();
    // Constant 0.5 against the default grid: mean over g of min(0.5 / g, 1).
    let constant_half: f64 = (0..100)
        .map(|i| {
            let g = 0.01 + i as f64 * (1.0 - 0.01) / 99.0;
            (0.5 / g).min(1.0)
        })
        .sum::<f64>()
        / 100.0;
    let cases = [
        (resilience(&[0.5; 7], 1.0).unwrap(), 0.5),
        (resilience(&[0.2, 0.4, 0.6], 0.5).unwrap(), (0.4 + 0.8 + 1.0) / 3.0),
        (resilience(&[0.3, 0.9, 0.4], 0.3).unwrap(), 1.0),
        (meta_resilience(&[0.5; 10], &grid).unwrap(), constant_half),
        (meta_resilience(&[1.0; 4], &grid).unwrap(), 1.0),
    ];
    cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max)
}

/// Random series whose resilience curve increases somewhere or whose mean
/// differs from the meta-resilience.
pub fn curve_violations(series_count: usize) -> usize {
    use semmac::metrics::{meta_resilience, resilience_curve, TargetGrid};
    let grid = TargetGrid::default();
    let mut rng = SeedStream::new(5).rng("series");
    let mut bad = 0;
    for _ in 0..series_count {
        let n = rng.gen_range(1..200);
        let series: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let curve = resilience_curve(&series, &grid).unwrap();
        let mean = curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64;
        if !curve.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15)
            || (mean - meta_resilience(&series, &grid).unwrap()).abs() >= 1e-12
        {
            bad += 1;
        }
    }
    bad
}
