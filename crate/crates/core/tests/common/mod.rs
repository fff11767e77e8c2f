//! Independent reference implementations used to check the library.
#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use semmac::env::{Action, EnvState};
use semmac::npm::{Mlp, NetworkShape, NpmParams};
use semmac::rng::{SeedStream, StreamRng};

pub fn small_shape() -> NetworkShape {
    NetworkShape {
        ucm_dim: 2,
        dcm_dim: 3,
        hidden: vec![5, 4],
        ..Default::default()
    }
}

pub fn random_params(l: usize, b_max: usize, seed: u64) -> NpmParams {
    NpmParams::new(small_shape(), &vec![b_max; l], &mut SeedStream::new(seed).rng("init")).unwrap()
}

pub fn random_state(l: usize, b_max: usize, rng: &mut StreamRng) -> EnvState {
    EnvState {
        buffers: (0..l).map(|_| rng.gen_range(0..=b_max)).collect(),
        b0: rng.gen_range(0..=l + 1),
    }
}

pub fn random_action(rng: &mut StreamRng) -> Action {
    Action::from_index(rng.gen_range(0..3)).unwrap()
}

/// Scalar-loop forward pass of one network.
pub fn naive_mlp(net: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for (i, layer) in net.layers.iter().enumerate() {
        let mut y = vec![0.0; layer.outputs];
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (k, xk) in x.iter().enumerate() {
                acc += layer.weights[o * layer.inputs + k] * xk;
            }
            *yo = if i + 1 < net.layers.len() {
                match net.activation {
                    semmac::npm::Activation::Tanh => acc.tanh(),
                    semmac::npm::Activation::Relu => acc.max(0.0),
                }
            } else {
                acc
            };
        }
        x = y;
    }
    x
}

/// Per-UE Q-vectors through uplink, BS and action networks.
pub fn naive_q(p: &NpmParams, s: &EnvState) -> Vec<[f64; 3]> {
    let l = p.num_ues();
    let mut bs_in = Vec::new();
    for ue in 0..l {
        let levels = p.obs_levels[ue];
        let mut onehot = vec![0.0; levels];
        onehot[s.buffers[ue].min(levels - 1)] = 1.0;
        bs_in.extend(naive_mlp(&p.uplink[ue], &onehot));
    }
    let mut obs = vec![0.0; l + 2];
    obs[s.b0] = 1.0;
    bs_in.extend(obs);
    let d = naive_mlp(&p.bs, &bs_in);
    let dcm = p.shape.dcm_dim;
    (0..l)
        .map(|ue| {
            let q = naive_mlp(&p.heads[ue], &d[ue * dcm..(ue + 1) * dcm]);
            [q[0], q[1], q[2]]
        })
        .collect()
}

pub fn param_count(p: &NpmParams) -> usize {
    p.tensors().map(|t| t.len()).sum()
}

/// Copy of `p` with flat parameter `idx` shifted by `h`.
pub fn nudged(p: &NpmParams, idx: usize, h: f64) -> NpmParams {
    let mut q = p.clone();
    let mut seen = 0;
    let mut hit = false;
    for t in q.tensors_mut() {
        if !hit && idx < seen + t.len() {
            t[idx - seen] += h;
            hit = true;
        }
        seen += t.len();
    }
    assert!(hit, "index {idx} out of range");
    q
}

/// Norm-wise relative error between analytic gradient entries and
/// central differences of `f` at the sampled flat indices.
pub fn fd_relative_error(
    p: &NpmParams,
    analytic: &NpmParams,
    indices: &[usize],
    h: f64,
    f: impl Fn(&NpmParams) -> f64,
) -> f64 {
    let flat = analytic.flat();
    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for &i in indices {
        let num = (f(&nudged(p, i, h)) - f(&nudged(p, i, -h))) / (2.0 * h);
        diff += (flat[i] - num).powi(2);
        norm_a += flat[i] * flat[i];
        norm_n += num * num;
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    if denom < 1e-12 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// U statistic for `b` by direct pairwise comparison.
pub fn u_pairwise(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for y in b {
        for x in a {
            if y > x {
                u += 1.0;
            } else if y == x {
                u += 0.5;
            }
        }
    }
    u
}

/// Exact one-sided p-value P(U_b >= observed) by enumerating every way of
/// splitting the pooled values into groups of the original sizes.
pub fn mw_enumerate(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let nb = b.len();
    let observed = u_pairwise(a, b);
    let mut total = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != nb {
            continue;
        }
        let (mut ga, mut gb) = (Vec::new(), Vec::new());
        for (i, v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                gb.push(*v);
            } else {
                ga.push(*v);
            }
        }
        total += 1;
        if u_pairwise(&ga, &gb) >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

pub fn random_simplex(rng: &mut StreamRng) -> [f64; 3] {
    let e: [f64; 3] = [
        -rng.gen::<f64>().max(1e-300).ln(),
        -rng.gen::<f64>().max(1e-300).ln(),
        -rng.gen::<f64>().max(1e-300).ln(),
    ];
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}
