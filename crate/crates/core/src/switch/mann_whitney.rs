//! One-sided Mann-Whitney U test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest `|a| * |b|` evaluated by exact enumeration.
pub const EXACT_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U statistic of `sample_b`.
    pub u: f64,
    /// P(U >= u) under the null hypothesis.
    pub p: f64,
    pub exact: bool,
}

/// Ranks with ties averaged, doubled so they stay integral.
fn doubled_ranks(pooled: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        // Average of ranks i+1..=j+1, doubled.
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

fn tie_term(pooled: &[f64]) -> f64 {
    let mut v = pooled.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        sum += t * t * t - t;
        i = j + 1;
    }
    sum
}

/// Tests H_A: `sample_b` tends to exceed `sample_a`.
pub fn mann_whitney_one_sided(sample_a: &[f64], sample_b: &[f64]) -> Result<MannWhitney> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Empty("Mann-Whitney sample"));
    }
    if sample_a.len() * sample_b.len() <= EXACT_LIMIT {
        mann_whitney_exact(sample_a, sample_b)
    } else {
        mann_whitney_normal(sample_a, sample_b)
    }
}

/// Exact p-value from the permutation distribution of the rank sum,
/// conditional on the observed ties.
pub fn mann_whitney_exact(sample_a: &[f64], sample_b: &[f64]) -> Result<MannWhitney> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Empty("Mann-Whitney sample"));
    }
    let (na, nb) = (sample_a.len(), sample_b.len());
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let ranks = doubled_ranks(&pooled);
    let rb2: u64 = ranks[na..].iter().sum();
    let u = rb2 as f64 / 2.0 - (nb * (nb + 1)) as f64 / 2.0;

    // Enumerate the smaller group's rank-sum distribution. Large rank sums
    // of `b` are small rank sums of `a`.
    let (m, observed, b_is_small) = if nb <= na {
        (nb, rb2, true)
    } else {
        (na, ranks[..na].iter().sum::<u64>(), false)
    };
    let max_sum: u64 = {
        let mut r = ranks.clone();
        r.sort_unstable_by(|x, y| y.cmp(x));
        r[..m].iter().sum()
    };
    let width = max_sum as usize + 1;
    // counts[k][s]: number of k-subsets of the items seen so far with doubled rank sum s.
    let mut counts = vec![vec![0.0f64; width]; m + 1];
    counts[0][0] = 1.0;
    for &r in &ranks {
        let r = r as usize;
        for k in (1..=m).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let dist = &counts[m];
    let total: f64 = dist.iter().sum();
    let tail: f64 = if b_is_small {
        dist[observed as usize..].iter().sum()
    } else {
        dist[..=observed as usize].iter().sum()
    };
    Ok(MannWhitney {
        u,
        p: (tail / total).min(1.0),
        exact: true,
    })
}

/// Normal approximation with tie correction and a 0.5 continuity correction.
pub fn mann_whitney_normal(sample_a: &[f64], sample_b: &[f64]) -> Result<MannWhitney> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Empty("Mann-Whitney sample"));
    }
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let ranks = doubled_ranks(&pooled);
    let rb: f64 = ranks[sample_a.len()..].iter().sum::<u64>() as f64 / 2.0;
    let u = rb - nb * (nb + 1.0) / 2.0;
    let n = na + nb;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term(&pooled) / (n * (n - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (u - mean - 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        1.0 - normal.cdf(z)
    };
    Ok(MannWhitney { u, p, exact: false })
}
