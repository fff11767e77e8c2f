//! Message-passing Q-network.
//!
//! Each UE encodes its buffer occupancy into an uplink control message
//! (`uplink[l]`), the base station maps all uplink messages plus its channel
//! observation to one downlink message per UE (`bs`), and each UE's head
//! (`heads[l]`) turns its downlink message into Q-values over the actions.

mod checkpoint;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvState};
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Activation, Dense, Mlp, MlpCache};

pub const NUM_ACTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkShape {
    pub ucm_dim: usize,
    pub dcm_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            ucm_dim: 2,
            dcm_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

impl NetworkShape {
    pub fn validate(&self) -> Result<()> {
        if self.ucm_dim == 0 || self.dcm_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("network dimensions must be at least 1".into()));
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(input);
        s.extend(&self.hidden);
        s.push(output);
        s
    }

    pub fn bs_input_dim(&self, num_ues: usize) -> usize {
        num_ues * self.ucm_dim + num_ues + 2
    }
}

/// One-hot buffer occupancy, length `b_max + 1`.
pub fn encode_ue_obs(b: usize, b_max: usize) -> Result<Vec<f64>> {
    if b > b_max {
        return Err(Error::OutOfRange(format!("buffer occupancy {b} > b_max {b_max}")));
    }
    let mut v = vec![0.0; b_max + 1];
    v[b] = 1.0;
    Ok(v)
}

/// One-hot channel observation, length `L + 2`.
pub fn encode_bs_obs(b0: usize, num_ues: usize) -> Result<Vec<f64>> {
    if b0 > num_ues + 1 {
        return Err(Error::OutOfRange(format!("channel observation {b0} > L+1 = {}", num_ues + 1)));
    }
    let mut v = vec![0.0; num_ues + 2];
    v[b0] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpmParams {
    pub shape: NetworkShape,
    /// Input width of each UE's encoder (`b_max + 1` at construction).
    pub obs_levels: Vec<usize>,
    pub uplink: Vec<Mlp>,
    pub bs: Mlp,
    pub heads: Vec<Mlp>,
}

/// Same layout as the parameters they belong to.
pub type NpmGrads = NpmParams;

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub uplink: Vec<MlpCache>,
    pub bs: MlpCache,
    pub heads: Vec<MlpCache>,
}

impl ForwardCache {
    /// Q-values of sample `s` for UE `ue`.
    pub fn q(&self, s: usize, ue: usize) -> [f64; NUM_ACTIONS] {
        let o = &self.heads[ue].output()[s * NUM_ACTIONS..(s + 1) * NUM_ACTIONS];
        [o[0], o[1], o[2]]
    }

    pub fn num_ues(&self) -> usize {
        self.heads.len()
    }
}

impl NpmParams {
    pub fn new<R: Rng + ?Sized>(shape: NetworkShape, buffer_caps: &[usize], rng: &mut R) -> Result<Self> {
        shape.validate()?;
        if buffer_caps.is_empty() {
            return Err(Error::Config("at least one UE required".into()));
        }
        let l = buffer_caps.len();
        let obs_levels: Vec<usize> = buffer_caps.iter().map(|b| b + 1).collect();
        let uplink = obs_levels
            .iter()
            .map(|&lv| Mlp::random(&shape.sizes(lv, shape.ucm_dim), shape.activation, rng))
            .collect();
        let bs = Mlp::random(
            &shape.sizes(shape.bs_input_dim(l), l * shape.dcm_dim),
            shape.activation,
            rng,
        );
        let heads = (0..l)
            .map(|_| Mlp::random(&shape.sizes(shape.dcm_dim, NUM_ACTIONS), shape.activation, rng))
            .collect();
        Ok(Self {
            shape,
            obs_levels,
            uplink,
            bs,
            heads,
        })
    }

    pub fn num_ues(&self) -> usize {
        self.heads.len()
    }

    pub fn zeros_like(&self) -> NpmGrads {
        Self {
            shape: self.shape.clone(),
            obs_levels: self.obs_levels.clone(),
            uplink: self.uplink.iter().map(Mlp::zeros_like).collect(),
            bs: self.bs.zeros_like(),
            heads: self.heads.iter().map(Mlp::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.networks().map(Mlp::param_count).sum()
    }

    /// Networks in checkpoint order: uplink encoders, BS network, heads.
    pub fn networks(&self) -> impl Iterator<Item = &Mlp> {
        self.uplink.iter().chain(std::iter::once(&self.bs)).chain(self.heads.iter())
    }

    pub fn networks_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        self.uplink
            .iter_mut()
            .chain(std::iter::once(&mut self.bs))
            .chain(self.heads.iter_mut())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.networks().flat_map(Mlp::tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.networks_mut().flat_map(Mlp::tensors_mut)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.num_ues() == other.num_ues()
            && self
                .networks()
                .zip(other.networks())
                .all(|(a, b)| a.sizes() == b.sizes())
    }

    /// Applies `f(mine, theirs)` element-wise over every parameter.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Dimension("parameter sets have different layouts".into()));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| f(x, y));
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().flatten().map(|x| x * x).sum()
    }

    fn check_state(&self, state: &EnvState) -> Result<()> {
        let l = self.num_ues();
        if state.num_ues() != l {
            return Err(Error::Dimension(format!(
                "state has {} UEs but the network was built for {l}; expand the parameters first",
                state.num_ues()
            )));
        }
        if state.b0 > l + 1 {
            return Err(Error::OutOfRange(format!("channel observation {} > {}", state.b0, l + 1)));
        }
        Ok(())
    }

    /// Batched forward pass. Buffer occupancies above an encoder's range
    /// saturate at its top level.
    pub fn forward_batch(&self, states: &[&EnvState]) -> Result<ForwardCache> {
        for s in states {
            self.check_state(s)?;
        }
        let n = states.len();
        let l = self.num_ues();
        let ucm = self.shape.ucm_dim;
        let dcm = self.shape.dcm_dim;

        let uplink: Vec<MlpCache> = (0..l)
            .map(|ue| {
                let levels = self.obs_levels[ue];
                let mut x = vec![0.0; n * levels];
                for (s, st) in states.iter().enumerate() {
                    x[s * levels + st.buffers[ue].min(levels - 1)] = 1.0;
                }
                self.uplink[ue].forward(x, n)
            })
            .collect();

        let din = self.shape.bs_input_dim(l);
        let mut x = vec![0.0; n * din];
        for (s, st) in states.iter().enumerate() {
            let row = &mut x[s * din..(s + 1) * din];
            for (ue, c) in uplink.iter().enumerate() {
                row[ue * ucm..(ue + 1) * ucm].copy_from_slice(&c.output()[s * ucm..(s + 1) * ucm]);
            }
            row[l * ucm + st.b0] = 1.0;
        }
        let bs = self.bs.forward(x, n);

        let heads = (0..l)
            .map(|ue| {
                let d = bs.output();
                let mut x = Vec::with_capacity(n * dcm);
                for s in 0..n {
                    let off = s * l * dcm + ue * dcm;
                    x.extend_from_slice(&d[off..off + dcm]);
                }
                self.heads[ue].forward(x, n)
            })
            .collect();

        Ok(ForwardCache {
            batch: n,
            uplink,
            bs,
            heads,
        })
    }

    /// Accumulates into `grads` the gradient of a scalar loss whose
    /// derivative w.r.t. the Q-values is `dq[ue][s * 3 + a]`.
    pub fn backward_batch(&self, cache: &ForwardCache, dq: Vec<Vec<f64>>, grads: &mut NpmGrads) -> Result<()> {
        let l = self.num_ues();
        let n = cache.batch;
        if dq.len() != l || dq.iter().any(|d| d.len() != n * NUM_ACTIONS) {
            return Err(Error::Dimension("upstream Q-gradient shape mismatch".into()));
        }
        let ucm = self.shape.ucm_dim;
        let dcm = self.shape.dcm_dim;
        let mut dd = vec![0.0; n * l * dcm];
        for (ue, dq_ue) in dq.into_iter().enumerate() {
            let dx = self.heads[ue]
                .backward(&cache.heads[ue], dq_ue, &mut grads.heads[ue], true)
                .expect("input gradient requested");
            for s in 0..n {
                let off = s * l * dcm + ue * dcm;
                dd[off..off + dcm].copy_from_slice(&dx[s * dcm..(s + 1) * dcm]);
            }
        }
        let din = self.shape.bs_input_dim(l);
        let dx = self
            .bs
            .backward(&cache.bs, dd, &mut grads.bs, true)
            .expect("input gradient requested");
        for ue in 0..l {
            let mut du = Vec::with_capacity(n * ucm);
            for s in 0..n {
                let off = s * din + ue * ucm;
                du.extend_from_slice(&dx[off..off + ucm]);
            }
            self.uplink[ue].backward(&cache.uplink[ue], du, &mut grads.uplink[ue], false);
        }
        Ok(())
    }

    /// Per-UE Q-vectors for one state.
    pub fn q_values(&self, state: &EnvState) -> Result<Vec<[f64; NUM_ACTIONS]>> {
        let cache = self.forward_batch(&[state])?;
        Ok((0..self.num_ues()).map(|ue| cache.q(0, ue)).collect())
    }

    pub fn greedy_actions(&self, state: &EnvState) -> Result<Vec<Action>> {
        Ok(self.q_values(state)?.iter().map(|q| argmax(q)).collect())
    }

    /// Adds UEs. New encoders/heads and new rows/columns of the BS network
    /// are freshly initialised; everything overlapping the old layout is
    /// copied verbatim.
    pub fn expand_for_ue_count<R: Rng + ?Sized>(&self, new_l: usize, rng: &mut R) -> Result<Self> {
        let l = self.num_ues();
        if new_l <= l {
            return Err(Error::Config(format!("expansion needs more UEs than {l}, got {new_l}")));
        }
        let levels = *self.obs_levels.last().expect("at least one UE");
        let mut out = self.clone();
        for _ in l..new_l {
            let sizes = self.shape.sizes(levels, self.shape.ucm_dim);
            out.uplink.push(Mlp::random(&sizes, self.shape.activation, rng));
            out.obs_levels.push(levels);
        }
        out.bs = self.resize_bs(new_l, rng);
        for _ in l..new_l {
            let sizes = self.shape.sizes(self.shape.dcm_dim, NUM_ACTIONS);
            out.heads.push(Mlp::random(&sizes, self.shape.activation, rng));
        }
        Ok(out)
    }

    /// Keeps the first `new_l` UEs, dropping the rest and the matching
    /// rows/columns of the BS network.
    pub fn shrink_for_ue_count(&self, new_l: usize) -> Result<Self> {
        let l = self.num_ues();
        if new_l == 0 || new_l >= l {
            return Err(Error::Config(format!("shrinking needs 1 <= L' < {l}, got {new_l}")));
        }
        let mut out = self.clone();
        out.uplink.truncate(new_l);
        out.heads.truncate(new_l);
        out.obs_levels.truncate(new_l);
        // No fresh entries are needed when shrinking, so any generator will do.
        let mut unused = crate::rng::SeedStream::new(0).rng("shrink");
        out.bs = self.resize_bs(new_l, &mut unused);
        Ok(out)
    }

    /// Rebuilds the BS network for `new_l` UEs. Uplink-message column blocks
    /// and downlink-message row blocks map UE to UE; the channel-observation
    /// one-hot maps by index prefix.
    fn resize_bs<R: Rng + ?Sized>(&self, new_l: usize, rng: &mut R) -> Mlp {
        let l = self.num_ues();
        let shape = &self.shape;
        let sizes = shape.sizes(shape.bs_input_dim(new_l), new_l * shape.dcm_dim);
        let mut fresh = Mlp::random(&sizes, shape.activation, rng);
        let depth = fresh.layers.len();
        let keep = l.min(new_l);

        let old_first = &self.bs.layers[0];
        let new_first_in = fresh.layers[0].inputs;
        let mut col_map: Vec<(usize, usize)> = Vec::new();
        for ue in 0..keep {
            for c in 0..shape.ucm_dim {
                col_map.push((ue * shape.ucm_dim + c, ue * shape.ucm_dim + c));
            }
        }
        for j in 0..(l + 2).min(new_l + 2) {
            col_map.push((l * shape.ucm_dim + j, new_l * shape.ucm_dim + j));
        }

        let row_map: Vec<(usize, usize)> = if depth == 1 {
            (0..keep * shape.dcm_dim).map(|r| (r, r)).collect()
        } else {
            (0..old_first.outputs).map(|r| (r, r)).collect()
        };
        {
            let nf = &mut fresh.layers[0];
            for &(ro, rn) in &row_map {
                for &(co, cn) in &col_map {
                    nf.weights[rn * new_first_in + cn] = old_first.weights[ro * old_first.inputs + co];
                }
                nf.bias[rn] = old_first.bias[ro];
            }
        }
        if depth > 1 {
            for i in 1..depth - 1 {
                fresh.layers[i] = self.bs.layers[i].clone();
            }
            let old_last = &self.bs.layers[depth - 1];
            let nl = &mut fresh.layers[depth - 1];
            for r in 0..keep * shape.dcm_dim {
                nl.weights[r * nl.inputs..(r + 1) * nl.inputs].copy_from_slice(old_last.row(r));
                nl.bias[r] = old_last.bias[r];
            }
        }
        fresh
    }
}

pub fn pipeline_forward(params: &NpmParams, state: &EnvState) -> Result<(Vec<[f64; NUM_ACTIONS]>, ForwardCache)> {
    let cache = params.forward_batch(&[state])?;
    let q = (0..params.num_ues()).map(|ue| cache.q(0, ue)).collect();
    Ok((q, cache))
}

pub fn pipeline_backward(
    params: &NpmParams,
    cache: &ForwardCache,
    dq: &[[f64; NUM_ACTIONS]],
) -> Result<NpmGrads> {
    let mut grads = params.zeros_like();
    let dq = dq.iter().map(|d| d.to_vec()).collect();
    params.backward_batch(cache, dq, &mut grads)?;
    Ok(grads)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(q: &[f64; NUM_ACTIONS]) -> Action {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

pub fn select_action<R: Rng + ?Sized>(q: &[f64; NUM_ACTIONS], epsilon: f64, rng: &mut R) -> Action {
    if epsilon > 0.0 && rng.gen_bool(epsilon.min(1.0)) {
        Action::ALL[rng.gen_range(0..NUM_ACTIONS)]
    } else {
        argmax(q)
    }
}
