//! Independent deep Q-learning for the message-passing network: replay
//! memory, TD loss, soft target updates and the per-episode training loop.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{self, Distiller};
use crate::env::{compute_rewards, Action, Env, EnvState, RewardConfig, SimConfig};
use crate::error::{Error, Result};
use crate::npm::{select_action, NpmGrads, NpmParams, NUM_ACTIONS};
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            decay: 0.9,
            floor: 0.1,
        }
    }
}

pub fn epsilon_at(episode: usize, schedule: &EpsilonSchedule) -> f64 {
    let e = schedule.start * schedule.decay.powi(episode.min(i32::MAX as usize) as i32);
    e.max(schedule.floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// max over next actions of the target network.
    #[default]
    MaxNextQ,
    /// Target network evaluated at the action actually taken next.
    StoredNextAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub sigma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: EpsilonSchedule,
    /// TTIs per training step (B).
    pub ttis_per_step: usize,
    pub target_rule: TargetRule,
    pub replay_capacity: usize,
    pub optimizer: OptimizerKind,
    /// Rescale the gradient when its L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            sigma: 1e-3,
            batch_size: 64,
            learning_rate: 1e-3,
            epsilon: EpsilonSchedule::default(),
            ttis_per_step: 4,
            target_rule: TargetRule::MaxNextQ,
            replay_capacity: 50_000,
            optimizer: OptimizerKind::adam(),
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if self.batch_size == 0 || self.ttis_per_step == 0 || self.replay_capacity == 0 {
            return Err(Error::Config("batch size, B and replay capacity must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: EnvState,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub next_state: EnvState,
    /// Actions taken in `next_state`; absent for terminal transitions.
    pub next_actions: Option<Vec<Action>>,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    items: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Uniform sample without replacement of `min(n, len)` experiences.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Experience> {
        let k = n.min(self.items.len());
        index::sample(rng, self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Mean-squared TD error averaged over UEs, and its gradient w.r.t. the
/// online parameters.
pub fn td_loss_and_grads(
    online: &NpmParams,
    target: &NpmParams,
    batch: &[&Experience],
    cfg: &TrainConfig,
) -> Result<(f64, NpmGrads)> {
    if batch.is_empty() {
        return Err(Error::Empty("TD batch"));
    }
    let l = online.num_ues();
    let n = batch.len();
    for e in batch {
        if e.actions.len() != l || e.rewards.len() != l {
            return Err(Error::Dimension(format!(
                "experience for {} UEs, network has {l}",
                e.actions.len()
            )));
        }
    }
    let states: Vec<&EnvState> = batch.iter().map(|e| &e.state).collect();
    let next: Vec<&EnvState> = batch.iter().map(|e| &e.next_state).collect();
    let cache = online.forward_batch(&states)?;
    let next_cache = target.forward_batch(&next)?;

    let scale = 1.0 / (l as f64 * n as f64);
    let mut loss = 0.0;
    let mut dq = vec![vec![0.0; n * NUM_ACTIONS]; l];
    for (s, e) in batch.iter().enumerate() {
        for ue in 0..l {
            let bootstrap = if e.terminal {
                0.0
            } else {
                let qn = next_cache.q(s, ue);
                match cfg.target_rule {
                    TargetRule::MaxNextQ => qn.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    TargetRule::StoredNextAction => match &e.next_actions {
                        Some(a) => qn[a[ue].index()],
                        None => 0.0,
                    },
                }
            };
            let y = e.rewards[ue] + cfg.gamma * bootstrap;
            let a = e.actions[ue].index();
            let diff = y - cache.q(s, ue)[a];
            loss += diff * diff * scale;
            dq[ue][s * NUM_ACTIONS + a] = -2.0 * diff * scale;
        }
    }
    let mut grads = online.zeros_like();
    online.backward_batch(&cache, dq, &mut grads)?;
    Ok((loss, grads))
}

/// target <- (1 - sigma) * target + sigma * online
pub fn soft_update(target: &mut NpmParams, online: &NpmParams, sigma: f64) -> Result<()> {
    target.zip_apply(online, |t, o| *t = (1.0 - sigma) * *t + sigma * o)
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Option<NpmParams>,
    second: Option<NpmParams>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            first: None,
            second: None,
            steps: 0,
        }
    }

    /// Drops moment estimates (needed whenever the parameter layout changes).
    pub fn reset(&mut self) {
        self.first = None;
        self.second = None;
        self.steps = 0;
    }

    pub fn step(&mut self, params: &mut NpmParams, grads: &NpmGrads) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::Dimension("gradient layout differs from parameters".into()));
        }
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => params.zip_apply(grads, |p, g| *p -= lr * g),
            OptimizerKind::Momentum { beta } => {
                let vel = self.first.get_or_insert_with(|| params.zeros_like());
                if !vel.same_layout(params) {
                    *vel = params.zeros_like();
                }
                vel.zip_apply(grads, |v, g| *v = beta * *v + g)?;
                params.zip_apply(vel, |p, v| *p -= lr * v)
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.as_ref().is_some_and(|m| !m.same_layout(params)) {
                    self.reset();
                }
                let m = self.first.get_or_insert_with(|| params.zeros_like());
                m.zip_apply(grads, |m, g| *m = beta1 * *m + (1.0 - beta1) * g)?;
                let v = self.second.get_or_insert_with(|| params.zeros_like());
                v.zip_apply(grads, |v, g| *v = beta2 * *v + (1.0 - beta2) * g * g)?;
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let step = lr * c2.sqrt() / c1;
                let eps_hat = eps * c2.sqrt();
                for ((p, m), v) in params
                    .tensors_mut()
                    .zip(self.first.as_ref().expect("set above").tensors())
                    .zip(self.second.as_ref().expect("set above").tensors())
                {
                    for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
                        *p -= step * m / (v.sqrt() + eps_hat);
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub episode: usize,
    pub step: usize,
    pub loss: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeLog {
    pub steps: Vec<StepLog>,
    /// Successful decodes during the (exploring) training run.
    pub train_successes: usize,
}

impl EpisodeLog {
    pub fn mean_loss(&self) -> Option<f64> {
        if self.steps.is_empty() {
            None
        } else {
            Some(self.steps.iter().map(|s| s.loss).sum::<f64>() / self.steps.len() as f64)
        }
    }
}

/// Online/target networks, replay, optimiser state and the exploration and
/// replay-sampling generators.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub online: NpmParams,
    pub target: NpmParams,
    pub replay: ReplayMemory,
    pub cfg: TrainConfig,
    pub reward: RewardConfig,
    optimizer: Optimizer,
    explore_rng: StreamRng,
    sample_rng: StreamRng,
    streams: SeedStream,
}

impl Trainer {
    pub fn new(params: NpmParams, cfg: TrainConfig, reward: RewardConfig, streams: SeedStream) -> Result<Self> {
        cfg.validate()?;
        reward.validate()?;
        Ok(Self {
            target: params.clone(),
            online: params,
            replay: ReplayMemory::new(cfg.replay_capacity),
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            explore_rng: streams.rng("exploration"),
            sample_rng: streams.rng("replay"),
            streams,
            cfg,
            reward,
        })
    }

    pub fn streams(&self) -> &SeedStream {
        &self.streams
    }

    /// A replay batch of the configured size (cloned).
    pub fn sample_batch(&mut self) -> Vec<Experience> {
        self.replay
            .sample(self.cfg.batch_size, &mut self.sample_rng)
            .into_iter()
            .cloned()
            .collect()
    }

    /// Replaces the parameter set after a change in UE count. Replay and
    /// optimiser state are cleared because their dimensions no longer match.
    pub fn reset_params(&mut self, params: NpmParams) {
        self.target = params.clone();
        self.online = params;
        self.replay.clear();
        self.optimizer.reset();
    }

    pub fn apply_gradients(&mut self, mut grads: NpmGrads) -> Result<()> {
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grads.sq_norm().sqrt();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.optimizer.step(&mut self.online, &grads)
    }

    /// One TD-only gradient step on a replay batch; returns the loss.
    pub fn td_step(&mut self) -> Result<f64> {
        let batch = self.replay.sample(self.cfg.batch_size, &mut self.sample_rng);
        let (loss, grads) = td_loss_and_grads(&self.online, &self.target, &batch, &self.cfg)?;
        self.apply_gradients(grads)?;
        Ok(loss)
    }

    /// Runs `ttis / B` training steps on a fresh environment. Each step plays
    /// B slots with epsilon-greedy actions, stores their transitions, takes
    /// one gradient step (TD, or TD+KD when a distiller is supplied) and
    /// soft-updates the target network.
    pub fn run_episode(
        &mut self,
        sim: &SimConfig,
        episode: usize,
        ttis: usize,
        mut kd: Option<&mut Distiller>,
    ) -> Result<EpisodeLog> {
        if sim.num_ues != self.online.num_ues() {
            return Err(Error::Dimension(format!(
                "environment has {} UEs, parameters {}",
                sim.num_ues,
                self.online.num_ues()
            )));
        }
        let b = self.cfg.ttis_per_step;
        let steps = ttis / b;
        let eps = epsilon_at(episode, &self.cfg.epsilon);
        let mut env = Env::new(sim.clone())?;
        let mut arrivals = self.streams.indexed("train/arrivals", episode as u64);
        let mut erasures = self.streams.indexed("train/erasures", episode as u64);
        let mut log = EpisodeLog::default();
        let mut pending: Option<Experience> = None;

        env.step_arrivals(&mut arrivals);
        let mut state = env.state();
        for step in 0..steps {
            for k in 0..b {
                let q = self.online.q_values(&state)?;
                let actions: Vec<Action> = q
                    .iter()
                    .map(|q| select_action(q, eps, &mut self.explore_rng))
                    .collect();
                if let Some(mut prev) = pending.take() {
                    prev.next_actions = Some(actions.clone());
                    self.store(prev, kd.as_deref_mut());
                }
                let result = env.apply_actions(&actions, &mut erasures)?;
                log.train_successes += usize::from(result.success);
                let rewards = compute_rewards(&result, &self.reward);
                let terminal = step + 1 == steps && k + 1 == b;
                if !terminal {
                    env.step_arrivals(&mut arrivals);
                }
                let next_state = env.state();
                pending = Some(Experience {
                    state: std::mem::replace(&mut state, next_state.clone()),
                    actions,
                    rewards,
                    next_state,
                    next_actions: None,
                    terminal,
                });
            }
            if step + 1 == steps {
                if let Some(last) = pending.take() {
                    self.store(last, kd.as_deref_mut());
                }
            }
            let loss = match kd.as_deref_mut() {
                Some(d) => distill::composite_step(self, d)?.total,
                None => self.td_step()?,
            };
            soft_update(&mut self.target, &self.online, self.cfg.sigma)?;
            log.steps.push(StepLog {
                episode,
                step,
                loss,
                epsilon: eps,
            });
        }
        Ok(log)
    }

    fn store(&mut self, e: Experience, kd: Option<&mut Distiller>) {
        if let Some(d) = kd {
            d.teacher_replay.push(e.state.clone());
        }
        self.replay.push(e);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npm::NetworkShape;

    fn tiny_params(l: usize, seed: u64) -> NpmParams {
        let shape = NetworkShape {
            hidden: vec![8],
            ..NetworkShape::default()
        };
        NpmParams::new(shape, &vec![3; l], &mut SeedStream::new(seed).rng("init")).unwrap()
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsilonSchedule::default();
        assert_eq!(epsilon_at(0, &s), 1.0);
        assert!((epsilon_at(1, &s) - 0.9).abs() < 1e-15);
        assert!(0.9f64.powi(40) < 0.1);
        assert_eq!(epsilon_at(40, &s), 0.1);
    }

    #[test]
    fn replay_is_bounded_fifo() {
        let mut r = ReplayMemory::new(3);
        for i in 0..5 {
            r.push(Experience {
                state: EnvState { buffers: vec![i], b0: 0 },
                actions: vec![Action::Silent],
                rewards: vec![0.0],
                next_state: EnvState { buffers: vec![i], b0: 0 },
                next_actions: None,
                terminal: false,
            });
        }
        assert_eq!(r.len(), 3);
        let kept: Vec<usize> = r.iter().map(|e| e.state.buffers[0]).collect();
        assert_eq!(kept, vec![2, 3, 4]);
        let mut rng = SeedStream::new(1).rng("s");
        let mut seen: Vec<usize> = r.sample(3, &mut rng).iter().map(|e| e.state.buffers[0]).collect();
        seen.sort();
        assert_eq!(seen, vec![2, 3, 4], "sample without replacement");
        assert_eq!(r.sample(10, &mut rng).len(), 3);
    }

    fn transition(p: &NpmParams, r: f64, terminal: bool) -> Experience {
        let l = p.num_ues();
        Experience {
            state: EnvState { buffers: vec![1; l], b0: 0 },
            actions: vec![Action::Transmit; l],
            rewards: vec![r; l],
            next_state: EnvState { buffers: vec![2; l], b0: 1 },
            next_actions: Some(vec![Action::Discard; l]),
            terminal,
        }
    }

    #[test]
    fn td_loss_zero_when_q_equals_reward_without_bootstrap() {
        let p = tiny_params(2, 1);
        let mut e = transition(&p, 0.0, false);
        let q = p.q_values(&e.state).unwrap();
        e.rewards = vec![q[0][1], q[1][1]];
        let cfg = TrainConfig { gamma: 0.0, ..Default::default() };
        let (loss, g) = td_loss_and_grads(&p, &p, &[&e], &cfg).unwrap();
        assert!(loss < 1e-28);
        assert!(g.sq_norm() < 1e-24);
    }

    #[test]
    fn td_loss_hand_arithmetic() {
        // Bias-only heads: Q(s, .) = 2.5 online, 2.0 target.
        let mut online = tiny_params(1, 2);
        let mut target = online.clone();
        for (p, v) in [(&mut online, 2.5), (&mut target, 2.0)] {
            let last = p.heads[0].layers.last_mut().unwrap();
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias = vec![v; 3];
        }
        let e = Experience {
            rewards: vec![1.0],
            ..transition(&online, 1.0, false)
        };
        let cfg = TrainConfig { gamma: 0.99, ..Default::default() };
        let (loss, _) = td_loss_and_grads(&online, &target, &[&e], &cfg).unwrap();
        assert!((loss - 0.2304).abs() < 1e-12, "{loss}");
        let stored = TrainConfig { target_rule: TargetRule::StoredNextAction, ..cfg.clone() };
        let (loss2, _) = td_loss_and_grads(&online, &target, &[&e], &stored).unwrap();
        assert!((loss2 - 0.2304).abs() < 1e-12);
        let term = Experience { terminal: true, ..e.clone() };
        let (loss3, _) = td_loss_and_grads(&online, &target, &[&term], &cfg).unwrap();
        assert!((loss3 - 2.25).abs() < 1e-12, "bootstrap dropped: (1 - 2.5)^2");
    }

    #[test]
    fn td_loss_is_order_invariant_and_rejects_empty() {
        let p = tiny_params(2, 3);
        let t = tiny_params(2, 4);
        let a = transition(&p, 1.0, false);
        let b = transition(&p, -3.0, true);
        let cfg = TrainConfig::default();
        let (l1, g1) = td_loss_and_grads(&p, &t, &[&a, &b], &cfg).unwrap();
        let (l2, g2) = td_loss_and_grads(&p, &t, &[&b, &a], &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (x, y) in g1.flat().iter().zip(g2.flat()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(td_loss_and_grads(&p, &t, &[], &cfg).is_err());
    }

    #[test]
    fn soft_update_rules() {
        let online = tiny_params(1, 5);
        let mut zero = online.clone();
        zero.scale(0.0);
        let mut t = zero.clone();
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        let mut t = zero.clone();
        let mut ones = online.clone();
        ones.tensors_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 1.0));
        soft_update(&mut t, &ones, 1e-3).unwrap();
        assert!(t.flat().iter().all(|&x| (x - 0.001).abs() < 1e-15));
        assert!(soft_update(&mut t, &tiny_params(2, 1), 0.5).is_err());
    }

    #[test]
    fn target_distance_non_increasing() {
        let online = tiny_params(2, 6);
        let mut target = tiny_params(2, 7);
        let dist = |a: &NpmParams, b: &NpmParams| -> f64 {
            a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        };
        let mut last = dist(&target, &online);
        for _ in 0..50 {
            soft_update(&mut target, &online, 0.05).unwrap();
            let d = dist(&target, &online);
            assert!(d <= last);
            last = d;
        }
    }

    fn sim(l: usize) -> SimConfig {
        SimConfig::uniform(l, 0.3, 3, 0.01, 144, 0)
    }

    #[test]
    fn episode_runs_floor_t_over_b_steps() {
        let mut tr = Trainer::new(tiny_params(3, 8), TrainConfig::default(), RewardConfig::default(), SeedStream::new(1)).unwrap();
        let log = tr.run_episode(&sim(3), 0, 144, None).unwrap();
        assert_eq!(log.steps.len(), 36);
        assert_eq!(tr.replay.len(), 144);
        assert!(tr.replay.iter().last().unwrap().terminal);
        assert_eq!(tr.replay.iter().filter(|e| e.terminal).count(), 1);
        let log = tr.run_episode(&sim(3), 1, 18, None).unwrap();
        assert_eq!(log.steps.len(), 4);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        for opt in [OptimizerKind::Sgd, OptimizerKind::adam(), OptimizerKind::Momentum { beta: 0.9 }] {
            let p = tiny_params(2, 9);
            let cfg = TrainConfig { learning_rate: 0.0, optimizer: opt, ..Default::default() };
            let mut tr = Trainer::new(p.clone(), cfg, RewardConfig::default(), SeedStream::new(2)).unwrap();
            tr.run_episode(&sim(2), 0, 144, None).unwrap();
            assert_eq!(tr.online, p);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let run = || {
            let cfg = TrainConfig { optimizer: OptimizerKind::adam(), ..Default::default() };
            let mut tr = Trainer::new(tiny_params(2, 10), cfg, RewardConfig::default(), SeedStream::new(3)).unwrap();
            for ep in 0..3 {
                tr.run_episode(&sim(2), ep, 144, None).unwrap();
            }
            let mut bytes = Vec::new();
            crate::npm::write_checkpoint(&tr.online, &mut bytes).unwrap();
            bytes
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut tr = Trainer::new(tiny_params(2, 11), TrainConfig::default(), RewardConfig::default(), SeedStream::new(4)).unwrap();
        assert!(tr.run_episode(&sim(3), 0, 144, None).is_err());
    }

    #[test]
    fn invalid_train_config() {
        assert!(TrainConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
    }
}
