//! Knowledge distillation from a token-protocol teacher into the Q-network.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::RwLock;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::npm::{NpmGrads, NpmParams, NUM_ACTIONS};
use crate::rng::StreamRng;
use crate::teacher::{build_queries, softmax3, Instruction, TeacherBackend};
use crate::train::{td_loss_and_grads, Experience, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub kappa: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// KD state batch size; the TD batch size when unset.
    pub kd_batch_size: Option<usize>,
    pub teacher_replay_capacity: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            lambda1: 0.1,
            lambda2: 0.9,
            kd_batch_size: None,
            teacher_replay_capacity: 50_000,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::Config("loss weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }
}

/// Bounded store of visited states, sampled for the KD term.
#[derive(Debug, Clone)]
pub struct TeacherReplay {
    states: VecDeque<EnvState>,
    capacity: usize,
}

impl TeacherReplay {
    pub fn new(capacity: usize) -> Self {
        Self {
            states: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, s: EnvState) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn clear(&mut self) {
        self.states.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnvState> {
        self.states.iter()
    }

    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Vec<&EnvState> {
        let k = n.min(self.states.len());
        index::sample(rng, self.states.len(), k)
            .into_iter()
            .map(|i| &self.states[i])
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    kappa: f64,
    entries: Vec<CacheEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    state: EnvState,
    probs: Vec<[f64; 3]>,
}

/// Teacher distributions keyed by state. Reads are shared, inserts exclusive.
#[derive(Debug, Default)]
pub struct TeacherCache {
    map: RwLock<HashMap<EnvState, Vec<[f64; 3]>>>,
}

impl TeacherCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, s: &EnvState) -> Option<Vec<[f64; 3]>> {
        self.map.read().expect("cache lock").get(s).cloned()
    }

    pub fn insert(&self, s: EnvState, probs: Vec<[f64; 3]>) {
        self.map.write().expect("cache lock").insert(s, probs);
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.map.write().expect("cache lock").clear();
    }

    /// Writes every entry, sorted by state, as JSON.
    pub fn export(&self, path: impl AsRef<Path>, kappa: f64) -> Result<()> {
        let map = self.map.read().expect("cache lock");
        let mut entries: Vec<CacheEntry> = map
            .iter()
            .map(|(s, p)| CacheEntry {
                state: s.clone(),
                probs: p.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.state.cmp(&b.state));
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&CacheFile { kappa, entries })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads entries written by [`TeacherCache::export`] at the same kappa.
    pub fn import(&self, path: impl AsRef<Path>, kappa: f64) -> Result<usize> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CacheFile = serde_json::from_str(&text)?;
        if file.kappa != kappa {
            return Err(Error::Config(format!(
                "cache was built with kappa {}, run uses {kappa}",
                file.kappa
            )));
        }
        let n = file.entries.len();
        let mut map = self.map.write().expect("cache lock");
        for e in file.entries {
            map.insert(e.state, e.probs);
        }
        Ok(n)
    }
}

/// Temperature softmax of the student's Q-values, per UE.
pub fn student_soft_logits(params: &NpmParams, state: &EnvState, kappa: f64) -> Result<Vec<[f64; 3]>> {
    Ok(params.q_values(state)?.iter().map(|q| softmax3(q, kappa)).collect())
}

/// Sum over UEs of KL(teacher || student), with 0 ln 0 = 0.
pub fn kd_loss(teacher: &[[f64; 3]], student: &[[f64; 3]]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Dimension(format!(
            "teacher covers {} UEs, student {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(m, p)| {
            m.iter()
                .zip(p)
                .filter(|(mw, _)| **mw > 0.0)
                .map(|(mw, pw)| mw * (mw / pw).ln())
                .sum::<f64>()
        })
        .sum())
}

/// Mean KD loss over `states` and its gradient. The per-Q gradient is
/// (pi - mu) / kappa, without any kappa^2 rescaling.
pub fn kd_loss_and_grads(
    params: &NpmParams,
    states: &[&EnvState],
    teacher: &[Vec<[f64; 3]>],
    kappa: f64,
) -> Result<(f64, NpmGrads)> {
    if states.is_empty() {
        return Err(Error::Empty("KD batch"));
    }
    if states.len() != teacher.len() {
        return Err(Error::Dimension("one teacher distribution set per state required".into()));
    }
    let l = params.num_ues();
    let n = states.len();
    let cache = params.forward_batch(states)?;
    let mut loss = 0.0;
    let mut dq = vec![vec![0.0; n * NUM_ACTIONS]; l];
    for (s, mu) in teacher.iter().enumerate() {
        let pi: Vec<[f64; 3]> = (0..l).map(|ue| softmax3(&cache.q(s, ue), kappa)).collect();
        loss += kd_loss(mu, &pi)? / n as f64;
        for ue in 0..l {
            for a in 0..NUM_ACTIONS {
                dq[ue][s * NUM_ACTIONS + a] = (pi[ue][a] - mu[ue][a]) / (kappa * n as f64);
            }
        }
    }
    let mut grads = params.zeros_like();
    params.backward_batch(&cache, dq, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositeLoss {
    pub td: f64,
    pub kd: f64,
    pub total: f64,
}

/// lambda1 * TD + lambda2 * KD and its gradient. The KD term is omitted
/// entirely when lambda2 is zero or no KD states are given.
pub fn composite_loss_and_grads(
    online: &NpmParams,
    target: &NpmParams,
    td_batch: &[&Experience],
    kd_states: &[&EnvState],
    teacher: &[Vec<[f64; 3]>],
    train: &TrainConfig,
    cfg: &DistillConfig,
) -> Result<(CompositeLoss, NpmGrads)> {
    let (td, mut grads) = td_loss_and_grads(online, target, td_batch, train)?;
    grads.scale(cfg.lambda1);
    let mut kd = 0.0;
    if cfg.lambda2 > 0.0 && !kd_states.is_empty() {
        let (loss, kd_grads) = kd_loss_and_grads(online, kd_states, teacher, cfg.kappa)?;
        kd = loss;
        let l2 = cfg.lambda2;
        grads.zip_apply(&kd_grads, |g, k| *g += l2 * k)?;
    }
    Ok((
        CompositeLoss {
            td,
            kd,
            total: cfg.lambda1 * td + cfg.lambda2 * kd,
        },
        grads,
    ))
}

/// Teacher, cache and state replay used by distillation training.
pub struct Distiller {
    pub cfg: DistillConfig,
    pub teacher_replay: TeacherReplay,
    pub cache: TeacherCache,
    pub backend: Box<dyn TeacherBackend>,
    pub instruction: Instruction,
    /// KD states dropped because the backend failed on a cache miss.
    pub skipped: usize,
    rng: StreamRng,
}

impl Distiller {
    pub fn new(
        cfg: DistillConfig,
        backend: Box<dyn TeacherBackend>,
        instruction: Instruction,
        rng: StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            teacher_replay: TeacherReplay::new(cfg.teacher_replay_capacity),
            cfg,
            cache: TeacherCache::new(),
            backend,
            instruction,
            skipped: 0,
            rng,
        })
    }

    /// Teacher distributions for `state`, from the cache or the backend.
    pub fn teacher_knowledge(&mut self, state: &EnvState) -> Result<Vec<[f64; 3]>> {
        if let Some(m) = self.cache.get(state) {
            return Ok(m);
        }
        let (ue, bs) = build_queries(state)?;
        let response = self.backend.complete(&self.instruction, &ue, &bs)?;
        let mut m = response.distributions(self.cfg.kappa);
        m.resize(state.num_ues(), [1.0 / 3.0; 3]);
        self.cache.insert(state.clone(), m.clone());
        Ok(m)
    }
}

/// One composite gradient step on the trainer's online network.
pub fn composite_step(trainer: &mut Trainer, d: &mut Distiller) -> Result<CompositeLoss> {
    let td_n = trainer.cfg.batch_size;
    let kd_n = d.cfg.kd_batch_size.unwrap_or(td_n);
    let td_batch = trainer.sample_batch();
    let mut kd_states = Vec::new();
    let mut teacher = Vec::new();
    if d.cfg.lambda2 > 0.0 {
        let picked: Vec<EnvState> = d.teacher_replay.sample(kd_n, &mut d.rng).into_iter().cloned().collect();
        for s in picked {
            match d.teacher_knowledge(&s) {
                Ok(m) => {
                    teacher.push(m);
                    kd_states.push(s);
                }
                Err(_) => d.skipped += 1,
            }
        }
    }
    let td_refs: Vec<&Experience> = td_batch.iter().collect();
    let kd_refs: Vec<&EnvState> = kd_states.iter().collect();
    let (loss, grads) = composite_loss_and_grads(
        &trainer.online,
        &trainer.target,
        &td_refs,
        &kd_refs,
        &teacher,
        &trainer.cfg,
        &d.cfg,
    )?;
    trainer.apply_gradients(grads)?;
    Ok(loss)
}
