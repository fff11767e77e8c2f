//! Hybrid protocol: run the teacher protocol while the distilled network
//! trains, measure both, and switch once a rank test favours the network.

mod mann_whitney;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::distill::Distiller;
use crate::env::SimConfig;
use crate::error::{Error, Result};
use crate::npm::NpmParams;
use crate::protocol::{run_policy_episode, EpisodeRow, GreedyNpm, ProtocolKind, GOODPUT_WINDOW};
use crate::rng::SeedStream;
use crate::teacher::{Instruction, TeacherBackend, TpmPolicy};
use crate::train::{epsilon_at, StepLog, Trainer};

pub use mann_whitney::{mann_whitney_exact, mann_whitney_normal, mann_whitney_one_sided, MannWhitney, EXACT_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwitchConfig {
    /// Measurement TTIs per training episode.
    pub t_m: usize,
    /// Total measurement TTIs needed for one test.
    pub total_measurement: usize,
    pub alpha: f64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            t_m: 24,
            total_measurement: 144,
            alpha: 0.05,
        }
    }
}

impl SwitchConfig {
    pub fn validate(&self, tti_per_episode: usize) -> Result<()> {
        if self.t_m % GOODPUT_WINDOW != 0 || self.t_m > tti_per_episode {
            return Err(Error::Config(format!(
                "T_M = {} must be a multiple of {GOODPUT_WINDOW} within [0, {tti_per_episode}]",
                self.t_m
            )));
        }
        if self.total_measurement == 0 || self.total_measurement % GOODPUT_WINDOW != 0 {
            return Err(Error::Config("total measurement TTIs must be a positive multiple of 12".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    /// Past episodes pooled with the current one: ceil(total / T_M) - 1.
    pub fn k(&self) -> usize {
        if self.t_m == 0 {
            0
        } else {
            self.total_measurement.div_ceil(self.t_m) - 1
        }
    }
}

pub fn should_switch(p: f64, alpha: f64) -> bool {
    p < alpha
}

/// Latching switch indicator plus the recent per-episode measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchState {
    switched: bool,
    history: VecDeque<Vec<f64>>,
    depth: usize,
}

impl SwitchState {
    /// Keeps the last `k + 1` measurement lists.
    pub fn new(k: usize) -> Self {
        Self {
            switched: false,
            history: VecDeque::with_capacity(k + 1),
            depth: k + 1,
        }
    }

    pub fn switched(&self) -> bool {
        self.switched
    }

    pub fn push(&mut self, samples: Vec<f64>) {
        if self.history.len() == self.depth {
            self.history.pop_front();
        }
        self.history.push_back(samples);
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Records a test outcome; once switched, stays switched.
    pub fn observe(&mut self, p: f64, alpha: f64) -> bool {
        self.switched |= should_switch(p, alpha);
        self.switched
    }

    pub fn latch(&mut self) {
        self.switched = true;
    }

    pub fn pooled(&self, k: usize) -> Result<Vec<f64>> {
        pool_measurements(&self.history, k)
    }
}

/// Concatenates the newest `k + 1` episodes' samples, newest first.
pub fn pool_measurements(history: &VecDeque<Vec<f64>>, k: usize) -> Result<Vec<f64>> {
    if history.len() < k + 1 {
        return Err(Error::InsufficientHistory {
            needed: k + 1,
            available: history.len(),
        });
    }
    Ok(history.iter().rev().take(k + 1).flatten().copied().collect())
}

/// Greedy goodput samples (one per 12-TTI window) over `t_m` TTIs from a
/// fresh environment.
pub fn measure_goodput(
    params: &NpmParams,
    sim: &SimConfig,
    t_m: usize,
    streams: &SeedStream,
    episode: u64,
) -> Result<Vec<f64>> {
    if t_m % GOODPUT_WINDOW != 0 {
        return Err(Error::Config(format!("T_M = {t_m} is not a multiple of {GOODPUT_WINDOW}")));
    }
    if t_m == 0 {
        return Ok(Vec::new());
    }
    let trace = run_policy_episode(&mut GreedyNpm { params }, sim, t_m, streams, "measure", episode)?;
    Ok(trace.window_goodputs())
}

/// Teacher-protocol reference sample: window goodputs of one episode.
pub fn tpm_reference(
    backend: &mut dyn TeacherBackend,
    instruction: &Instruction,
    sim: &SimConfig,
    streams: &SeedStream,
) -> Result<Vec<f64>> {
    let mut policy = TpmPolicy::new(backend, instruction);
    let trace = run_policy_episode(&mut policy, sim, sim.tti_per_episode, streams, "tpm-reference", 0)?;
    Ok(trace.window_goodputs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct T3npmRun {
    pub rows: Vec<EpisodeRow>,
    pub switch_episode: Option<usize>,
    /// p-value of every test performed, by episode.
    pub tests: Vec<(usize, f64)>,
    pub steps: Vec<StepLog>,
}

/// Episode loop of the hybrid protocol.
///
/// Testing phase of episode n: the teacher protocol until the switch, the
/// greedy network afterwards. Training phase: while unswitched, the first
/// T_M TTIs measure the network on a fresh environment and the remaining
/// T - T_M TTIs train it; once enough history exists the pooled
/// measurements are tested against `v_tpm` and a rejection switches the
/// protocol from the next episode on. After the switch every episode trains
/// for the full T. With T_M = 0 the network is used from the start; with
/// T_M = T there is no training time and the teacher is kept throughout.
#[allow(clippy::too_many_arguments)]
pub fn run_t3npm(
    sim: &SimConfig,
    trainer: &mut Trainer,
    distiller: &mut Distiller,
    tester: &mut dyn TeacherBackend,
    instruction: &Instruction,
    v_tpm: &[f64],
    cfg: &SwitchConfig,
    streams: &SeedStream,
    episodes: usize,
) -> Result<T3npmRun> {
    let t = sim.tti_per_episode;
    cfg.validate(t)?;
    if v_tpm.is_empty() && cfg.t_m > 0 && cfg.t_m < t {
        return Err(Error::Empty("teacher reference sample"));
    }
    let k = cfg.k();
    let mut state = SwitchState::new(k);
    if cfg.t_m == 0 {
        state.latch();
    }
    let mut switch_episode = None;
    let mut tests = Vec::new();
    let mut rows = Vec::with_capacity(episodes);
    let mut steps = Vec::new();
    for n in 0..episodes {
        let (goodput, protocol) = if state.switched() {
            let g = run_policy_episode(&mut GreedyNpm { params: &trainer.online }, sim, t, streams, "test", n as u64)?
                .goodput();
            (g, ProtocolKind::T2npm)
        } else {
            let mut policy = TpmPolicy::new(tester, instruction);
            (run_policy_episode(&mut policy, sim, t, streams, "test", n as u64)?.goodput(), ProtocolKind::Tpm)
        };

        let mut train_ttis = t;
        let mut measured = false;
        if !state.switched() {
            train_ttis = t - cfg.t_m;
            if train_ttis > 0 {
                state.push(measure_goodput(&trainer.online, sim, cfg.t_m, streams, n as u64)?);
                measured = true;
            }
        }
        let loss = if train_ttis >= trainer.cfg.ttis_per_step {
            let log = trainer.run_episode(sim, n, train_ttis, Some(distiller))?;
            let loss = log.mean_loss();
            steps.extend(log.steps);
            loss
        } else {
            None
        };
        if measured && state.history_len() > k {
            let pooled = state.pooled(k)?;
            let p = mann_whitney_one_sided(v_tpm, &pooled)?.p;
            tests.push((n, p));
            if state.observe(p, cfg.alpha) {
                switch_episode = Some(n);
            }
        }
        rows.push(EpisodeRow {
            episode: n,
            protocol,
            goodput,
            loss,
            epsilon: loss.map(|_| epsilon_at(n, &trainer.cfg.epsilon)),
            switched: state.switched(),
        });
    }
    Ok(T3npmRun {
        rows,
        switch_episode,
        tests,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_follows_ceiling_formula() {
        let k = |t_m| SwitchConfig { t_m, ..Default::default() }.k();
        assert_eq!(k(24), 5);
        assert_eq!(k(48), 2);
        assert_eq!(k(72), 1);
        assert_eq!(k(96), 1);
        assert_eq!(k(120), 1);
        assert_eq!(k(144), 0);
    }

    #[test]
    fn config_validation() {
        assert!(SwitchConfig::default().validate(144).is_ok());
        assert!(SwitchConfig { t_m: 30, ..Default::default() }.validate(144).is_err());
        assert!(SwitchConfig { t_m: 156, ..Default::default() }.validate(144).is_err());
        assert!(SwitchConfig { alpha: 0.0, ..Default::default() }.validate(144).is_err());
    }

    #[test]
    fn switch_boundary_and_latch() {
        assert!(should_switch(0.04, 0.05));
        assert!(!should_switch(0.05, 0.05));
        let mut s = SwitchState::new(1);
        assert!(!s.observe(0.5, 0.05));
        assert!(s.observe(0.01, 0.05));
        assert!(s.observe(0.99, 0.05));
    }

    #[test]
    fn pooling_newest_first() {
        let mut s = SwitchState::new(5);
        for e in 0..7 {
            s.push(vec![e as f64, e as f64 + 0.5]);
        }
        let pooled = s.pooled(5).unwrap();
        assert_eq!(pooled.len(), 12);
        assert_eq!(&pooled[..4], &[6.0, 6.5, 5.0, 5.5]);
        assert_eq!(s.pooled(0).unwrap(), vec![6.0, 6.5]);
        let short = SwitchState::new(5);
        assert!(matches!(short.pooled(5), Err(Error::InsufficientHistory { needed: 6, available: 0 })));
    }
}
