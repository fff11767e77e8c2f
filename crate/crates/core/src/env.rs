//! Discrete-time uplink multiple-access channel.
//!
//! Each slot: Bernoulli arrivals into bounded FIFO buffers, then every UE
//! picks Silent / Transmit / Discard, and the base station observes one of
//! idle, a single decoded packet, or failure (collision and/or erasure).

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_ues: usize,
    pub arrival_prob: Vec<f64>,
    pub buffer_cap: Vec<usize>,
    pub erasure_prob: Vec<f64>,
    pub tti_per_episode: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Same parameters for every UE.
    pub fn uniform(
        num_ues: usize,
        arrival_prob: f64,
        buffer_cap: usize,
        erasure_prob: f64,
        tti_per_episode: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_ues,
            arrival_prob: vec![arrival_prob; num_ues],
            buffer_cap: vec![buffer_cap; num_ues],
            erasure_prob: vec![erasure_prob; num_ues],
            tti_per_episode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_ues;
        if l == 0 {
            return Err(Error::Config("num_ues must be at least 1".into()));
        }
        if self.arrival_prob.len() != l || self.buffer_cap.len() != l || self.erasure_prob.len() != l
        {
            return Err(Error::Config(format!(
                "per-UE vectors must have length {l} (arrival {}, buffer {}, erasure {})",
                self.arrival_prob.len(),
                self.buffer_cap.len(),
                self.erasure_prob.len()
            )));
        }
        for (name, v) in [("arrival_prob", &self.arrival_prob), ("erasure_prob", &self.erasure_prob)] {
            if let Some(p) = v.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.buffer_cap.iter().any(|&b| b == 0) {
            return Err(Error::Config("buffer_cap must be at least 1".into()));
        }
        if self.tti_per_episode == 0 {
            return Err(Error::Config("tti_per_episode must be at least 1".into()));
        }
        Ok(())
    }

    /// Observation code for "erasure and/or collision".
    pub fn failure_obs(&self) -> usize {
        self.num_ues + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Packet {
    pub id: u64,
    pub owner: usize,
    pub arrival_slot: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UeBuffer {
    queue: VecDeque<Packet>,
    capacity: usize,
}

impl UeBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            queue: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn head(&self) -> Option<&Packet> {
        self.queue.front()
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.queue.iter()
    }

    /// Appends, dropping the oldest packet on overflow. Returns the dropped one.
    pub fn push(&mut self, packet: Packet) -> Option<Packet> {
        self.queue.push_back(packet);
        if self.queue.len() > self.capacity {
            self.queue.pop_front()
        } else {
            None
        }
    }

    pub fn pop_head(&mut self) -> Option<Packet> {
        self.queue.pop_front()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BsState {
    pub decoded_ids: HashSet<u64>,
    pub channel_obs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Silent = 0,
    Transmit = 1,
    Discard = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Silent, Action::Transmit, Action::Discard];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

/// The RL state: every UE's buffer occupancy plus the BS channel observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub buffers: Vec<usize>,
    pub b0: usize,
}

impl EnvState {
    pub fn num_ues(&self) -> usize {
        self.buffers.len()
    }

    /// Initial state: idle channel, empty buffers.
    pub fn initial(num_ues: usize) -> Self {
        Self {
            buffers: vec![0; num_ues],
            b0: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UeEvent {
    pub action: Option<Action>,
    pub transmitted: bool,
    pub erased: bool,
    pub collided: bool,
    pub discarded_decoded: bool,
    pub discarded_undecoded: bool,
    pub duplicate_decode: bool,
    /// Transmit or Discard requested on an empty buffer; treated as Silent.
    pub coerced: bool,
}

impl UeEvent {
    pub fn effective_action(&self) -> Action {
        self.action.unwrap_or(Action::Silent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOutcome {
    Idle,
    Success(usize),
    Duplicate(usize),
    Collision,
    AllErased,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotResult {
    pub success: bool,
    pub b0: usize,
    pub outcome: SlotOutcome,
    /// Number of transmissions that survived the erasure channel.
    pub non_erased: usize,
    pub events: Vec<UeEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub rho4: f64,
    pub rho5: f64,
    /// Apply -rho5 to every UE not matched by another case.
    pub strict: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            rho1: 10.0,
            rho2: 8.0,
            rho3: 4.0,
            rho4: 4.0,
            rho5: 1.0,
            strict: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rho1, self.rho2, self.rho3, self.rho4, self.rho5];
        if all.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("reward magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: SimConfig,
    buffers: Vec<UeBuffer>,
    bs: BsState,
    next_id: u64,
    slot: u64,
}

impl Env {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let buffers = cfg.buffer_cap.iter().map(|&c| UeBuffer::new(c)).collect();
        Ok(Self {
            cfg,
            buffers,
            bs: BsState::default(),
            next_id: 0,
            slot: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn num_ues(&self) -> usize {
        self.cfg.num_ues
    }

    pub fn buffers(&self) -> &[UeBuffer] {
        &self.buffers
    }

    pub fn buffer_mut(&mut self, ue: usize) -> &mut UeBuffer {
        &mut self.buffers[ue]
    }

    pub fn bs(&self) -> &BsState {
        &self.bs
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn reset(&mut self) {
        for b in &mut self.buffers {
            b.queue.clear();
        }
        self.bs = BsState::default();
        self.next_id = 0;
        self.slot = 0;
    }

    pub fn state(&self) -> EnvState {
        EnvState {
            buffers: self.buffers.iter().map(UeBuffer::len).collect(),
            b0: self.bs.channel_obs,
        }
    }

    /// Injects a packet for `ue` with a fresh id (FIFO drop on overflow).
    pub fn inject(&mut self, ue: usize) -> Option<Packet> {
        let packet = Packet {
            id: self.next_id,
            owner: ue,
            arrival_slot: self.slot,
        };
        self.next_id += 1;
        self.buffers[ue].push(packet)
    }

    pub fn step_arrivals<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<bool> {
        (0..self.cfg.num_ues)
            .map(|ue| {
                let arrived = rng.gen_bool(self.cfg.arrival_prob[ue]);
                if arrived {
                    self.inject(ue);
                }
                arrived
            })
            .collect()
    }

    pub fn apply_actions<R: Rng + ?Sized>(
        &mut self,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<SlotResult> {
        let l = self.cfg.num_ues;
        if actions.len() != l {
            return Err(Error::Dimension(format!(
                "expected {l} actions, got {}",
                actions.len()
            )));
        }

        let mut events = vec![UeEvent::default(); l];
        let mut any_transmitter = false;
        let mut survivors: Vec<(usize, u64)> = Vec::new();

        for (ue, (&a, ev)) in actions.iter().zip(events.iter_mut()).enumerate() {
            let head = self.buffers[ue].head().copied();
            match (a, head) {
                (Action::Silent, _) => ev.action = Some(Action::Silent),
                (_, None) => {
                    ev.action = Some(Action::Silent);
                    ev.coerced = true;
                }
                (Action::Transmit, Some(p)) => {
                    ev.action = Some(Action::Transmit);
                    ev.transmitted = true;
                    any_transmitter = true;
                    ev.erased = rng.gen_bool(self.cfg.erasure_prob[ue]);
                    if !ev.erased {
                        survivors.push((ue, p.id));
                    }
                }
                (Action::Discard, Some(p)) => {
                    ev.action = Some(Action::Discard);
                    if self.bs.decoded_ids.contains(&p.id) {
                        ev.discarded_decoded = true;
                    } else {
                        ev.discarded_undecoded = true;
                    }
                    self.buffers[ue].pop_head();
                }
            }
        }

        let non_erased = survivors.len();
        let failure = self.cfg.failure_obs();
        let (outcome, b0, success) = match survivors.as_slice() {
            [] if any_transmitter => (SlotOutcome::AllErased, failure, false),
            [] => (SlotOutcome::Idle, 0, false),
            &[(ue, id)] => {
                if self.bs.decoded_ids.insert(id) {
                    (SlotOutcome::Success(ue), ue + 1, true)
                } else {
                    events[ue].duplicate_decode = true;
                    (SlotOutcome::Duplicate(ue), ue + 1, false)
                }
            }
            _ => {
                for ev in events.iter_mut().filter(|e| e.transmitted) {
                    ev.collided = true;
                }
                (SlotOutcome::Collision, failure, false)
            }
        };

        self.bs.channel_obs = b0;
        self.slot += 1;
        Ok(SlotResult {
            success,
            b0,
            outcome,
            non_erased,
            events,
        })
    }
}

/// Per-UE rewards for one slot. The first matching case wins per UE.
pub fn compute_rewards(slot: &SlotResult, cfg: &RewardConfig) -> Vec<f64> {
    let idle = slot.outcome == SlotOutcome::Idle;
    slot.events
        .iter()
        .enumerate()
        .map(|(ue, ev)| {
            if slot.outcome == SlotOutcome::Success(ue) {
                cfg.rho1
            } else if ev.discarded_decoded {
                cfg.rho2
            } else if ev.discarded_undecoded {
                -cfg.rho3
            } else if ev.transmitted && slot.non_erased > 1 {
                -cfg.rho4
            } else if idle || ev.duplicate_decode || cfg.strict {
                -cfg.rho5
            } else {
                0.0
            }
        })
        .collect()
}

/// Successful decodes per slot over the series.
pub fn goodput(success_flags: &[bool]) -> Result<f64> {
    if success_flags.is_empty() {
        return Err(Error::Empty("goodput needs at least one slot"));
    }
    let hits = success_flags.iter().filter(|&&c| c).count();
    Ok(hits as f64 / success_flags.len() as f64)
}

/// Goodput of consecutive windows of `window` slots (a trailing partial
/// window is ignored).
pub fn window_goodputs(success_flags: &[bool], window: usize) -> Vec<f64> {
    success_flags
        .chunks_exact(window.max(1))
        .map(|w| w.iter().filter(|&&c| c).count() as f64 / w.len() as f64)
        .collect()
}

/// Logistic block error rate as a function of SNR in dB.
pub fn bler_from_snr(snr_db: f64, midpoint: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (slope * (snr_db - midpoint)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn cfg(l: usize, pa: f64, cap: usize, pe: f64) -> SimConfig {
        SimConfig::uniform(l, pa, cap, pe, 144, 1)
    }

    #[test]
    fn zero_arrival_probability_never_fills_buffers() {
        let mut env = Env::new(cfg(3, 0.0, 3, 0.0)).unwrap();
        let mut rng = SeedStream::new(3).rng("arrivals");
        for _ in 0..1000 {
            assert_eq!(env.step_arrivals(&mut rng), vec![false; 3]);
        }
        assert_eq!(env.state().buffers, vec![0, 0, 0]);
    }

    #[test]
    fn overflow_drops_oldest_packet() {
        let mut env = Env::new(cfg(1, 1.0, 3, 0.0)).unwrap();
        env.next_id = 1;
        let mut rng = SeedStream::new(0).rng("a");
        for _ in 0..3 {
            env.step_arrivals(&mut rng);
        }
        let ids: Vec<u64> = env.buffers()[0].packets().map(|p| p.id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        env.step_arrivals(&mut rng);
        let ids: Vec<u64> = env.buffers()[0].packets().map(|p| p.id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }

    #[test]
    fn arrival_rate_matches_probability() {
        let mut env = Env::new(cfg(1, 0.3, 1, 0.0)).unwrap();
        let mut rng = SeedStream::new(11).rng("arrivals");
        let n = 100_000;
        let hits = (0..n).filter(|_| env.step_arrivals(&mut rng)[0]).count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn all_silent_is_idle() {
        let mut env = Env::new(cfg(3, 0.0, 3, 0.0)).unwrap();
        let mut rng = SeedStream::new(0).rng("e");
        let r = env.apply_actions(&[Action::Silent; 3], &mut rng).unwrap();
        assert!(!r.success);
        assert_eq!(r.b0, 0);
        assert_eq!(r.outcome, SlotOutcome::Idle);
    }

    #[test]
    fn two_transmitters_collide() {
        let mut env = Env::new(cfg(3, 0.0, 3, 0.0)).unwrap();
        env.inject(0);
        env.inject(1);
        let mut rng = SeedStream::new(0).rng("e");
        let r = env
            .apply_actions(&[Action::Transmit, Action::Transmit, Action::Silent], &mut rng)
            .unwrap();
        assert!(!r.success);
        assert_eq!(r.b0, 4);
        assert!(r.events[0].collided && r.events[1].collided);
        assert!(!r.events[2].collided);
        let rewards = compute_rewards(&r, &RewardConfig::default());
        assert_eq!(rewards, vec![-4.0, -4.0, 0.0]);
    }

    #[test]
    fn fresh_decode_then_duplicate() {
        let mut env = Env::new(cfg(3, 0.0, 3, 0.0)).unwrap();
        env.inject(0);
        let mut rng = SeedStream::new(0).rng("e");
        let acts = [Action::Transmit, Action::Silent, Action::Silent];
        let r1 = env.apply_actions(&acts, &mut rng).unwrap();
        assert!(r1.success);
        assert_eq!(r1.b0, 1);
        assert!(env.bs().decoded_ids.contains(&0));
        assert_eq!(env.buffers()[0].len(), 1, "transmit keeps a copy");
        let rw = compute_rewards(&r1, &RewardConfig::default());
        assert_eq!(rw, vec![10.0, 0.0, 0.0]);

        let r2 = env.apply_actions(&acts, &mut rng).unwrap();
        assert!(!r2.success);
        assert!(r2.events[0].duplicate_decode);
        assert_eq!(r2.b0, 1);
        assert_eq!(compute_rewards(&r2, &RewardConfig::default())[0], -1.0);

        let r3 = env
            .apply_actions(&[Action::Silent, Action::Discard, Action::Silent], &mut rng)
            .unwrap();
        assert!(r3.events[1].coerced);
        let r4 = env
            .apply_actions(&[Action::Discard, Action::Silent, Action::Silent], &mut rng)
            .unwrap();
        assert!(r4.events[0].discarded_decoded);
        assert!(env.buffers()[0].is_empty());
        assert_eq!(compute_rewards(&r4, &RewardConfig::default()), vec![8.0, -1.0, -1.0]);
        let _ = r3;
    }

    #[test]
    fn discarding_undecoded_is_penalised() {
        let mut env = Env::new(cfg(2, 0.0, 3, 0.0)).unwrap();
        env.inject(1);
        let mut rng = SeedStream::new(0).rng("e");
        let r = env.apply_actions(&[Action::Silent, Action::Discard], &mut rng).unwrap();
        assert!(r.events[1].discarded_undecoded);
        assert_eq!(compute_rewards(&r, &RewardConfig::default()), vec![-1.0, -4.0]);
    }

    #[test]
    fn erased_transmissions_do_not_collide() {
        let mut env = Env::new(cfg(2, 0.0, 3, 1.0)).unwrap();
        env.inject(0);
        env.inject(1);
        let mut rng = SeedStream::new(0).rng("e");
        let r = env.apply_actions(&[Action::Transmit, Action::Transmit], &mut rng).unwrap();
        assert_eq!(r.outcome, SlotOutcome::AllErased);
        assert_eq!(r.b0, 3);
        assert!(r.events.iter().all(|e| e.erased && !e.collided));
        assert_eq!(compute_rewards(&r, &RewardConfig::default()), vec![0.0, 0.0]);
        let strict = RewardConfig { strict: true, ..Default::default() };
        assert_eq!(compute_rewards(&r, &strict), vec![-1.0, -1.0]);
    }

    #[test]
    fn bystanders_get_zero_unless_strict() {
        let mut env = Env::new(cfg(3, 0.0, 3, 0.0)).unwrap();
        env.inject(0);
        let mut rng = SeedStream::new(0).rng("e");
        let r = env
            .apply_actions(&[Action::Transmit, Action::Silent, Action::Silent], &mut rng)
            .unwrap();
        assert_eq!(compute_rewards(&r, &RewardConfig::default()), vec![10.0, 0.0, 0.0]);
        let strict = RewardConfig { strict: true, ..Default::default() };
        assert_eq!(compute_rewards(&r, &strict), vec![10.0, -1.0, -1.0]);
    }

    #[test]
    fn action_length_mismatch_is_rejected() {
        let mut env = Env::new(cfg(3, 0.0, 3, 0.0)).unwrap();
        let mut rng = SeedStream::new(0).rng("e");
        assert!(env.apply_actions(&[Action::Silent], &mut rng).is_err());
    }

    #[test]
    fn goodput_ratios() {
        assert_eq!(goodput(&[false; 144]).unwrap(), 0.0);
        let half: Vec<bool> = (0..144).map(|i| i % 2 == 0).collect();
        assert_eq!(goodput(&half).unwrap(), 0.5);
        assert!(goodput(&[]).is_err());
        assert_eq!(window_goodputs(&half, 12), vec![0.5; 12]);
    }

    #[test]
    fn bler_sigmoid() {
        assert_eq!(bler_from_snr(3.0, 3.0, 0.7), 0.5);
        assert!(bler_from_snr(200.0, 0.0, 1.0) < 1e-80);
        // 1 / (1 + e^2)
        assert!((bler_from_snr(2.0, 0.0, 1.0) - 0.11920292202211755).abs() < 1e-12);
        assert!(bler_from_snr(1.0, 0.0, 1.0) > bler_from_snr(2.0, 0.0, 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Env::new(cfg(0, 0.3, 3, 0.0)).is_err());
        assert!(Env::new(cfg(2, 1.3, 3, 0.0)).is_err());
        assert!(Env::new(cfg(2, 0.3, 0, 0.0)).is_err());
        let mut c = cfg(2, 0.3, 3, 0.0);
        c.tti_per_episode = 0;
        assert!(Env::new(c).is_err());
        assert!(RewardConfig { rho3: -1.0, ..Default::default() }.validate().is_err());
    }
}
