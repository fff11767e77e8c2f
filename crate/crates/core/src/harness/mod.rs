//! Experiment orchestration: configuration, pre-shift training, the five
//! protocol engines across an environmental shift, the shift matrix, the
//! measurement-length sweep and result files.

mod config;
mod output;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::SAlohaPolicy;
use crate::distill::Distiller;
use crate::env::SimConfig;
use crate::error::{Error, Result};
use crate::metrics::meta_resilience;
use crate::npm::NpmParams;
use crate::protocol::{run_policy_episode, EpisodeRow, GreedyNpm, ProtocolKind};
use crate::rng::SeedStream;
use crate::switch::{run_t3npm, tpm_reference, SwitchConfig};
use crate::teacher::{ChatClient, Instruction, LlmTeacher, TeacherBackend, TpmPolicy};
use crate::train::{epsilon_at, StepLog, Trainer};

pub use config::{BlerCurve, Config, EnvParams, Scenario, ShiftDelta, TeacherConfig, TeacherKind, SCHEMA_VERSION};
pub use output::{
    emit_results, read_rows_csv, rows_to_csv, svg_plot, train_log_to_csv, write_sweep, OutputPaths, CSV_HEADER,
    SWEEP_HEADER, TRAIN_LOG_HEADER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub scenario: String,
    pub mean_goodput: f64,
    pub meta_resilience: f64,
    pub switch_episode: Option<usize>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpisodeRow>,
    /// Training steps of the learned protocols, in order.
    #[serde(default)]
    pub steps: Vec<StepLog>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn goodputs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.goodput).collect()
    }
}

/// Builds the configured teacher backend. The scripted oracle's lapse set is
/// keyed by `seed`.
pub fn make_backend(cfg: &TeacherConfig, seed: u64) -> Result<Box<dyn TeacherBackend>> {
    Ok(match cfg.backend {
        TeacherKind::Scripted => Box::new(cfg.oracle(seed)),
        TeacherKind::Remote => Box::new(LlmTeacher::new(ChatClient::new(cfg.remote.clone())?)),
    })
}

pub fn load_instruction(cfg: &TeacherConfig) -> Result<Instruction> {
    match &cfg.instruction_file {
        None => Ok(Instruction::default_instruction()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Instruction::new(text.trim_end().to_string(), path.clone())
        }
    }
}

/// Trains the pre-shift parameters from a fresh initialization.
pub fn pretrain(cfg: &Config, seed: u64) -> Result<NpmParams> {
    let streams = SeedStream::new(seed);
    let sim = cfg.pre_sim(seed);
    let caps = vec![sim.buffer_cap[0]; sim.num_ues];
    let init = NpmParams::new(cfg.network.clone(), &caps, &mut streams.rng("init"))?;
    let mut trainer = Trainer::new(init, cfg.train.clone(), cfg.reward, streams.child("pretrain"))?;
    for n in 0..cfg.scenario.pretrain_episodes {
        trainer.run_episode(&sim, n, sim.tti_per_episode, None)?;
    }
    Ok(trainer.online)
}

/// Fits pre-shift parameters to the post-shift UE count: new UEs get
/// freshly initialized uplink and action networks, removed UEs are dropped.
pub fn adapt_to_shift(theta0: &NpmParams, cfg: &Config, seed: u64) -> Result<NpmParams> {
    let l = cfg.post_params()?.num_ues;
    let have = theta0.num_ues();
    if l > have {
        theta0.expand_for_ue_count(l, &mut SeedStream::new(seed).rng("expand"))
    } else if l < have {
        theta0.shrink_for_ue_count(l)
    } else {
        Ok(theta0.clone())
    }
}

/// Mean greedy goodput of fixed parameters over `episodes` episodes.
pub fn evaluate_greedy(
    params: &NpmParams,
    sim: &SimConfig,
    episodes: usize,
    streams: &SeedStream,
    label: &str,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let mut total = 0.0;
    for n in 0..episodes {
        total += run_policy_episode(&mut GreedyNpm { params }, sim, sim.tti_per_episode, streams, label, n as u64)?
            .goodput();
    }
    Ok(total / episodes as f64)
}

fn post_trainer(cfg: &Config, theta0: &NpmParams, seed: u64) -> Result<Trainer> {
    let params = adapt_to_shift(theta0, cfg, seed)?;
    Trainer::new(params, cfg.train.clone(), cfg.reward, SeedStream::new(seed).child("post"))
}

fn distiller(cfg: &Config, seed: u64, instruction: &Instruction) -> Result<Distiller> {
    Distiller::new(
        cfg.distill.clone(),
        make_backend(&cfg.teacher, seed)?,
        instruction.clone(),
        SeedStream::new(seed).rng("kd"),
    )
}

/// Test-then-train loop shared by the learned protocols: G_n is measured
/// with the parameters entering episode n.
fn learning_rows(
    kind: ProtocolKind,
    sim: &SimConfig,
    trainer: &mut Trainer,
    mut kd: Option<&mut Distiller>,
    episodes: usize,
    streams: &SeedStream,
) -> Result<(Vec<EpisodeRow>, Vec<StepLog>)> {
    let t = sim.tti_per_episode;
    let mut rows = Vec::with_capacity(episodes);
    let mut steps = Vec::new();
    for n in 0..episodes {
        let goodput =
            run_policy_episode(&mut GreedyNpm { params: &trainer.online }, sim, t, streams, "test", n as u64)?.goodput();
        let log = trainer.run_episode(sim, n, t, kd.as_deref_mut())?;
        rows.push(EpisodeRow {
            episode: n,
            protocol: kind,
            goodput,
            loss: log.mean_loss(),
            epsilon: Some(epsilon_at(n, &trainer.cfg.epsilon)),
            switched: false,
        });
        steps.extend(log.steps);
    }
    Ok((rows, steps))
}

fn fixed_rows(
    kind: ProtocolKind,
    episodes: usize,
    mut episode: impl FnMut(usize) -> Result<f64>,
) -> Result<Vec<EpisodeRow>> {
    (0..episodes)
        .map(|n| {
            Ok(EpisodeRow {
                episode: n,
                protocol: kind,
                goodput: episode(n)?,
                loss: None,
                epsilon: None,
                switched: false,
            })
        })
        .collect()
}

/// Runs one protocol for one seed after the shift. `theta0` is the
/// pre-shift network for the learned protocols; it is trained here when
/// absent.
pub fn run_protocol(cfg: &Config, kind: ProtocolKind, seed: u64, theta0: Option<&NpmParams>) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let streams = SeedStream::new(seed);
    let sim = cfg.post_sim(seed)?;
    let t = sim.tti_per_episode;
    let episodes = cfg.scenario.episodes;
    let instruction = load_instruction(&cfg.teacher)?;
    let owned;
    let theta0 = match (kind, theta0) {
        (ProtocolKind::Tpm | ProtocolKind::SAloha, _) => None,
        (_, Some(p)) => Some(p),
        (_, None) => {
            owned = pretrain(cfg, seed)?;
            Some(&owned)
        }
    };
    let mut switch_episode = None;
    let mut steps = Vec::new();
    let rows = match kind {
        ProtocolKind::Npm => {
            let mut trainer = post_trainer(cfg, theta0.expect("learned protocol"), seed)?;
            let (rows, s) = learning_rows(kind, &sim, &mut trainer, None, episodes, &streams)?;
            steps = s;
            rows
        }
        ProtocolKind::T2npm => {
            let mut trainer = post_trainer(cfg, theta0.expect("learned protocol"), seed)?;
            let mut d = distiller(cfg, seed, &instruction)?;
            let (rows, s) = learning_rows(kind, &sim, &mut trainer, Some(&mut d), episodes, &streams)?;
            steps = s;
            rows
        }
        ProtocolKind::Tpm => {
            let mut backend = make_backend(&cfg.teacher, seed)?;
            fixed_rows(kind, episodes, |n| {
                let mut policy = TpmPolicy::new(backend.as_mut(), &instruction);
                Ok(run_policy_episode(&mut policy, &sim, t, &streams, "test", n as u64)?.goodput())
            })?
        }
        ProtocolKind::SAloha => fixed_rows(kind, episodes, |n| {
            let mut policy = SAlohaPolicy::new(cfg.saloha, streams.indexed("saloha", n as u64));
            Ok(run_policy_episode(&mut policy, &sim, t, &streams, "test", n as u64)?.goodput())
        })?,
        ProtocolKind::T3npm => {
            let run = t3npm_run(cfg, &cfg.switch, seed, theta0.expect("learned protocol"), &instruction)?;
            switch_episode = run.switch_episode;
            steps = run.steps;
            run.rows
        }
    };
    let mut record = summarize(cfg, kind, seed, rows, switch_episode, started)?;
    record.steps = steps;
    Ok(record)
}

/// Hybrid-protocol run for one seed with an explicit switch configuration.
pub fn t3npm_run(
    cfg: &Config,
    switch: &SwitchConfig,
    seed: u64,
    theta0: &NpmParams,
    instruction: &Instruction,
) -> Result<crate::switch::T3npmRun> {
    let streams = SeedStream::new(seed);
    let sim = cfg.post_sim(seed)?;
    let v_tpm = tpm_reference(make_backend(&cfg.teacher, seed)?.as_mut(), instruction, &sim, &streams)?;
    let mut tester = make_backend(&cfg.teacher, seed)?;
    let mut trainer = post_trainer(cfg, theta0, seed)?;
    let mut d = distiller(cfg, seed, instruction)?;
    run_t3npm(
        &sim,
        &mut trainer,
        &mut d,
        tester.as_mut(),
        instruction,
        &v_tpm,
        switch,
        &streams,
        cfg.scenario.episodes,
    )
}

fn summarize(
    cfg: &Config,
    kind: ProtocolKind,
    seed: u64,
    rows: Vec<EpisodeRow>,
    switch_episode: Option<usize>,
    started: Instant,
) -> Result<RunRecord> {
    let series: Vec<f64> = rows.iter().map(|r| r.goodput).collect();
    let summary = RunSummary {
        protocol: kind,
        seed,
        scenario: cfg.scenario.name.clone(),
        mean_goodput: series.iter().sum::<f64>() / series.len() as f64,
        meta_resilience: meta_resilience(&series, &cfg.metrics)?,
        switch_episode,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunRecord {
        rows,
        steps: Vec::new(),
        summary,
    })
}

/// Runs the configured scenario for one protocol over every configured seed.
pub fn run_scenario(cfg: &Config, kind: ProtocolKind) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    cfg.scenario
        .seeds
        .iter()
        .map(|&seed| run_protocol(cfg, kind, seed, None))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_m: usize,
    pub seed: u64,
    pub switch_episode: Option<usize>,
    pub meta_resilience: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// (T_M, mean meta-resilience over seeds) in grid order.
    pub means: Vec<(usize, f64)>,
    /// Grid value with the largest mean, excluding the two end points.
    pub interior_best: Option<usize>,
}

/// Hybrid protocol over a grid of measurement lengths. `theta0` supplies the
/// pre-shift network per seed.
pub fn sweep_tm(
    cfg: &Config,
    grid: &[usize],
    seeds: &[u64],
    mut theta0: impl FnMut(u64) -> Result<NpmParams>,
) -> Result<SweepResult> {
    cfg.validate()?;
    let t = cfg.scenario.tti_per_episode;
    for &t_m in grid {
        SwitchConfig { t_m, ..cfg.switch }.validate(t)?;
    }
    if seeds.is_empty() {
        return Err(Error::Empty("sweep seeds"));
    }
    let instruction = load_instruction(&cfg.teacher)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let p0 = theta0(seed)?;
        for &t_m in grid {
            let run = t3npm_run(cfg, &SwitchConfig { t_m, ..cfg.switch }, seed, &p0, &instruction)?;
            let series: Vec<f64> = run.rows.iter().map(|r| r.goodput).collect();
            rows.push(SweepRow {
                t_m,
                seed,
                switch_episode: run.switch_episode,
                meta_resilience: meta_resilience(&series, &cfg.metrics)?,
            });
        }
    }
    let means: Vec<(usize, f64)> = grid
        .iter()
        .map(|&t_m| {
            let v: Vec<f64> = rows.iter().filter(|r| r.t_m == t_m).map(|r| r.meta_resilience).collect();
            (t_m, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let interior_best = means
        .iter()
        .filter(|(t_m, _)| *t_m != 0 && *t_m != t)
        .fold(None::<(usize, f64)>, |best, &(t_m, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((t_m, m)),
        })
        .map(|(t_m, _)| t_m);
    Ok(SweepResult {
        rows,
        means,
        interior_best,
    })
}

/// The eight single-parameter shifts of the shift matrix, applied to the
/// default pre-shift environment.
pub fn table1_shifts() -> Vec<(&'static str, ShiftDelta)> {
    let d = ShiftDelta::default();
    vec![
        ("p_a up", ShiftDelta { arrival_prob: Some(0.5), ..d }),
        ("p_a down", ShiftDelta { arrival_prob: Some(0.1), ..d }),
        ("b_max up", ShiftDelta { buffer_cap: Some(5), ..d }),
        ("b_max down", ShiftDelta { buffer_cap: Some(2), ..d }),
        ("p_e up", ShiftDelta { erasure_prob: Some(0.1), ..d }),
        ("p_e down", ShiftDelta { erasure_prob: Some(0.001), ..d }),
        ("L up", ShiftDelta::num_ues(3)),
        ("L down", ShiftDelta::num_ues(1)),
    ]
}

/// Goodputs of one shift column, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftColumn {
    pub shift: String,
    pub saloha: f64,
    /// Pre-shift network without adaptation.
    pub frozen: f64,
    /// Pre-shift network re-trained after the shift; mean of the last ten
    /// episodes.
    pub retrained: f64,
    pub per_seed: Vec<(u64, f64, f64, f64)>,
}

impl ShiftColumn {
    pub fn gap(&self) -> f64 {
        self.retrained - self.frozen
    }
}

/// Episodes averaged for the re-trained value.
pub const RETRAINED_TAIL: usize = 10;

/// One shift column: S-ALOHA, the frozen pre-shift network and the
/// re-trained network, per seed.
pub fn shift_column(
    cfg: &Config,
    seeds: &[u64],
    mut theta0: impl FnMut(u64) -> Result<NpmParams>,
) -> Result<ShiftColumn> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Empty("shift seeds"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let p0 = theta0(seed)?;
        let sim = cfg.post_sim(seed)?;
        let streams = SeedStream::new(seed);
        let adapted = adapt_to_shift(&p0, cfg, seed)?;
        let frozen = evaluate_greedy(&adapted, &sim, cfg.scenario.frozen_eval_episodes, &streams, "frozen")?;
        let npm = run_protocol(cfg, ProtocolKind::Npm, seed, Some(&p0))?;
        let g = npm.goodputs();
        let tail = &g[g.len().saturating_sub(RETRAINED_TAIL)..];
        let retrained = tail.iter().sum::<f64>() / tail.len() as f64;
        let saloha = run_protocol(cfg, ProtocolKind::SAloha, seed, None)?.summary.mean_goodput;
        per_seed.push((seed, saloha, frozen, retrained));
    }
    let mean = |f: fn(&(u64, f64, f64, f64)) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
    Ok(ShiftColumn {
        shift: cfg.scenario.shift.label(),
        saloha: mean(|r| r.1),
        frozen: mean(|r| r.2),
        retrained: mean(|r| r.3),
        per_seed,
    })
}

/// All eight shift columns. The pre-shift network is trained once per seed
/// and shared across columns.
pub fn table1_matrix(cfg: &Config, seeds: &[u64]) -> Result<Vec<ShiftColumn>> {
    if seeds.len() < 3 {
        return Err(Error::Config("the shift matrix needs at least 3 seeds".into()));
    }
    let mut cache: Vec<(u64, NpmParams)> = Vec::new();
    let mut out = Vec::new();
    for (name, shift) in table1_shifts() {
        let mut c = cfg.clone();
        c.scenario.name = name.replace(' ', "-");
        c.scenario.shift = shift;
        let mut column = shift_column(&c, seeds, |seed| {
            if let Some((_, p)) = cache.iter().find(|(s, _)| *s == seed) {
                return Ok(p.clone());
            }
            let p = pretrain(cfg, seed)?;
            cache.push((seed, p.clone()));
            Ok(p)
        })?;
        column.shift = name.into();
        out.push(column);
    }
    Ok(out)
}
