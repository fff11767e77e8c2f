//! Python bindings for the `semmac` core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use semmac::env::{Action, Env as CoreEnv, EnvState, SimConfig, SlotOutcome};
use semmac::harness::{self, Config as CoreConfig};
use semmac::metrics::{self, TargetGrid};
use semmac::npm::{read_checkpoint, write_checkpoint, NpmParams as CoreParams};
use semmac::protocol::ProtocolKind;
use semmac::rng::{SeedStream, StreamRng};
use semmac::switch::mann_whitney_one_sided;
use semmac::teacher::ScriptedOracle as CoreOracle;

fn err(e: semmac::Error) -> PyErr {
    match e {
        semmac::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::Silent => "silent",
        Action::Transmit => "transmit",
        Action::Discard => "discard",
    }
}

fn parse_action(s: &str) -> PyResult<Action> {
    match s {
        "silent" | "0" => Ok(Action::Silent),
        "transmit" | "1" => Ok(Action::Transmit),
        "discard" | "2" => Ok(Action::Discard),
        other => Err(PyValueError::new_err(format!("unknown action {other:?}"))),
    }
}

fn grid(g_min: f64, g_max: f64, points: usize) -> TargetGrid {
    TargetGrid { g_min, g_max, points }
}

/// Experiment configuration; `Config()` is the reference setup.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: CoreConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Self { inner: CoreConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        CoreConfig::from_toml(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreConfig::load(path).map(|inner| Self { inner }).map_err(err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.scenario.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.scenario.seeds = seeds;
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.inner.scenario.episodes
    }

    #[setter]
    fn set_episodes(&mut self, n: usize) {
        self.inner.scenario.episodes = n;
    }

    #[getter]
    fn pretrain_episodes(&self) -> usize {
        self.inner.scenario.pretrain_episodes
    }

    #[setter]
    fn set_pretrain_episodes(&mut self, n: usize) {
        self.inner.scenario.pretrain_episodes = n;
    }

    #[getter]
    fn tti_per_episode(&self) -> usize {
        self.inner.scenario.tti_per_episode
    }

    #[setter]
    fn set_tti_per_episode(&mut self, t: usize) {
        self.inner.scenario.tti_per_episode = t;
    }

    #[getter]
    fn t_m(&self) -> usize {
        self.inner.switch.t_m
    }

    #[setter]
    fn set_t_m(&mut self, t_m: usize) {
        self.inner.switch.t_m = t_m;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(scenario={:?}, episodes={}, seeds={:?})",
            self.inner.scenario.name, self.inner.scenario.episodes, self.inner.scenario.seeds
        )
    }
}

/// Network protocol parameters.
#[pyclass(name = "NpmParams")]
struct NpmParams {
    inner: CoreParams,
}

#[pymethods]
impl NpmParams {
    #[getter]
    fn num_ues(&self) -> usize {
        self.inner.num_ues()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn greedy_actions(&self, buffers: Vec<usize>, b0: usize) -> PyResult<Vec<&'static str>> {
        let acts = self.inner.greedy_actions(&EnvState { buffers, b0 }).map_err(err)?;
        Ok(acts.into_iter().map(action_name).collect())
    }

    fn q_values(&self, buffers: Vec<usize>, b0: usize) -> PyResult<Vec<[f64; 3]>> {
        self.inner.q_values(&EnvState { buffers, b0 }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        write_checkpoint(&self.inner, std::io::BufWriter::new(f)).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        read_checkpoint(std::io::BufReader::new(f)).map(|inner| Self { inner }).map_err(err)
    }
}

/// Episode goodputs and summary of one protocol run.
#[pyclass(name = "RunRecord")]
struct RunRecord {
    inner: harness::RunRecord,
}

#[pymethods]
impl RunRecord {
    #[getter]
    fn protocol(&self) -> &'static str {
        self.inner.summary.protocol.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.summary.seed
    }

    #[getter]
    fn goodputs(&self) -> Vec<f64> {
        self.inner.goodputs()
    }

    #[getter]
    fn mean_goodput(&self) -> f64 {
        self.inner.summary.mean_goodput
    }

    #[getter]
    fn meta_resilience(&self) -> f64 {
        self.inner.summary.meta_resilience
    }

    #[getter]
    fn switch_episode(&self) -> Option<usize> {
        self.inner.summary.switch_episode
    }

    fn to_csv(&self) -> String {
        harness::rows_to_csv(&self.inner.rows)
    }
}

/// Slotted multiple-access channel with seeded arrivals and erasures.
#[pyclass(name = "Env")]
struct Env {
    env: CoreEnv,
    arrivals: StreamRng,
    erasures: StreamRng,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (num_ues, arrival_prob, buffer_cap, erasure_prob, seed=0))]
    fn new(num_ues: usize, arrival_prob: f64, buffer_cap: usize, erasure_prob: f64, seed: u64) -> PyResult<Self> {
        let cfg = SimConfig::uniform(num_ues, arrival_prob, buffer_cap, erasure_prob, 144, seed);
        let streams = SeedStream::new(seed);
        Ok(Self {
            env: CoreEnv::new(cfg).map_err(err)?,
            arrivals: streams.rng("arrivals"),
            erasures: streams.rng("erasures"),
        })
    }

    /// Buffer occupancies and the channel observation b0.
    fn state(&self) -> (Vec<usize>, usize) {
        let s = self.env.state();
        (s.buffers, s.b0)
    }

    /// Draws arrivals, then applies `actions`; returns (outcome, b0, success).
    fn step(&mut self, actions: Vec<String>) -> PyResult<(String, usize, bool)> {
        let acts = actions.iter().map(|a| parse_action(a)).collect::<PyResult<Vec<_>>>()?;
        self.env.step_arrivals(&mut self.arrivals);
        let r = self.env.apply_actions(&acts, &mut self.erasures).map_err(err)?;
        let outcome = match r.outcome {
            SlotOutcome::Idle => "idle".to_string(),
            SlotOutcome::Success(ue) => format!("success:{}", ue + 1),
            SlotOutcome::Duplicate(ue) => format!("duplicate:{}", ue + 1),
            SlotOutcome::Collision => "collision".to_string(),
            SlotOutcome::AllErased => "erased".to_string(),
        };
        Ok((outcome, r.b0, r.success))
    }

    fn reset(&mut self) {
        self.env.reset();
    }
}

/// Rule-based teacher used in place of a language model.
#[pyclass(name = "ScriptedOracle")]
struct ScriptedOracle {
    inner: CoreOracle,
}

#[pymethods]
impl ScriptedOracle {
    #[new]
    #[pyo3(signature = (lapse=0.0, confidence=0.8, seed=0))]
    fn new(lapse: f64, confidence: f64, seed: u64) -> Self {
        Self {
            inner: CoreOracle {
                confidence,
                lapse,
                seed,
                answered: 0,
            },
        }
    }

    fn decide(&self, buffers: Vec<usize>, b0: usize) -> Vec<&'static str> {
        self.inner.decide(&EnvState { buffers, b0 }).into_iter().map(action_name).collect()
    }
}

/// Trains the pre-shift network.
#[pyfunction]
fn pretrain(config: &Config, seed: u64) -> PyResult<NpmParams> {
    harness::pretrain(&config.inner, seed).map(|inner| NpmParams { inner }).map_err(err)
}

/// Runs one protocol (`npm`, `tpm`, `t2npm`, `t3npm` or `s-aloha`) after the
/// configured shift.
#[pyfunction]
#[pyo3(signature = (config, protocol, seed, theta0=None))]
fn run_protocol(
    py: Python<'_>,
    config: &Config,
    protocol: &str,
    seed: u64,
    theta0: Option<PyRef<'_, NpmParams>>,
) -> PyResult<RunRecord> {
    let kind: ProtocolKind = protocol.parse().map_err(err)?;
    let cfg = config.inner.clone();
    let theta0 = theta0.map(|p| p.inner.clone());
    py.detach(|| harness::run_protocol(&cfg, kind, seed, theta0.as_ref()))
        .map(|inner| RunRecord { inner })
        .map_err(err)
}

#[pyfunction]
fn resilience(series: Vec<f64>, target: f64) -> PyResult<f64> {
    metrics::resilience(&series, target).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (series, g_min=0.01, g_max=1.0, points=100))]
fn meta_resilience(series: Vec<f64>, g_min: f64, g_max: f64, points: usize) -> PyResult<f64> {
    metrics::meta_resilience(&series, &grid(g_min, g_max, points)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (series, g_min=0.01, g_max=1.0, points=100))]
fn resilience_curve(series: Vec<f64>, g_min: f64, g_max: f64, points: usize) -> PyResult<Vec<(f64, f64)>> {
    metrics::resilience_curve(&series, &grid(g_min, g_max, points)).map_err(err)
}

/// One-sided Mann-Whitney test that `b` tends to exceed `a`; returns
/// (U, p, exact).
#[pyfunction]
fn mann_whitney(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let r = mann_whitney_one_sided(&a, &b).map_err(err)?;
    Ok((r.u, r.p, r.exact))
}

#[pymodule]
fn semmac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<NpmParams>()?;
    m.add_class::<RunRecord>()?;
    m.add_class::<Env>()?;
    m.add_class::<ScriptedOracle>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(resilience, m)?)?;
    m.add_function(wrap_pyfunction!(meta_resilience, m)?)?;
    m.add_function(wrap_pyfunction!(resilience_curve, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney, m)?)?;
    Ok(())
}
