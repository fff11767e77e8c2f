use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use semmac::harness::{
    emit_results, load_instruction, make_backend, pretrain, read_rows_csv, run_protocol, svg_plot, sweep_tm,
    table1_matrix, write_sweep, Config, OutputPaths, RunRecord, TeacherKind,
};
use semmac::metrics::{meta_resilience, resilience_curve};
use semmac::protocol::ProtocolKind;
use semmac::rng::SeedStream;
use semmac::teacher::{ChatClient, FixtureLlm, Instruction, LlmClient};
use semmac::textgrad::{evaluate_instruction, run_textgrad, PromptOptState, TextGradScenario, TextualObjective};

#[derive(Parser)]
#[command(name = "semmac", about = "Learned and language-model-taught MAC protocols under environmental shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Teacher backend: scripted or remote.
    #[arg(long)]
    teacher: Option<TeacherKind>,
    /// Base URL of an OpenAI-compatible chat-completions endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the endpoint's bearer token.
    #[arg(long)]
    token_env: Option<String>,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Config::default(),
        };
        if let Some(s) = &self.seeds {
            cfg.scenario.seeds = s.clone();
        }
        if let Some(t) = self.teacher {
            cfg.teacher.backend = t;
        }
        if let Some(e) = &self.endpoint {
            cfg.teacher.remote.base_url = e.clone();
        }
        if let Some(t) = &self.token_env {
            cfg.teacher.remote.token_env = Some(t.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Re-train the pre-shift network after the shift.
    TrainNpm(Common),
    /// Run the teacher protocol.
    RunTpm(Common),
    /// Re-train with knowledge distillation from the teacher.
    TrainT2npm(Common),
    /// Teacher first, switching to the distilled network once it is better.
    RunT3npm(Common),
    /// Slotted ALOHA with the configured transmission probability.
    Baseline(Common),
    /// Hybrid protocol over a grid of measurement lengths.
    SweepTm {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,24,48,72,96,120,144")]
        grid: Vec<usize>,
    },
    /// Goodput of S-ALOHA, the frozen and the re-trained network for eight shifts.
    Table1(Common),
    /// Resilience curve of an episode CSV written by another subcommand.
    Curve {
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize the teacher instruction with textual feedback.
    Textgrad {
        #[command(flatten)]
        common: Common,
        /// Replay chat replies from a recorded fixture instead of an endpoint.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Observation file for the critique queries.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_epochs: usize,
        /// Episodes used to score each instruction.
        #[arg(long, default_value_t = 5)]
        eval_episodes: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainNpm(c) => protocol(&c, ProtocolKind::Npm),
        Command::RunTpm(c) => protocol(&c, ProtocolKind::Tpm),
        Command::TrainT2npm(c) => protocol(&c, ProtocolKind::T2npm),
        Command::RunT3npm(c) => protocol(&c, ProtocolKind::T3npm),
        Command::Baseline(c) => protocol(&c, ProtocolKind::SAloha),
        Command::SweepTm { common, grid } => sweep(&common, &grid),
        Command::Table1(c) => table1(&c),
        Command::Curve { input, config, out } => curve(&input, config.as_deref(), out.as_deref()),
        Command::Textgrad {
            common,
            fixture,
            scenario,
            max_epochs,
            eval_episodes,
        } => textgrad(&common, fixture, scenario, max_epochs, eval_episodes),
    }
}

fn protocol(c: &Common, kind: ProtocolKind) -> Result<()> {
    let cfg = c.config()?;
    for &seed in &cfg.scenario.seeds {
        let record = run_protocol(&cfg, kind, seed, None)?;
        emit(&record, &cfg, c, &format!("{kind}-seed{seed}"))?;
    }
    Ok(())
}

fn emit(record: &RunRecord, cfg: &Config, c: &Common, stem: &str) -> Result<()> {
    let mut paths = OutputPaths::new(&c.out, stem);
    paths.svg = c.svg;
    emit_results(record, &cfg.metrics, &paths)?;
    let s = &record.summary;
    println!(
        "{} seed {}: mean goodput {:.4}, meta-resilience {:.4}{} -> {}",
        s.protocol,
        s.seed,
        s.mean_goodput,
        s.meta_resilience,
        s.switch_episode.map(|e| format!(", switched at episode {e}")).unwrap_or_default(),
        paths.episodes_csv().display()
    );
    Ok(())
}

fn sweep(c: &Common, grid: &[usize]) -> Result<()> {
    let cfg = c.config()?;
    let result = sweep_tm(&cfg, grid, &cfg.scenario.seeds, |seed| pretrain(&cfg, seed))?;
    write_sweep(&result, &c.out)?;
    for (t_m, m) in &result.means {
        println!("T_M={t_m:<4} meta-resilience {m:.4}");
    }
    match result.interior_best {
        Some(t) => println!("interior maximum at T_M={t}"),
        None => println!("no interior grid point"),
    }
    Ok(())
}

fn table1(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let columns = table1_matrix(&cfg, &cfg.scenario.seeds)?;
    std::fs::create_dir_all(&c.out)?;
    let mut csv = String::from("shift,saloha,frozen,retrained\n");
    println!("{:<12}{:>10}{:>10}{:>11}", "shift", "S-ALOHA", "frozen", "retrained");
    for col in &columns {
        println!("{:<12}{:>10.3}{:>10.3}{:>11.3}", col.shift, col.saloha, col.frozen, col.retrained);
        csv.push_str(&format!("{},{},{},{}\n", col.shift, col.saloha, col.frozen, col.retrained));
    }
    std::fs::write(c.out.join("table1.csv"), csv)?;
    std::fs::write(c.out.join("table1.json"), serde_json::to_string_pretty(&columns)?)?;
    Ok(())
}

fn curve(input: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rows = read_rows_csv(&text)?;
    let series: Vec<f64> = rows.iter().map(|r| r.goodput).collect();
    let points = resilience_curve(&series, &cfg.metrics)?;
    let mut csv = String::from("target,resilience\n");
    for (g, r) in &points {
        csv.push_str(&format!("{g},{r}\n"));
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
            std::fs::write(dir.join(format!("{stem}.curve.csv")), &csv)?;
            std::fs::write(
                dir.join(format!("{stem}.curve.svg")),
                svg_plot("Resilience", "target goodput", "resilience", &points),
            )?;
        }
        None => print!("{csv}"),
    }
    eprintln!("meta-resilience {:.6}", meta_resilience(&series, &cfg.metrics)?);
    Ok(())
}

fn textgrad(
    c: &Common,
    fixture: Option<PathBuf>,
    scenario: Option<PathBuf>,
    max_epochs: usize,
    eval_episodes: usize,
) -> Result<()> {
    let cfg = c.config()?;
    let mut client: Box<dyn LlmClient> = match (fixture, cfg.teacher.backend) {
        (Some(path), _) => Box::new(FixtureLlm::load(path)?),
        (None, TeacherKind::Remote) => Box::new(ChatClient::new(cfg.teacher.remote.clone())?),
        (None, TeacherKind::Scripted) => bail!("textgrad needs --fixture or --teacher remote"),
    };
    let scenario = match scenario {
        Some(p) => TextGradScenario::load(p)?,
        None => TextGradScenario::bundled(),
    };
    let x = scenario.training_queries()?;
    let objective = TextualObjective::from_rewards(&cfg.reward);
    let seed = cfg.scenario.seeds.first().copied().unwrap_or(0);
    let sim = cfg.post_sim(seed)?;
    let streams = SeedStream::new(seed);
    let mut backend = make_backend(&cfg.teacher, seed)?;
    let mut evaluate = |i: &Instruction| {
        evaluate_instruction(i, &sim, backend.as_mut(), eval_episodes, &streams)
    };
    let initial = match cfg.teacher.instruction_file {
        Some(_) => load_instruction(&cfg.teacher)?,
        None => Instruction::initial(),
    };
    let mut state = PromptOptState::new(initial, max_epochs);
    let best = run_textgrad(&mut state, client.as_mut(), &x, &objective, &mut evaluate)?;
    for rec in &state.history {
        println!(
            "{}: goodput {}{}",
            rec.instruction.id,
            rec.goodput.map(|g| format!("{g:.4}")).unwrap_or_else(|| "-".into()),
            if rec.rejected_update.is_some() { " (update rejected)" } else { "" }
        );
    }
    println!("selected {}{}", best.id, if state.converged { " (converged)" } else { "" });
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join("textgrad.json"), serde_json::to_string_pretty(&state)?)?;
    std::fs::write(c.out.join("instruction.txt"), format!("{}\n", best.text))?;
    Ok(())
}
