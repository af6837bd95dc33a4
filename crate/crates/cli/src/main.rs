use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ssev_core::guard::{GuardMode, SelectionMode};
use ssev_core::harness::{
    self, AgentKind, EvalOptions, EvalTarget, RunConfig, Stage, DEPLOYMENT_CHECKPOINT,
    DRIVING_CHECKPOINT, RISK_CHECKPOINT,
};
use ssev_core::sim::Scenario;

#[derive(Parser)]
#[command(name = "ssev", version, about = "Risk-adaptive safety guard for highway driving agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// adaptive | fixed:<Tc> | off
    #[arg(long)]
    guard: Option<GuardMode>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long, value_enum)]
    shield_mode: Option<ShieldModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShieldModeArg {
    Paper,
    Conservative,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Driving,
    Deployment,
}

#[derive(Subcommand)]
enum Command {
    /// Train the driving agent that supplies horizon labels.
    TrainPhi {
        #[command(flatten)]
        common: Common,
    },
    /// Collect the behavior-cloning dataset and fit the risk model.
    CollectTrainRq {
        #[command(flatten)]
        common: Common,
        /// Driving agent checkpoint; defaults to the one in --out.
        #[arg(long)]
        driving: Option<PathBuf>,
    },
    /// Train the deployment agent behind the guard.
    TrainOmega {
        #[command(flatten)]
        common: Common,
        /// Risk model checkpoint; defaults to the one in --out.
        #[arg(long)]
        risk_model: Option<PathBuf>,
    },
    /// Evaluate an agent and write metrics, traces and plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "deployment")]
        agent: AgentArg,
        /// Agent checkpoint; defaults to the one in --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Drive with uniform random actions instead of a checkpoint.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        risk_model: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        traces: bool,
        #[arg(long)]
        plots: bool,
    },
    /// Recompute metrics from a directory of episode traces.
    ReplayTrace {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one episode trace as a spatio-temporal SVG.
    PlotTrace {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(g) = self.guard {
            cfg.guard = g;
        }
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        if let Some(m) = self.shield_mode {
            cfg.shield.selection_mode = match m {
                ShieldModeArg::Paper => SelectionMode::Paper,
                ShieldModeArg::Conservative => SelectionMode::Conservative,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainPhi { common } => {
            let cfg = common.config()?;
            let run = harness::cmd_train_phi(&cfg, &common.out)?;
            eprintln!("{} episodes", run.curve.len());
            if let Some(m) = run.metrics {
                print_json(&m)?;
            }
        }
        Command::CollectTrainRq { common, driving } => {
            let cfg = common.config()?;
            let ckpt = or_default(&driving, &common.out, DRIVING_CHECKPOINT);
            let run = harness::cmd_collect_train_rq(&cfg, &ckpt, &common.out)?;
            print_json(&run)?;
        }
        Command::TrainOmega { common, risk_model } => {
            let cfg = common.config()?;
            let rq = match (&risk_model, cfg.guard) {
                (Some(p), _) => Some(p.clone()),
                (None, GuardMode::Adaptive) => Some(common.out.join(RISK_CHECKPOINT)),
                (None, _) => None,
            };
            let run = harness::cmd_train_omega(&cfg, rq.as_deref(), &common.out)?;
            if let Some(m) = run.metrics {
                print_json(&m)?;
            }
        }
        Command::Evaluate {
            common,
            agent,
            checkpoint,
            random,
            risk_model,
            episodes,
            traces,
            plots,
        } => {
            let mut cfg = common.config()?;
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
                cfg.validate()?;
            }
            let (kind, default_ckpt) = match agent {
                AgentArg::Driving => (AgentKind::Driving, DRIVING_CHECKPOINT),
                AgentArg::Deployment => (AgentKind::Deployment, DEPLOYMENT_CHECKPOINT),
            };
            let ckpt = or_default(&checkpoint, &common.out, default_ckpt);
            let target = if random {
                EvalTarget::Random { kind }
            } else {
                EvalTarget::Checkpoint { kind, path: &ckpt }
            };
            let rq = or_default(&risk_model, &common.out, RISK_CHECKPOINT);
            let opts = EvalOptions { traces, plots };
            let report = harness::cmd_evaluate(&cfg, target, Some(&rq), &common.out, &opts)?;
            print_json(&report)?;
        }
        Command::ReplayTrace { traces, out } => {
            let report = harness::replay_traces(&traces, Stage::Application)?;
            if let Some(out) = out {
                harness::write_json(&out, &report)?;
            }
            print_json(&report)?;
        }
        Command::PlotTrace { trace, out } => {
            let records = harness::read_trace(&trace)?;
            let svg = harness::plot_trace_svg(&records, &RunConfig::default().lanes());
            harness::write_svg(&out, &svg).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}
