//! `tdrl`: dataset generation, training, evaluation, heatmaps and oracle
//! checks for temporal-distance latent augmentation on mazes.
//!
//! Exit codes: 0 success, 1 user error (bad input, config or missing
//! prerequisite), 2 numerical abort.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tdrl::checkpoint::{Checkpoint, Phase};
use tdrl::config::TrainConfig;
use tdrl::env::State;
use tdrl::pipeline::{self, PhaseSelection};
use tdrl::oracle;

#[derive(Parser)]
#[command(name = "tdrl", version, about = "Temporal-distance latent augmentation for offline goal-conditioned RL on mazes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    All,
    Repr,
    Dynamics,
    Policy,
}

#[derive(Subcommand)]
enum Command {
    /// Roll the behaviour policy, label goals and write the dataset plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; `.bin` selects the binary format, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train representation, dynamics and policy (with scheduled rollouts).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        /// Ablation arm without synthetic data (sigma = 0).
        #[arg(long, conflicts_with = "naive_state_dynamics")]
        no_rollouts: bool,
        /// Baseline arm with dynamics fitted on raw coordinates.
        #[arg(long)]
        naive_state_dynamics: bool,
    },
    /// Success rates of a trained policy, one run per configured seed.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Goal as `x,y`; repeatable. Defaults to the maze's marked goals.
        #[arg(long = "goal", value_parser = parse_point)]
        goals: Vec<[f64; 2]>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learned distance from every free cell to a goal, as `x,y,d` CSV.
    Heatmap {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_point, required_unless_present = "corners", conflicts_with = "corners")]
        goal: Option<[f64; 2]>,
        /// One map per maze corner; `--out` is then a directory.
        #[arg(long)]
        corners: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-check the exact oracles and optionally export their tables.
    VerifyOracles {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `x,y,bfs_steps,v_star` tables, one per marked goal.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y] => Ok([x.parse().map_err(|e| format!("{e}"))?, y.parse().map_err(|e| format!("{e}"))?]),
        _ => Err(format!("expected x,y but got {s:?}")),
    }
}

fn load_config(path: Option<&Path>) -> tdrl::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> tdrl::Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.data.seed = None;
            }
            let m = pipeline::gen_data(&cfg, &out)?;
            println!("wrote {} transitions to {} (sha256 {})", m.n_transitions, out.display(), m.data_sha256);
        }
        Command::Train { config, out, data, seed, phase, no_rollouts, naive_state_dynamics } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if data.is_some() {
                cfg.data.path = data;
            }
            if no_rollouts {
                cfg = cfg.without_rollouts();
            }
            if naive_state_dynamics {
                cfg = cfg.with_naive_dynamics();
            }
            cfg.validate()?;
            let phases = match phase {
                PhaseArg::All => PhaseSelection::All,
                PhaseArg::Repr => PhaseSelection::Only(Phase::Repr),
                PhaseArg::Dynamics => PhaseSelection::Only(Phase::Dynamics),
                PhaseArg::Policy => PhaseSelection::Only(Phase::Policy),
            };
            let m = pipeline::train(&cfg, &out, phases)?;
            for (name, hash) in &m.checkpoints {
                println!("{name} {hash}");
            }
            if let Some(s) = m.final_success {
                println!("final success {s:.3} ({} refreshes)", m.refreshes);
            }
        }
        Command::Eval { config, checkpoint, goals, out } => {
            let cfg = load_config(config.as_deref())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let goals = (!goals.is_empty()).then(|| goals.into_iter().map(State).collect());
            let doc = pipeline::evaluate_checkpoint(&cfg, &ck, goals)?;
            let json = serde_json::to_string_pretty(&doc)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, json)?;
                    println!("mean success {:.3} ± {:.3}", doc.summary.sweep.mean, 2.0 * doc.summary.sweep.std);
                }
                None => println!("{json}"),
            }
        }
        Command::Heatmap { config, checkpoint, goal, corners, out } => {
            let cfg = load_config(config.as_deref())?;
            let env = cfg.env.build()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let goals = if corners { pipeline::corner_goals(&env) } else { vec![State(goal.expect("clap enforces goal"))] };
            for p in pipeline::heatmaps(ck.repr()?, &env, &goals, &out)? {
                println!("{}", p.display());
            }
        }
        Command::VerifyOracles { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let env = cfg.env.build()?;
            let checks = oracle::verify(&env, cfg.repr.gamma)?;
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                for g in &env.layout().goals {
                    let path = dir.join(format!("oracle_{}_{}.csv", g[0], g[1]));
                    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
                    oracle::write_table_csv(&env, &State::from_cell(*g), cfg.repr.gamma, &mut w)?;
                    w.flush()?;
                }
            }
            if checks.iter().any(|c| !c.passed) {
                eprintln!("error: oracle self-checks failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::ShowConfig { config } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.to_toml());
            println!("# hash {}", cfg.hash());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
