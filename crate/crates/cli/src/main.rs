use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsb_cli::{check, commands, ExperimentConfig, Result};
use lsb_core::metrics::EvalReport;

#[derive(Parser)]
#[command(name = "lsb", version, about = "Unpaired distribution translation with a decomposed bridge ODE")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    nfe: Option<usize>,

    /// lsb, sdedit or dual-bridge.
    #[arg(long, global = true)]
    method: Option<String>,

    /// Disabled components: snr, time-eps, cfg, denoise (comma or + separated), or all.
    #[arg(long, global = true)]
    ablate: Option<String>,

    /// Write trajectory.csv (lsb only).
    #[arg(long, global = true)]
    save_trajectory: bool,

    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training and held-out points for both domains.
    GenData,
    /// Train the domain-conditioned noise network.
    Train,
    /// Translate the held-out source points and score them.
    Translate,
    /// Methods x budgets x ablations x seeds.
    Sweep,
    /// Run the invariant battery.
    Check,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lsb_cli::CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out.clone_from(o);
    }
    if let Some(n) = cli.nfe {
        cfg.bridge.nfe = n;
    }
    if let Some(m) = &cli.method {
        cfg.set("method", m)?;
    }
    if let Some(a) = &cli.ablate {
        cfg.set("ablate", a)?;
    }
    if cli.save_trajectory {
        cfg.save_trajectory = true;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = config(cli)?;
    match cli.command {
        Command::GenData => {
            commands::gen_data(&cfg)?;
        }
        Command::Train => {
            let losses = commands::train(&cfg)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("trained {} steps: loss {first:.4} -> {last:.4}", losses.len());
            } else {
                println!("wrote the initial model (0 steps)");
            }
        }
        Command::Translate => {
            let r = commands::translate(&cfg)?;
            println!("{}\n{}", EvalReport::csv_header(), r.csv_row());
        }
        Command::Sweep => {
            let res = commands::sweep(&cfg)?;
            print!("{}", res.to_csv());
            return Ok(res.failures() == 0);
        }
        Command::Check => {
            let results = check::run_all(&cfg);
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(check::CheckResult::passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
