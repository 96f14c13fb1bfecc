use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sccl::config::{parse_seeds, CliConfig};
use sccl::rundir::{
    ablation_table, cmd_ablate, cmd_dump_embeddings, cmd_run, cmd_sweep_k, CmdError, RunDir,
    DEFAULT_SWEEP_K,
};
use sccl::trainer::Mode;
use sccl::Error;

#[derive(Parser)]
#[command(
    name = "sccl",
    version,
    about = "Supervised contrastive continual learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode over every seed and aggregate ACC/BWT.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train all five modes on the same data and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Re-evaluate a finished run for several k.
    SweepK {
        /// A seed directory written by `run`.
        run_dir: PathBuf,
        /// Comma-separated k values.
        #[arg(long, default_value = "1,5,10,20,50")]
        k: String,
    },
    /// Write the final representations of a task's test split and exemplars.
    DumpEmbeddings {
        run_dir: PathBuf,
        #[arg(long)]
        task: u32,
    },
}

fn load_config(
    path: &Path,
    seeds: Option<&str>,
    mode: Option<&str>,
) -> Result<CliConfig, CmdError> {
    let mut cfg = CliConfig::load(path).map_err(CmdError::Setup)?;
    if let Some(s) = seeds {
        cfg.seeds = parse_seeds(s).map_err(CmdError::Setup)?;
    }
    if let Some(m) = mode {
        cfg.run.mode = m.parse::<Mode>().map_err(CmdError::Setup)?;
    }
    Ok(cfg)
}

fn parse_k(s: &str) -> Result<Vec<usize>, CmdError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CmdError::Setup(Error::Config(format!("--k {s:?}: {e}"))))
}

fn execute(cmd: Command) -> Result<(), CmdError> {
    match cmd {
        Command::Run {
            config,
            out,
            seeds,
            mode,
        } => {
            let cfg = load_config(&config, seeds.as_deref(), mode.as_deref())?;
            let agg = cmd_run(&cfg, &out)?;
            print!("{}", ablation_table(std::slice::from_ref(&agg)));
            println!("per-seed ACC: {:?}", agg.accs);
        }
        Command::Ablate { config, out, seeds } => {
            let cfg = load_config(&config, seeds.as_deref(), None)?;
            let rows = cmd_ablate(&cfg, &out)?;
            print!("{}", ablation_table(&rows));
        }
        Command::SweepK { run_dir, k } => {
            let k = if k.is_empty() {
                DEFAULT_SWEEP_K.to_vec()
            } else {
                parse_k(&k)?
            };
            let dir = RunDir::new(run_dir);
            for row in cmd_sweep_k(&dir, &k)? {
                let flag = if row.clamped { " (clamped)" } else { "" };
                println!("k={:<4} ACC {:.4}{flag}", row.k, row.acc);
            }
            println!("wrote {}", dir.sweep().display());
        }
        Command::DumpEmbeddings { run_dir, task } => {
            let dir = RunDir::new(run_dir);
            let n = cmd_dump_embeddings(&dir, task)?;
            println!("wrote {n} rows to {}", dir.embeddings(task).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sccl: {e}");
            ExitCode::from(match e {
                CmdError::Setup(_) => 1,
                CmdError::Runtime(_) => 2,
            })
        }
    }
}
