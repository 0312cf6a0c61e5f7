use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distkv_cli::{cmd_gen_trace, cmd_plan, cmd_run, cmd_verify_attention, load_config, CliError};
use distkv_core::attention::verify::VerifyParams;
use distkv_core::sim::Policy;

#[derive(Parser)]
#[command(name = "distkv", version, about = "Distributed KV cache serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check blockwise attention against an extended-precision reference.
    VerifyAttention {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 2048)]
        max_seq: usize,
        #[arg(long, default_value_t = 64)]
        max_partitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a request trace from a TOML trace spec.
    GenTrace {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plan block moves for a snapshot file.
    Plan {
        snapshot: PathBuf,
        /// Cluster config supplying curves and thresholds (desk default if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulate a trace and write metrics files.
    Run {
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = Policy::Infinite)]
        policy: Policy,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Protocol message log file.
        #[arg(long)]
        event_log: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::VerifyAttention {
            trials,
            max_seq,
            max_partitions,
            seed,
        } => {
            let params = VerifyParams {
                trials,
                max_seq,
                max_partitions,
                seed,
                ..VerifyParams::default()
            };
            cmd_verify_attention(&params, &mut stdout)
        }
        Command::GenTrace { spec, out, seed } => {
            let n = cmd_gen_trace(&spec, &out, seed)?;
            println!("wrote {n} requests to {}", out.display());
            Ok(true)
        }
        Command::Plan { snapshot, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            cmd_plan(&snapshot, &cfg, &mut stdout)
        }
        Command::Run {
            trace,
            config,
            policy,
            out,
            event_log,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let files = cmd_run(&cfg, &trace, policy, &out, event_log.as_deref())?;
            print!("{}", std::fs::read_to_string(&files.summary).unwrap_or_default());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
