use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

use convcnp_cli::commands::{self, Run};

#[derive(Parser)]
#[command(name = "convcnp", version, about = "Convolutional conditional neural processes")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write evaluation tasks as JSON lines plus a manifest.
    GenerateData {
        /// Number of tasks (defaults to eval.n_tasks).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
    },
    /// Train the configured model and write checkpoints and the log.
    Train,
    /// Evaluate a checkpoint on evaluation tasks.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines task file; generated from the seed when absent.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        /// Evaluate the initial parameters instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Exact GP posterior log-likelihood on the same tasks.
    Oracle {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
    },
    /// Paired in-range versus translated evaluation.
    Extrapolate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        shift: Option<f64>,
    },
    /// Dense predictive curve for one task.
    Dump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference check of the model's NLL gradients.
    Gradcheck {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Permutation and translation checks on evaluation tasks.
    EquivarianceAudit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Oracle { .. } => "oracle",
            Command::Extrapolate { .. } => "extrapolate",
            Command::Dump { .. } => "dump",
            Command::Gradcheck { .. } => "gradcheck",
            Command::EquivarianceAudit { .. } => "equivariance-audit",
        }
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let run = Run::load(config, cli.seed, cli.out.as_deref())?;
    Ok(match &cli.command {
        Command::GenerateData { count, shift } => {
            let r = commands::generate(&run, *count, *shift)?;
            json!({ "tasks": r.tasks_path, "n_tasks": r.manifest.n_tasks, "rejection": r.manifest.rejection })
        }
        Command::Train => {
            let r = commands::train_cmd(&run)?;
            let last = r.log.epochs.last();
            json!({
                "best": r.best,
                "last": r.last,
                "best_epoch": r.log.best_epoch,
                "initial_val_ll": r.log.initial_val_ll,
                "final_val_ll": last.map(|e| e.val_ll),
            })
        }
        Command::Evaluate {
            checkpoint,
            tasks,
            shift,
            untrained,
        } => json!(commands::evaluate_cmd(&run, checkpoint.as_deref(), tasks.as_deref(), *shift, *untrained)?),
        Command::Oracle { tasks, shift } => json!(commands::oracle_cmd(&run, tasks.as_deref(), *shift)?),
        Command::Extrapolate { checkpoint, tasks, shift } => {
            json!(commands::extrapolate_cmd(&run, checkpoint.as_deref(), tasks.as_deref(), *shift)?)
        }
        Command::Dump { checkpoint, tasks, index } => {
            let rows = commands::dump_cmd(&run, checkpoint.as_deref(), tasks.as_deref(), *index)?;
            json!({ "rows": rows.len(), "file": run.path("dump.csv") })
        }
        Command::Gradcheck { checkpoint } => {
            let s = commands::gradcheck_cmd(&run, checkpoint.as_deref())?;
            json!({ "max_rel_error": s.max_rel_error, "passed": s.passed })
        }
        Command::EquivarianceAudit { checkpoint, tasks } => {
            json!(commands::equivariance_audit_cmd(&run, checkpoint.as_deref(), tasks.as_deref())?)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("{}", json!({ "command": cli.command.name(), "error": chain[0], "causes": &chain[1..] }));
            ExitCode::FAILURE
        }
    }
}
