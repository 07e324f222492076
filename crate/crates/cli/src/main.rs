use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use intformer_cli::{commands, CliError, CliResult, Run, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "intformer", version, about = "Synthetic crash-likelihood experiments")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one seed, e.g. `train=42`. Repeatable.
    #[arg(long = "seed-override", value_name = "K=V", global = true)]
    seed_override: Vec<String>,

    /// Directory holding every artifact of the run.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Synthesize snapshots and crashes.
    Generate,
    /// Build, split and balance the window files.
    Prepare,
    /// Train the configured model family.
    Train,
    /// Score the checkpoint on the test split.
    Evaluate,
    /// Shapley attributions for positive test windows.
    Explain,
    /// Train and score all five model families.
    Benchmark,
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    for o in &cli.seed_override {
        cfg.seeds.set(o)?;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<String> {
    let run = Run::new(load_config(cli)?, &cli.out)?;
    log::info!("run {} config {}", run.config.run_name(), run.stamp.config_hash);
    let summary = match cli.command {
        Command::Generate => serde_json::to_string(&commands::generate(&run)?)?,
        Command::Prepare => serde_json::to_string(&commands::prepare(&run)?)?,
        Command::Train => {
            let model = commands::train(&run)?;
            let last = model.history.last().map(|e| e.mean_train_loss);
            format!("{{\"epochs\":{},\"final_train_loss\":{}}}", model.history.len(), last.unwrap_or(f64::NAN))
        }
        Command::Evaluate => serde_json::to_string(&commands::evaluate(&run)?)?,
        Command::Explain => serde_json::to_string(&commands::explain_windows(&run)?)?,
        Command::Benchmark => {
            let doc = commands::benchmark(&run)?;
            fs::read_to_string(run.layout.benchmark_csv()).unwrap_or_else(|_| format!("{} rows", doc.rows.len()))
        }
    };
    Ok(summary)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
