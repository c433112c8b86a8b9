use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cue_cli::{CliError, CliResult, Context, Overrides, ProviderKind};
use cue_core::cues::CueMode;
use cue_core::synthetic::SyntheticConfig;

#[derive(Parser)]
#[command(name = "cue", version, about = "Long-tailed linear probes with zero-shot and LLM cues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON, or TOML with a .toml extension).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ir: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda_zs: Option<f64>,
    #[arg(long)]
    lambda_llm: Option<f64>,
    /// Split and training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cue selection: top, random or last.
    #[arg(long)]
    mode: Option<String>,
    /// Neighbor provider: fixture or live.
    #[arg(long)]
    provider: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic clustered benchmark and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Select the long-tailed training subset.
    Split(RunArgs),
    /// Score the training subset and test set against the class prototypes.
    Zeroshot(RunArgs),
    /// Mine per-sample VLM cues from the zero-shot scores.
    Cues(RunArgs),
    /// Build the class neighbor graph with the configured provider.
    Neighbors(RunArgs),
    /// Train the classifier head.
    Train(RunArgs),
    /// Evaluate the trained head on the test set.
    Eval(RunArgs),
    /// Train the component and cue-selection ablation arms.
    Ablate(RunArgs),
    /// Train the loss-weight grid.
    Sweep(RunArgs),
    /// Print the resolved config and run directory.
    Show(RunArgs),
}

impl RunArgs {
    fn context(&self) -> CliResult<Context> {
        let overrides = Overrides {
            ir: self.ir,
            k: self.k,
            lambda_zs: self.lambda_zs,
            lambda_llm: self.lambda_llm,
            seed: self.seed,
            mode: self.mode.as_deref().map(str::parse::<CueMode>).transpose()?,
            provider: self.provider.as_deref().map(str::parse::<ProviderKind>).transpose()?,
        };
        Context::from_file(&self.config, &overrides)
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { out, seed } => {
            let files = cue_cli::cmd_synth(&out, &SyntheticConfig { seed, ..SyntheticConfig::default() })?;
            println!("{}", files.config.display());
        }
        Command::Split(a) => {
            let split = cue_cli::cmd_split(&a.context()?)?;
            println!("selected {} samples", split.flat_indices().len());
        }
        Command::Zeroshot(a) => {
            let meta = cue_cli::cmd_zeroshot(&a.context()?)?;
            if let Some(acc) = meta.test_accuracy {
                println!("zero-shot test accuracy {:.4}", acc);
            }
        }
        Command::Cues(a) => {
            let cache = cue_cli::cmd_cues(&a.context()?)?;
            println!("{} cue lists ({} mode, k={})", cache.per_sample_cue_lists.len(), cache.mode.as_str(), cache.k);
        }
        Command::Neighbors(a) => {
            let out = cue_cli::cmd_neighbors(&a.context()?)?;
            println!("{} classes, {} dropped names", out.graph.num_classes(), out.report.dropped.len());
        }
        Command::Train(a) => {
            let ctx = a.context()?;
            let report = cue_cli::cmd_train(&ctx)?;
            println!("{} steps, model at {}", report.steps, ctx.layout.model.display());
        }
        Command::Eval(a) => print!("{}", cue_cli::cmd_eval(&a.context()?)?.table),
        Command::Ablate(a) => print!("{}", cue_cli::harness::render_ablation(&cue_cli::cmd_ablate(&a.context()?)?)),
        Command::Sweep(a) => {
            let ctx = a.context()?;
            cue_cli::cmd_sweep(&ctx)?;
            println!("grids written to {}", ctx.layout.reports.display());
        }
        Command::Show(a) => {
            let ctx = a.context()?;
            println!("run dir: {}", ctx.layout.run_dir.display());
            print!("{}", ctx.config.to_text(true)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}

fn report(e: &CliError) {
    eprintln!("{}", e.to_json());
}
