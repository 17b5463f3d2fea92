use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use keeplearn::continual::MethodKind;
use keeplearn::harness::{
    cmd_eval, cmd_methods_matrix, cmd_report, cmd_run, cmd_selfcheck, method_table, preset, EvalSplit,
    ExperimentConfig, RunOptions, SelfcheckOptions, OUT_ENV, PRESETS,
};
use keeplearn::tensor::exec;
use keeplearn::{Error, Result};

#[derive(Parser)]
#[command(name = "keeplearn", version, about = "Continual learning across sequential data centers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: desk-synthetic, desk-dual-head or mini-cifar.
    #[arg(long)]
    preset: Option<String>,
    /// Run only these seeds instead of the configured list.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Run sequentially even when built with parallel support.
    #[arg(long)]
    sequential: bool,
    /// Suppress per-trial progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method over all stages for every seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Override the configured method.
        #[arg(long)]
        method: Option<MethodKind>,
    },
    /// Train several methods on the same split and tabulate them.
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Comma-separated methods, e.g. FT,LwF+,Proposed.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<MethodKind>,
    },
    /// Score a stage checkpoint on a split of the configured data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// test, val or chunkK.
        #[arg(long, default_value = "test")]
        split: EvalSplit,
    },
    /// Rebuild the reports from trial files in an output directory.
    Report {
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
    },
    /// Gradient, metric and freeze checks.
    Selfcheck {
        /// Perturb one gradient check to confirm it is caught.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Error::Validation(format!("give --config FILE or --preset NAME ({})", PRESETS.join(", "))))
        }
    };
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_options(cfg: &ExperimentConfig, o: &OutArgs) -> Result<RunOptions> {
    exec::set_parallel(!o.sequential);
    let out = o
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Validation(format!("give --out DIR, set {OUT_ENV} or output_dir in the config")))?;
    Ok(RunOptions { out, threads: o.threads, verbose: !o.quiet })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { cfg, out, method } => {
            let mut config = load_config(&cfg)?;
            if let Some(m) = method {
                config.method = m;
            }
            let opts = run_options(&config, &out)?;
            let summary = cmd_run(&config, &opts)?;
            print!("{}", method_table(&summary));
        }
        Command::Matrix { cfg, out, methods } => {
            let config = load_config(&cfg)?;
            let opts = run_options(&config, &out)?;
            let summary = cmd_methods_matrix(&config, &methods, &opts)?;
            print!("{}", method_table(&summary));
        }
        Command::Eval { cfg, checkpoint, split } => {
            let config = load_config(&cfg)?;
            let report = cmd_eval(&config, &checkpoint, split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { out } => {
            let summary = cmd_report(&out)?;
            print!("{}", method_table(&summary));
        }
        Command::Selfcheck { corrupt } => {
            cmd_selfcheck(&SelfcheckOptions { corrupt }, &mut std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
