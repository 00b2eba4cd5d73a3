//! `caproj` command-line interface.

mod commands;
mod config;
mod viz;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "caproj",
    version,
    about = "Capsule subspace projection heads: train, evaluate, compare, verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write records plus the model.
    Train {
        /// Flat key-value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set seed=3. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory for config.txt, records.jsonl, model.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// One of test, train, validation.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train several heads on identical data and tabulate test errors.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma list like capsule:2,capsule:4,group_neuron:4,linear.
        #[arg(long)]
        heads: String,
        /// Comma list of seeds, e.g. 0,1,2,3,4.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytical gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Comma list of d:c pairs for the capsule suite grid.
        #[arg(long)]
        dims: Option<String>,
    },
    /// Export per-subspace scatter files (CSV + SVG) for a c=2 model.
    Visualize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma list of class indices; all classes when omitted.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time exact vs hyper-power sigma maintenance on a drifting basis.
    BenchSigma {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-step basis drift scale.
        #[arg(long, default_value_t = 1e-4)]
        drift: f64,
        /// Comma list of d:c pairs; a default grid when omitted.
        #[arg(long)]
        dims: Option<String>,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train {
            config,
            overrides,
            out,
        } => commands::cmd_train(config, overrides, out),
        Command::Eval {
            model,
            config,
            overrides,
            split,
        } => commands::cmd_eval(model, config, overrides, split),
        Command::Compare {
            config,
            overrides,
            heads,
            seeds,
            out,
        } => commands::cmd_compare(config, overrides, heads, seeds, out),
        Command::Gradcheck {
            trials,
            seed,
            tolerance,
            dims,
        } => commands::cmd_gradcheck(*trials, *seed, *tolerance, dims.as_deref()),
        Command::Visualize {
            model,
            config,
            overrides,
            classes,
            out,
        } => commands::cmd_visualize(model, config, overrides, classes.as_deref(), out),
        Command::BenchSigma {
            steps,
            seed,
            drift,
            dims,
            out,
        } => commands::cmd_bench_sigma(*steps, *seed, *drift, dims.as_deref(), out.as_ref()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // validation failure.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}
