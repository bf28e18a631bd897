use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xconsist::error::EXIT_OK;
use xconsist::{run_all, run_stage, Context, Manifest, Options, Stage};

#[derive(Parser)]
#[command(name = "xconsist", version, about = "Explanation consistency across training variations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment manifest (TOML, or JSON by extension).
    #[arg(long)]
    manifest: PathBuf,
    /// Parallel cells per stage.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Normalise attributions before the discriminator.
    #[arg(long)]
    normalize: bool,
    /// Use the 2000 / 500 stratified MNIST subset.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model of the variation matrix and tabulate accuracy.
    Train(Common),
    /// Write attributions for every (model, explainer) cell.
    Explain(Common),
    /// Pairwise separability and consistency per (arch, explainer).
    Consistency(Common),
    /// Infidelity and sensitivity per (model, explainer).
    Quality(Common),
    /// Layer similarity curves across checkpoints.
    Svcca(Common),
    /// Join all stage outputs into report.json and report.txt.
    Report(Common),
    /// Every stage in order.
    Run(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Train(c) => (Some(Stage::Train), c),
        Command::Explain(c) => (Some(Stage::Explain), c),
        Command::Consistency(c) => (Some(Stage::Consistency), c),
        Command::Quality(c) => (Some(Stage::Quality), c),
        Command::Svcca(c) => (Some(Stage::Svcca), c),
        Command::Report(c) => (Some(Stage::Report), c),
        Command::Run(c) => (None, c),
    };
    let result = Manifest::load(&common.manifest, common.desk_scale).and_then(|lm| {
        let ctx = Context::new(
            lm,
            Options {
                jobs: common.jobs,
                normalize: common.normalize,
            },
        )?;
        match stage {
            Some(s) => run_stage(&ctx, s),
            None => run_all(&ctx),
        }
    });
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
