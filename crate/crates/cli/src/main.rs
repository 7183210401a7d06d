mod commands;
mod config;
mod failure;
mod manifest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{BaselineArgs, EvalArgs, PlotArgs, PredictArgs, PreprocessArgs, RerunArgs, SynthArgs, TrainArgs};
use failure::{CliResult, Failure};

/// Head and tail localization for worm micrographs.
#[derive(Debug, Parser)]
#[command(name = "wormloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Threshold, crop and resize raw images, transferring their labels.
    Preprocess(PreprocessArgs),
    /// Train one network per run and save metrics and checkpoints.
    Train(TrainArgs),
    /// Score checkpoints with PCK and print the mean ± std report.
    Eval(EvalArgs),
    /// Render one prediction with its head probability map.
    Predict(PredictArgs),
    /// Run the contour-angle proposer on a raw image.
    Baseline(BaselineArgs),
    /// Draw loss and PCK curves from metrics CSVs.
    Plot(PlotArgs),
    /// Replay the command recorded in a run.json.
    Rerun(RerunArgs),
}

fn dispatch(command: &Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Synth(a) => commands::synth(a, argv),
        Command::Preprocess(a) => commands::preprocess(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Eval(a) => commands::eval(a, argv),
        Command::Predict(a) => commands::predict(a, argv),
        Command::Baseline(a) => commands::baseline(a, argv),
        Command::Plot(a) => commands::plot(a, argv),
        Command::Rerun(a) => {
            let replay = commands::rerun_argv(a)?;
            match parse(&replay)?.command {
                Command::Rerun(_) => Err(Failure::data("manifest records a rerun")),
                c => dispatch(&c, &replay),
            }
        }
    }
}

fn try_parse(argv: &[String]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("wormloc".to_string()).chain(argv.iter().cloned()))
}

/// Clap errors span several lines; keep the first as the one-line message.
fn usage_failure(e: &clap::Error) -> Failure {
    let text = e.to_string();
    let first = text.lines().next().unwrap_or("invalid arguments");
    Failure::usage(first.trim_start_matches("error: "))
}

fn parse(argv: &[String]) -> CliResult<Cli> {
    try_parse(argv).map_err(|e| usage_failure(&e))
}

fn run(argv: Vec<String>) -> i32 {
    let result = match try_parse(&argv) {
        Ok(cli) => dispatch(&cli.command, &argv),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => Err(usage_failure(&e)),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.one_line());
            f.kind.code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args().skip(1).collect()));
}
