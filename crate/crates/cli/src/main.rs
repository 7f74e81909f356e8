//! `repsim`: batch driver for corpus synthesis, pre-training, similarity
//! heatmaps, probing and the correlation and scaling studies.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use repsim_core::{Error, Result};

use crate::config::{Output, Overrides, Provenance, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "repsim", version, about = "Self-supervised speech representation similarity laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labelled synthetic corpus and its manifest
    SynthCorpus(Overrides),
    /// Turn a directory of WAV files into log-Mel feature files
    Featurize(Overrides),
    /// Train the selected models and save checkpoints and loss logs
    Pretrain(Overrides),
    /// Write per-utterance representations of one corpus split
    Extract(Overrides),
    /// Pairwise similarity heatmap over the selected models
    Similarity(Overrides),
    /// Phone and speaker linear probes
    Probe(Overrides),
    /// Correlate pre-training loss with probe error over checkpoints
    SweepCorrelate(Overrides),
    /// Similarity to a reference model as training data grows
    ScaleStudy(Overrides),
    /// Finite-difference gradient check of the selected models
    GradCheck(Overrides),
}

impl Command {
    fn parts(&self) -> (&'static str, &Overrides) {
        match self {
            Command::SynthCorpus(o) => ("synth-corpus", o),
            Command::Featurize(o) => ("featurize", o),
            Command::Pretrain(o) => ("pretrain", o),
            Command::Extract(o) => ("extract", o),
            Command::Similarity(o) => ("similarity", o),
            Command::Probe(o) => ("probe", o),
            Command::SweepCorrelate(o) => ("sweep-correlate", o),
            Command::ScaleStudy(o) => ("scale-study", o),
            Command::GradCheck(o) => ("grad-check", o),
        }
    }
}

fn run(command: &Command) -> Result<()> {
    let (name, overrides) = command.parts();
    let cfg = RunConfig::resolve(overrides)?;
    let out = Output::new(&cfg.out, Provenance::new(name, &cfg))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.jobs)))?;
    log::info!("{name}: seed {} config {}", cfg.seed(), &out.provenance.config_sha256[..12]);
    pool.install(|| match command {
        Command::SynthCorpus(_) => commands::synth_corpus(&cfg, &out),
        Command::Featurize(_) => commands::featurize(&cfg, &out),
        Command::Pretrain(_) => commands::pretrain(&cfg, &out),
        Command::Extract(_) => commands::extract(&cfg, &out),
        Command::Similarity(_) => commands::similarity(&cfg, &out),
        Command::Probe(_) => commands::probe(&cfg, &out),
        Command::SweepCorrelate(_) => commands::sweep_correlate(&cfg, &out),
        Command::ScaleStudy(_) => commands::scale_study(&cfg, &out),
        Command::GradCheck(_) => commands::grad_check(&cfg, &out),
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPSIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("error[usage]: a subcommand is required\n\n{e}");
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("error[usage]: {first}");
                }
            }
            return ExitCode::from(2);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
