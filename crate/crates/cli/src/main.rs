//! `mrasp`: the pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod args;
mod commands;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use thiserror::Error;

use args::{Cli, Command};
use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mrasp_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

via_core!(
    mrasp_core::corpus::CorpusError,
    mrasp_core::subword::SubwordError,
    mrasp_core::ras::RasError,
    mrasp_core::model::ModelError,
    mrasp_core::trainer::TrainError,
    mrasp_core::analysis::AnalysisError,
    mrasp_core::synthlab::SynthError
);

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::LearnBpe(_) => "learn-bpe",
        Command::ApplyBpe(_) => "apply-bpe",
        Command::BuildVocab(_) => "build-vocab",
        Command::RasAugment(_) => "ras-augment",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Translate(_) => "translate",
        Command::ScoreBleu(_) => "score-bleu",
        Command::AnalyzeSimilarity(_) => "analyze-similarity",
        Command::AnalyzePca(_) => "analyze-pca",
        Command::SynthGenerate(_) => "synth-generate",
        Command::Experiment(_) => "experiment",
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let st = Settings::new(command_name(&cli.command), cli.config.as_deref())?;
    if let Some(jobs) = st.silent("jobs", cli.jobs)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::LearnBpe(a) => commands::learn_bpe(&st, a),
        Command::ApplyBpe(a) => commands::apply_bpe(&st, a),
        Command::BuildVocab(a) => commands::build_vocab(&st, a),
        Command::RasAugment(a) => commands::ras_augment(&st, a),
        Command::Pretrain(a) => commands::pretrain(&st, a),
        Command::Finetune(a) => commands::finetune(&st, a),
        Command::Translate(a) => commands::translate(&st, a),
        Command::ScoreBleu(a) => commands::score_bleu(&st, a),
        Command::AnalyzeSimilarity(a) => commands::analyze_similarity(&st, a),
        Command::AnalyzePca(a) => commands::analyze_pca(&st, a),
        Command::SynthGenerate(a) => commands::synth_generate(&st, a),
        Command::Experiment(a) => commands::experiment(&st, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
