use thiserror::Error;

use crate::{analysis, corpus, model, ras, subword, synthlab, trainer};

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Subword(#[from] subword::SubwordError),
    #[error(transparent)]
    Ras(#[from] ras::RasError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Synth(#[from] synthlab::SynthError),
}

impl Error {
    /// True when the failure is numerical (non-finite loss or update) rather
    /// than a problem with the input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Model(e) => e.is_numerical(),
            Error::Train(e) => e.is_numerical(),
            Error::Synth(synthlab::SynthError::Train(e)) => e.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
