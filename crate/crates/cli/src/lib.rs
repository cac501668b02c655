//! Configuration, pipeline orchestration and artifact writing behind the
//! `ivcf` binary.

pub mod config;
pub mod output;
pub mod pipeline;

use ivcf_core::{Error, ErrorKind, IvForestModel, ObservationFrame};

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunReport};

/// An error from one pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn stage(stage: impl Into<String>) -> impl FnOnce(Error) -> Self {
        let stage = stage.into();
        move |source| CliError::Stage { stage, source }
    }

    pub fn core(&self) -> &Error {
        match self {
            CliError::Stage { source, .. } | CliError::Core(source) => source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.core().kind() {
            ErrorKind::Validation => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Which frame a fitted model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainedOn {
    /// The frame itself: an instrumental (LATE) forest.
    Late,
    /// Its intent-to-treat version.
    Itt,
}

/// Matches a model to the frame it was fitted on, returning the frame the
/// model actually saw.
pub fn training_frame(model: &IvForestModel, frame: &ObservationFrame) -> ivcf_core::Result<(ObservationFrame, TrainedOn)> {
    if frame.has_treatment() && model.forest.check_frame(frame).is_ok() {
        return Ok((frame.clone(), TrainedOn::Late));
    }
    let itt = frame.as_intent_to_treat();
    match model.forest.check_frame(&itt) {
        Ok(()) => Ok((itt, TrainedOn::Itt)),
        Err(_) => Err(Error::ModelMismatch(
            "incompatible model/data fingerprint: the model was not fitted on this data".into(),
        )),
    }
}
