//! Process-level error classification.
//!
//! Every failure is either *invalid input* (bad flags, malformed config or
//! data files, shape mismatches — exit code 1) or a *runtime failure*
//! (diverged training, a failed gradient check, output files that cannot be
//! written — exit code 2). Exit code 0 means success.

use std::fmt;

use hanet_core::checkpoint::CheckpointError;
use hanet_core::data::DataError;
use hanet_core::metrics::MetricError;
use hanet_core::model::ModelError;
use hanet_core::sweep::SweepError;
use hanet_core::train::TrainError;

#[derive(Debug)]
pub enum CliError {
    /// The request itself is unusable: exit code 1.
    Invalid(String),
    /// The request was valid but the work failed: exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn invalid(msg: impl fmt::Display) -> Self {
        CliError::Invalid(msg.to_string())
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::invalid(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::invalid(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::invalid(e)
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::invalid(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig { .. }
            | TrainError::Model(_)
            | TrainError::EmptyDataset
            | TrainError::LabelRange { .. }
            | TrainError::RowMismatch { .. }
            | TrainError::NoRealRows => CliError::invalid(e),
            TrainError::Tensor(_)
            | TrainError::NanGrad { .. }
            | TrainError::MisalignedGrads { .. }
            | TrainError::Diverged { .. } => CliError::runtime(e),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::InvalidSpec { .. } => CliError::invalid(e),
            SweepError::Data(inner) => inner.into(),
            SweepError::Model(inner) => inner.into(),
            SweepError::Train(inner) => inner.into(),
        }
    }
}
