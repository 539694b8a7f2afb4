//! Bias mitigation: per-group post-processing calibration, the
//! demographic-blind strategy harness, and the gated workflow that decides
//! when group labels may be used.

mod bmt;
mod harness;
mod isotonic;
mod model;
mod pipeline;

pub use bmt::{apply_calibrator, fit_bmt, BmtOptions, GroupCalibrator, DEFAULT_MIN_FIT_COUNT};
pub use harness::{run_blind_harness, HarnessConfig, HarnessReport, MitigationExperiment, Strategy, DEMOGRAPHIC_NOTE};
pub use isotonic::IsotonicMap;
pub use model::{LogisticRegression, DEFAULT_L2};
pub use pipeline::{
    attach_consequence_report, justifiability_pipeline, FeatureCheck, Intervention, JustifiabilityReport,
    PipelineConfig, PipelineStatus, ShipGate, StepLog,
};

use thiserror::Error;

use crate::cohort::CohortError;
use crate::data::DataError;
use crate::parity::MetricError;

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("refused: {0}")]
    GuardrailEquityIntervention(String),
    #[error("calibrator is for dimension `{expected}`, data is grouped by `{found}`")]
    DimensionMismatch { expected: String, found: String },
    #[error("no data: {0}")]
    NoData(String),
    #[error("subset search over {requested} features exceeds the budget of {budget}")]
    FeatureBudgetExceeded { requested: usize, budget: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model fit failed: {0}")]
    ModelFit(String),
    #[error("step log {path}: {source}")]
    StepLog {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

impl MitigationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::PolicyViolation(_) => "POLICY_VIOLATION",
            Self::GuardrailEquityIntervention(_) => "GUARDRAIL_EQUITY_INTERVENTION",
            Self::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Self::NoData(_) => "NO_DATA",
            Self::FeatureBudgetExceeded { .. } => "FEATURE_BUDGET_EXCEEDED",
            Self::InvalidArgument(_) => "INVALID_ARGUMENT",
            Self::ModelFit(_) => "MODEL_FIT",
            Self::StepLog { .. } => "IO",
            Self::Metric(e) => e.code(),
            Self::Data(e) => e.code(),
            Self::Cohort(e) => e.code(),
        }
    }
}
