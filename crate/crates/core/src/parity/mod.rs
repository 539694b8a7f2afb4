//! Equal-treatment measurement: per-group calibration curves, the
//! predictive-parity gap, quality-of-service checks, group distribution
//! audits and AUROC.

mod auroc;
mod bootstrap;
mod calibration;
mod distribution;
mod gap;
mod qos;

pub use auroc::{auroc, auroc_scores};
pub use bootstrap::{bootstrap_gap, BootstrapSummary, DEFAULT_RESAMPLES};
pub use calibration::{calibration_curve, calibration_curve_from_stats, CalibrationCurve, CalibrationPoint};
pub use distribution::{group_distribution, GroupDistribution};
pub use gap::{gap_from_stats, pairwise_parity_gaps, parity_gap, BinDiff, PairwiseGapReport, ParityGapReport};
pub use qos::{qos_report, GroupQos, QosMetric, QosOptions, QosReport, QosStatus};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinningScheme, GroupedDataset};

/// Version stamped into every serialized report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("group `{group}` has no labeled examples")]
    NoData { group: String },
    #[error("groups `{a}` and `{b}` share no non-empty bins")]
    Incomparable { a: String, b: String },
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("group `{group}` is not in the label set")]
    UnknownGroup { group: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl MetricError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NoData { .. } => "NO_DATA",
            Self::Incomparable { .. } => "INCOMPARABLE",
            Self::Undefined(_) => "UNDEFINED",
            Self::UnknownGroup { .. } => "UNKNOWN_GROUP",
            Self::InvalidArgument(_) => "INVALID_ARGUMENT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportFlag {
    /// Estimated from privacy-noised group labels.
    DpEstimated,
    /// A de-noised count came out negative and was clipped to zero.
    Clipped,
}

/// Attached to reports computed from randomized-response labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpAnnotation {
    pub rho: f64,
    pub mechanism: String,
}

/// Labeled-example aggregates for one (group, bin) cell. Counts are real
/// valued because de-noised estimates are fractional.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: f64,
    pub outcome_sum: f64,
    pub score_sum: f64,
}

impl BinStats {
    pub fn add(&mut self, score: f64, outcome: f64) {
        self.count += 1.0;
        self.outcome_sum += outcome;
        self.score_sum += score;
    }

    pub fn is_empty(&self) -> bool {
        self.count <= 0.0
    }

    pub fn rate(&self) -> Option<f64> {
        (!self.is_empty()).then(|| (self.outcome_sum / self.count).clamp(0.0, 1.0))
    }

    pub fn mean_score(&self) -> Option<f64> {
        (!self.is_empty()).then(|| (self.score_sum / self.count).clamp(0.0, 1.0))
    }
}

/// Per-group, per-bin aggregates over labeled examples, indexed by the
/// grouping's label order. UNKNOWN examples are skipped.
pub fn group_bin_stats(gd: &GroupedDataset, b: &BinningScheme) -> Vec<Vec<BinStats>> {
    let mut stats = vec![vec![BinStats::default(); b.num_bins()]; gd.labels().len()];
    for (i, ex) in gd.examples().iter().enumerate() {
        let (Some(g), Some(y)) = (gd.group_of(i), ex.outcome_value()) else {
            continue;
        };
        stats[g][b.bin_of(ex.score)].add(ex.score, y);
    }
    stats
}

pub(crate) fn require_group(gd: &GroupedDataset, label: &str) -> Result<usize, MetricError> {
    gd.label_index(label).ok_or_else(|| MetricError::UnknownGroup {
        group: label.to_string(),
    })
}
