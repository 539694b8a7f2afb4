use std::fmt;

use serde::{Deserialize, Serialize};

use super::{group_bin_stats, require_group, BinStats, MetricError, REPORT_SCHEMA_VERSION};
use crate::data::{BinningScheme, GroupedDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub bin_index: usize,
    pub bin_mass: f64,
    /// `None` when the bin is EMPTY.
    pub mean_score: Option<f64>,
    /// Estimate of `E[Y | score in bin, group]`; `None` when EMPTY.
    pub empirical_outcome_rate: Option<f64>,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub report_schema: u32,
    pub group: String,
    pub points: Vec<CalibrationPoint>,
}

impl CalibrationCurve {
    pub fn labeled_mass(&self) -> f64 {
        self.points.iter().map(|p| p.bin_mass).sum()
    }
}

pub fn calibration_curve_from_stats(group: &str, stats: &[BinStats]) -> Result<CalibrationCurve, MetricError> {
    if stats.iter().all(BinStats::is_empty) {
        return Err(MetricError::NoData {
            group: group.to_string(),
        });
    }
    let points = stats
        .iter()
        .enumerate()
        .map(|(bin_index, s)| CalibrationPoint {
            bin_index,
            bin_mass: s.count.max(0.0),
            mean_score: s.mean_score(),
            empirical_outcome_rate: s.rate(),
            empty: s.is_empty(),
        })
        .collect();
    Ok(CalibrationCurve {
        report_schema: REPORT_SCHEMA_VERSION,
        group: group.to_string(),
        points,
    })
}

/// Binned estimate of `E[Y | score, group]` over labeled examples.
pub fn calibration_curve(gd: &GroupedDataset, b: &BinningScheme, group: &str) -> Result<CalibrationCurve, MetricError> {
    let g = require_group(gd, group)?;
    let stats = group_bin_stats(gd, b);
    calibration_curve_from_stats(group, &stats[g])
}

impl fmt::Display for CalibrationCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "calibration curve: group {}", self.group)?;
        writeln!(f, "{:>4}  {:>10}  {:>10}  {:>10}", "bin", "mass", "score", "outcome")?;
        for p in &self.points {
            match (p.mean_score, p.empirical_outcome_rate) {
                (Some(s), Some(r)) => writeln!(f, "{:>4}  {:>10.1}  {:>10.4}  {:>10.4}", p.bin_index, p.bin_mass, s, r)?,
                _ => writeln!(f, "{:>4}  {:>10.1}  {:>10}  {:>10}", p.bin_index, p.bin_mass, "EMPTY", "EMPTY")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{join_groups, BinKind, Dataset, GroupAssignment, ScoredExample};

    fn grouped(rows: &[(f64, Option<bool>)]) -> GroupedDataset {
        let examples = rows
            .iter()
            .enumerate()
            .map(|(i, &(s, y))| ScoredExample::new(format!("m{i}"), s, y))
            .collect();
        let d = Dataset::new(examples, "t").unwrap();
        let g = GroupAssignment::from_pairs("gender", (0..rows.len()).map(|i| (format!("m{i}"), "F")));
        join_groups(&d, &g)
    }

    #[test]
    fn hand_enumerated_rates() {
        // bin 0: outcomes {1, 0}; bin 1: outcomes {1, 1}
        let gd = grouped(&[(0.1, Some(true)), (0.2, Some(false)), (0.6, Some(true)), (0.9, Some(true))]);
        let b = BinningScheme::equal_width(2).unwrap();
        let c = calibration_curve(&gd, &b, "F").unwrap();
        let rates: Vec<_> = c.points.iter().map(|p| p.empirical_outcome_rate.unwrap()).collect();
        assert_eq!(rates, vec![0.5, 1.0]);
        assert_eq!(c.labeled_mass(), 4.0);
    }

    #[test]
    fn all_absent_is_no_data() {
        let gd = grouped(&[(0.1, None), (0.7, None)]);
        let b = BinningScheme::equal_width(2).unwrap();
        assert_eq!(
            calibration_curve(&gd, &b, "F").unwrap_err().code(),
            "NO_DATA"
        );
    }

    #[test]
    fn empty_bins_are_flagged_not_zero_filled() {
        let gd = grouped(&[(0.1, Some(true)), (0.15, Some(false))]);
        let b = BinningScheme::equal_width(4).unwrap();
        let c = calibration_curve(&gd, &b, "F").unwrap();
        assert!(!c.points[0].empty);
        for p in &c.points[1..] {
            assert!(p.empty);
            assert_eq!(p.empirical_outcome_rate, None);
        }
        assert_eq!(BinKind::EqualWidth, b.kind());
    }

    #[test]
    fn unknown_group_rejected() {
        let gd = grouped(&[(0.1, Some(true))]);
        let b = BinningScheme::equal_width(2).unwrap();
        assert_eq!(calibration_curve(&gd, &b, "Z").unwrap_err().code(), "UNKNOWN_GROUP");
    }
}
