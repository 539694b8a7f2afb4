use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{IsotonicMap, MitigationError};
use crate::data::GroupedDataset;

/// Groups with fewer labeled examples use the pooled map.
pub const DEFAULT_MIN_FIT_COUNT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BmtOptions {
    pub min_fit_count: usize,
}

impl Default for BmtOptions {
    fn default() -> Self {
        Self {
            min_fit_count: DEFAULT_MIN_FIT_COUNT,
        }
    }
}

/// Per-group monotone score maps targeting `E[Y | calibrated = s, group] = s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibrator {
    pub dimension: String,
    pub maps: BTreeMap<String, IsotonicMap>,
    /// Group-agnostic map used for groups flagged in `fallback`.
    pub pooled: IsotonicMap,
    /// Groups too small to fit on their own.
    pub fallback: BTreeSet<String>,
}

impl GroupCalibrator {
    pub fn identity(dimension: &str, labels: &[String]) -> Self {
        Self {
            dimension: dimension.to_string(),
            maps: labels.iter().map(|l| (l.clone(), IsotonicMap::identity())).collect(),
            pooled: IsotonicMap::identity(),
            fallback: BTreeSet::new(),
        }
    }

    /// Calibrated score for one example. UNKNOWN members keep their score.
    pub fn calibrate(&self, score: f64, label: Option<&str>) -> f64 {
        match label {
            Some(l) if self.fallback.contains(l) => self.pooled.apply(score),
            Some(l) => self.maps.get(l).map_or(score, |m| m.apply(score)),
            None => score,
        }
    }
}

fn fit_xy<'a>(rows: impl Iterator<Item = &'a crate::data::ScoredExample>) -> (Vec<f64>, Vec<f64>) {
    rows.filter_map(|e| e.outcome_value().map(|y| (e.score, y))).unzip()
}

/// Fits one isotonic map per group on the labeled examples of `train`.
pub fn fit_bmt(train: &GroupedDataset, opts: &BmtOptions) -> Result<GroupCalibrator, MitigationError> {
    if let Some(rho) = train.noise_rho() {
        return Err(MitigationError::PolicyViolation(format!(
            "calibration needs true group labels; these carry randomized-response noise (rho = {rho})"
        )));
    }
    let (xs, ys) = fit_xy(train.examples().iter());
    if xs.is_empty() {
        return Err(MitigationError::NoData("no labeled examples to calibrate on".into()));
    }
    let pooled = IsotonicMap::fit(&xs, &ys)?;
    let mut maps = BTreeMap::new();
    let mut fallback = BTreeSet::new();
    for label in train.labels() {
        let (xs, ys) = fit_xy(train.group_members(label).into_iter());
        if xs.len() < opts.min_fit_count.max(1) {
            fallback.insert(label.clone());
            maps.insert(label.clone(), pooled.clone());
        } else {
            maps.insert(label.clone(), IsotonicMap::fit(&xs, &ys)?);
        }
    }
    Ok(GroupCalibrator {
        dimension: train.dimension().to_string(),
        maps,
        pooled,
        fallback,
    })
}

/// Replaces each score by its group's calibrated score. Outcomes and group
/// labels are untouched.
pub fn apply_calibrator(c: &GroupCalibrator, gd: &GroupedDataset) -> Result<GroupedDataset, MitigationError> {
    if c.dimension != gd.dimension() {
        return Err(MitigationError::DimensionMismatch {
            expected: c.dimension.clone(),
            found: gd.dimension().to_string(),
        });
    }
    let scores: Vec<f64> = gd.iter().map(|(e, label)| c.calibrate(e.score, label)).collect();
    Ok(gd.with_scores(&scores)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{join_groups, Dataset, GroupAssignment, ScoredExample};

    fn toy() -> GroupedDataset {
        let rows = [
            ("f1", 0.1, true, "F"),
            ("f2", 0.2, false, "F"),
            ("f3", 0.3, true, "F"),
            ("m1", 0.4, false, "M"),
            ("m2", 0.5, false, "M"),
            ("m3", 0.6, true, "M"),
            ("u1", 0.7, true, ""),
        ];
        let examples = rows.iter().map(|r| ScoredExample::new(r.0, r.1, Some(r.2))).collect();
        let pairs = rows.iter().filter(|r| !r.3.is_empty()).map(|r| (r.0, r.3));
        join_groups(&Dataset::new(examples, "t").unwrap(), &GroupAssignment::from_pairs("gender", pairs))
    }

    #[test]
    fn per_group_knots_and_unknown_identity() {
        let gd = toy();
        let c = fit_bmt(&gd, &BmtOptions { min_fit_count: 3 }).unwrap();
        assert!(c.fallback.is_empty());
        assert_eq!(c.maps["F"].knots(), &[(0.15000000000000002, 0.5), (0.3, 1.0)]);
        let out = apply_calibrator(&c, &gd).unwrap();
        assert_eq!(out.examples()[6].score, 0.7);
        assert_eq!(out.examples()[0].outcome, Some(true));
    }

    #[test]
    fn small_groups_fall_back_to_pooled() {
        let c = fit_bmt(&toy(), &BmtOptions::default()).unwrap();
        assert_eq!(c.fallback.len(), 2);
        assert_eq!(c.calibrate(0.35, Some("F")), c.pooled.apply(0.35));
    }

    #[test]
    fn noised_labels_rejected() {
        let gd = toy();
        let ch = crate::dp::NoiseChannel::new(["F", "M"], 0.1).unwrap();
        let noised = crate::dp::randomize(
            &GroupAssignment::from_pairs("gender", [("f1", "F"), ("m1", "M")]),
            &ch,
            1,
        )
        .unwrap();
        let err = fit_bmt(&gd.regroup(&noised), &BmtOptions::default()).unwrap_err();
        assert_eq!(err.code(), "POLICY_VIOLATION");
    }

    #[test]
    fn cross_group_reranking() {
        // F outcomes run hotter than their scores, M colder: a lower F score
        // ends above a higher M score after calibration
        let mut examples = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..100 {
            let f = format!("f{i}");
            examples.push(ScoredExample::new(f.clone(), 0.3, Some(i < 60)));
            pairs.push((f, "F"));
            let m = format!("m{i}");
            examples.push(ScoredExample::new(m.clone(), 0.4, Some(i < 20)));
            pairs.push((m, "M"));
        }
        let gd = join_groups(&Dataset::new(examples, "t").unwrap(), &GroupAssignment::from_pairs("gender", pairs));
        let c = fit_bmt(&gd, &BmtOptions::default()).unwrap();
        assert!(c.calibrate(0.3, Some("F")) > c.calibrate(0.4, Some("M")));
    }

    #[test]
    fn dimension_mismatch() {
        let gd = toy();
        let c = GroupCalibrator::identity("age", gd.labels());
        assert_eq!(apply_calibrator(&c, &gd).unwrap_err().code(), "DIMENSION_MISMATCH");
    }
}
