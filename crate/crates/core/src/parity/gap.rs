use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    group_bin_stats, require_group, BinStats, BootstrapSummary, DpAnnotation, MetricError, ReportFlag,
    REPORT_SCHEMA_VERSION,
};
use crate::data::{BinningScheme, GroupedDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDiff {
    pub bin_index: usize,
    /// Outcome-rate difference first − second; `None` unless both groups
    /// have labeled mass in the bin.
    pub diff: Option<f64>,
    pub weight: f64,
    pub mass: (f64, f64),
}

/// Predictive-parity gap between two groups of one dimension.
///
/// `gap = Σ w_b |r_a(b) − r_b(b)|` over bins where both groups have labeled
/// mass, with `w_b` proportional to the pooled mass of the bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityGapReport {
    pub report_schema: u32,
    pub dimension: String,
    pub group_pair: (String, String),
    pub gap: f64,
    /// `Σ w_b (r_a(b) − r_b(b))`; positive when the first group sees higher
    /// outcomes at the same score.
    pub signed_gap: f64,
    /// Mass-weighted `rate − mean score` per group over the shared bins.
    pub net_excess: (f64, f64),
    /// Group whose outcomes exceed its scores on net, i.e. the group the
    /// model under-predicts. `None` when both are equal.
    pub under_predicted: Option<String>,
    pub per_bin_diffs: Vec<BinDiff>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<ReportFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSummary>,
}

/// Gap from per-bin aggregates; shared by the plain and de-noised paths.
pub fn gap_from_stats(
    dimension: &str,
    pair: (&str, &str),
    first: &[BinStats],
    second: &[BinStats],
) -> Result<ParityGapReport, MetricError> {
    for (label, stats) in [(pair.0, first), (pair.1, second)] {
        if stats.iter().all(BinStats::is_empty) {
            return Err(MetricError::NoData { group: label.to_string() });
        }
    }
    let shared_mass: f64 = first
        .iter()
        .zip(second)
        .filter(|(a, b)| !a.is_empty() && !b.is_empty())
        .map(|(a, b)| a.count + b.count)
        .sum();
    if shared_mass <= 0.0 {
        return Err(MetricError::Incomparable {
            a: pair.0.to_string(),
            b: pair.1.to_string(),
        });
    }
    let mut gap = 0.0;
    let mut signed_gap = 0.0;
    let mut excess = (0.0, 0.0);
    let mut per_bin_diffs = Vec::with_capacity(first.len());
    for (bin_index, (a, b)) in first.iter().zip(second).enumerate() {
        let shared = !a.is_empty() && !b.is_empty();
        let weight = if shared { (a.count + b.count) / shared_mass } else { 0.0 };
        let diff = match (shared, a.rate(), b.rate()) {
            (true, Some(ra), Some(rb)) => {
                let d = ra - rb;
                gap += weight * d.abs();
                signed_gap += weight * d;
                excess.0 += weight * (ra - a.mean_score().unwrap_or(0.0));
                excess.1 += weight * (rb - b.mean_score().unwrap_or(0.0));
                Some(d)
            }
            _ => None,
        };
        per_bin_diffs.push(BinDiff {
            bin_index,
            diff,
            weight,
            mass: (a.count.max(0.0), b.count.max(0.0)),
        });
    }
    let under_predicted = if excess.0 > excess.1 {
        Some(pair.0.to_string())
    } else if excess.1 > excess.0 {
        Some(pair.1.to_string())
    } else {
        None
    };
    Ok(ParityGapReport {
        report_schema: REPORT_SCHEMA_VERSION,
        dimension: dimension.to_string(),
        group_pair: (pair.0.to_string(), pair.1.to_string()),
        gap,
        signed_gap,
        net_excess: excess,
        under_predicted,
        per_bin_diffs,
        flags: Vec::new(),
        dp: None,
        bootstrap: None,
    })
}

pub fn parity_gap(gd: &GroupedDataset, b: &BinningScheme, a: &str, a2: &str) -> Result<ParityGapReport, MetricError> {
    let ia = require_group(gd, a)?;
    let ib = require_group(gd, a2)?;
    let stats = group_bin_stats(gd, b);
    gap_from_stats(gd.dimension(), (a, a2), &stats[ia], &stats[ib])
}

/// All pairwise gaps of a multi-group dimension plus the largest pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseGapReport {
    pub report_schema: u32,
    pub dimension: String,
    pub pairs: Vec<ParityGapReport>,
    /// Pairs that could not be compared, with the error code.
    pub skipped: Vec<(String, String, String)>,
    pub max_pair: Option<(String, String)>,
    pub max_gap: Option<f64>,
}

pub fn pairwise_parity_gaps(gd: &GroupedDataset, b: &BinningScheme) -> PairwiseGapReport {
    let stats = group_bin_stats(gd, b);
    let labels = gd.labels();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            match gap_from_stats(gd.dimension(), (&labels[i], &labels[j]), &stats[i], &stats[j]) {
                Ok(r) => pairs.push(r),
                Err(e) => skipped.push((labels[i].clone(), labels[j].clone(), e.code().to_string())),
            }
        }
    }
    let max = pairs
        .iter()
        .max_by(|x, y| x.gap.total_cmp(&y.gap))
        .map(|r| (r.group_pair.clone(), r.gap));
    PairwiseGapReport {
        report_schema: REPORT_SCHEMA_VERSION,
        dimension: gd.dimension().to_string(),
        pairs,
        skipped,
        max_pair: max.as_ref().map(|(p, _)| p.clone()),
        max_gap: max.map(|(_, g)| g),
    }
}

impl fmt::Display for ParityGapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = &self.group_pair;
        writeln!(f, "predictive parity gap [{}]: {a} vs {b}", self.dimension)?;
        writeln!(f, "  gap            {:.4} ({:.2}%)", self.gap, 100.0 * self.gap)?;
        writeln!(f, "  signed gap     {:+.4}", self.signed_gap)?;
        writeln!(
            f,
            "  under-predicted {}",
            self.under_predicted.as_deref().unwrap_or("none")
        )?;
        if let Some(dp) = &self.dp {
            writeln!(f, "  dp estimate    {} rho={}", dp.mechanism, dp.rho)?;
        }
        if let Some(bs) = &self.bootstrap {
            writeln!(
                f,
                "  bootstrap      se={:.4} 95% CI [{:.4}, {:.4}] ({} resamples, seed {})",
                bs.standard_error, bs.ci_low, bs.ci_high, bs.resamples, bs.seed
            )?;
        }
        writeln!(f, "  {:>4}  {:>10}  {:>10}  {:>8}  {:>9}", "bin", "mass_a", "mass_b", "weight", "diff")?;
        for d in &self.per_bin_diffs {
            let diff = d.diff.map_or_else(|| "EMPTY".to_string(), |v| format!("{v:+.4}"));
            writeln!(
                f,
                "  {:>4}  {:>10.1}  {:>10.1}  {:>8.4}  {:>9}",
                d.bin_index, d.mass.0, d.mass.1, d.weight, diff
            )?;
        }
        Ok(())
    }
}
