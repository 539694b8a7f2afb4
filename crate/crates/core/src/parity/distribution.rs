use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::REPORT_SCHEMA_VERSION;
use crate::data::{GroupedDataset, ScoredExample};

/// Share of each known label, normalized over known labels only. UNKNOWN
/// examples are reported as a raw count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub report_schema: u32,
    pub dimension: String,
    pub counts: BTreeMap<String, f64>,
    pub proportions: BTreeMap<String, f64>,
    pub unknown_count: f64,
    pub total: f64,
}

impl GroupDistribution {
    /// Builds the report from (possibly fractional) per-label counts.
    pub fn from_counts(dimension: &str, counts: BTreeMap<String, f64>, unknown_count: f64) -> Self {
        let known: f64 = counts.values().sum();
        let proportions = counts
            .iter()
            .map(|(l, &c)| (l.clone(), if known > 0.0 { c / known } else { 0.0 }))
            .collect();
        Self {
            report_schema: REPORT_SCHEMA_VERSION,
            dimension: dimension.to_string(),
            total: known + unknown_count,
            counts,
            proportions,
            unknown_count,
        }
    }
}

/// Distribution audit. Every example passing `role_filter` counts, labeled
/// or not.
pub fn group_distribution(
    gd: &GroupedDataset,
    role_filter: Option<&dyn Fn(&ScoredExample) -> bool>,
) -> GroupDistribution {
    let mut counts: BTreeMap<String, f64> = gd.labels().iter().map(|l| (l.clone(), 0.0)).collect();
    let mut unknown = 0.0;
    for (ex, label) in gd.iter() {
        if role_filter.is_some_and(|keep| !keep(ex)) {
            continue;
        }
        match label {
            Some(l) => *counts.get_mut(l).expect("label in set") += 1.0,
            None => unknown += 1.0,
        }
    }
    GroupDistribution::from_counts(gd.dimension(), counts, unknown)
}

impl fmt::Display for GroupDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group distribution [{}]", self.dimension)?;
        for (label, p) in &self.proportions {
            writeln!(f, "  {label:<12} {:>10.0}  {:>7.2}%", self.counts[label], 100.0 * p)?;
        }
        writeln!(f, "  {:<12} {:>10.0}  (excluded)", "UNKNOWN", self.unknown_count)
    }
}
