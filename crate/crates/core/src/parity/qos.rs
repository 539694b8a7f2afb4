use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{resample_rng, summarize};
use super::{auroc_scores, MetricError, DEFAULT_RESAMPLES, REPORT_SCHEMA_VERSION};
use crate::data::GroupedDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QosMetric {
    Auroc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QosStatus {
    Pass,
    Fail,
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QosOptions {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for QosOptions {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupQos {
    pub group: String,
    pub status: QosStatus,
    pub value: Option<f64>,
    pub standard_error: Option<f64>,
    /// The metric sits within one bootstrap standard error of the minimum.
    pub low_confidence: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-group metric against an absolute minimum standard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosReport {
    pub report_schema: u32,
    pub dimension: String,
    pub metric: QosMetric,
    pub minimum: f64,
    pub groups: Vec<GroupQos>,
}

impl QosReport {
    pub fn group(&self, label: &str) -> Option<&GroupQos> {
        self.groups.iter().find(|g| g.group == label)
    }
}

fn bootstrap_auroc_se(scores: &[f64], labels: &[bool], opts: &QosOptions) -> Option<f64> {
    let mut values: Vec<f64> = (0..opts.resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = resample_rng(opts.seed, r);
            let n = scores.len();
            let (mut s, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let k = rng.random_range(0..n);
                s.push(scores[k]);
                y.push(labels[k]);
            }
            auroc_scores(&s, &y).ok()
        })
        .collect();
    summarize(&mut values, opts.resamples, opts.seed).map(|b| b.standard_error)
}

/// Groups whose metric cannot be computed are reported as NO_DATA without
/// affecting the others.
pub fn qos_report(gd: &GroupedDataset, metric: QosMetric, minimum: f64, opts: QosOptions) -> Result<QosReport, MetricError> {
    if !(0.0..=1.0).contains(&minimum) {
        return Err(MetricError::InvalidArgument(format!("minimum {minimum} outside [0, 1]")));
    }
    let groups = gd
        .labels()
        .iter()
        .map(|label| {
            let (scores, labels): (Vec<f64>, Vec<bool>) = gd
                .group_members(label)
                .iter()
                .filter_map(|e| e.outcome.map(|y| (e.score, y)))
                .unzip();
            let value = match metric {
                QosMetric::Auroc => auroc_scores(&scores, &labels),
            };
            match value {
                Ok(v) => {
                    let se = bootstrap_auroc_se(&scores, &labels, &opts);
                    GroupQos {
                        group: label.clone(),
                        status: if v >= minimum { QosStatus::Pass } else { QosStatus::Fail },
                        value: Some(v),
                        standard_error: se,
                        low_confidence: se.is_some_and(|se| (v - minimum).abs() < se),
                        error: None,
                    }
                }
                Err(e) => GroupQos {
                    group: label.clone(),
                    status: QosStatus::NoData,
                    value: None,
                    standard_error: None,
                    low_confidence: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(QosReport {
        report_schema: REPORT_SCHEMA_VERSION,
        dimension: gd.dimension().to_string(),
        metric,
        minimum,
        groups,
    })
}

impl fmt::Display for QosReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "quality of service [{}]: {:?} >= {}", self.dimension, self.metric, self.minimum)?;
        for g in &self.groups {
            let value = g.value.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let se = g.standard_error.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let flag = if g.low_confidence { " LOW_CONFIDENCE" } else { "" };
            writeln!(f, "  {:<12} {:>8}  se {:>7}  {:?}{flag}", g.group, value, se, g.status)?;
        }
        Ok(())
    }
}
