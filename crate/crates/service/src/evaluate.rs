//! Request evaluation. Everything here is a pure function of the store, a
//! dataset and the request; the HTTP layer only adds auditing.

use std::collections::BTreeMap;
use std::fmt;

use eqtreat_core::data::{join_groups, BinKind, BinningScheme, Dataset, GroupedDataset};
use eqtreat_core::dp::{dp_calibration_curve, dp_group_distribution, dp_parity_gap, DebiasOptions, NoiseChannel, MECHANISM};
use eqtreat_core::parity::{
    calibration_curve, group_distribution, parity_gap, qos_report, CalibrationCurve, DpAnnotation, GroupDistribution,
    ParityGapReport, QosMetric, QosOptions, QosStatus, ReportFlag, REPORT_SCHEMA_VERSION,
};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::store::DemographicStore;
use crate::ServiceError;

pub const SUPPRESSED: &str = "SUPPRESSED";

/// A released aggregate, or the marker that replaced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Value(f64),
    Suppressed,
}

impl Cell {
    /// Releases `value` only when the cell's contributing count reaches the threshold.
    pub fn gate(value: f64, count: f64, threshold: usize) -> Self {
        if count < threshold as f64 {
            Self::Suppressed
        } else {
            Self::Value(value)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Self::Value(v) => Some(v),
            Self::Suppressed => None,
        }
    }

    pub fn is_suppressed(self) -> bool {
        self == Self::Suppressed
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Value(v) => s.serialize_f64(*v),
            Self::Suppressed => s.serialize_str(SUPPRESSED),
        }
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Self::Value(v)),
            Repr::Text(t) if t == SUPPRESSED => Ok(Self::Suppressed),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or {SUPPRESSED}, got `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ParityGap,
    CalibrationCurve,
    QosReport,
    GroupDistribution,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ParityGap => "parity_gap",
            Self::CalibrationCurve => "calibration_curve",
            Self::QosReport => "qos_report",
            Self::GroupDistribution => "group_distribution",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningRequest {
    pub kind: BinKind,
    pub bins: usize,
}

impl Default for BinningRequest {
    fn default() -> Self {
        Self {
            kind: BinKind::EqualMass,
            bins: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpRequest {
    pub enabled: bool,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRequest {
    pub dataset_id: String,
    pub dimension: String,
    pub metric: MetricKind,
    /// Pair for `parity_gap`; every pair when absent.
    #[serde(default)]
    pub groups: Option<(String, String)>,
    #[serde(default)]
    pub binning: BinningRequest,
    #[serde(default)]
    pub dp: DpRequest,
    #[serde(default = "default_qos_minimum")]
    pub qos_minimum: f64,
    /// Bootstrap seed for QoS standard errors.
    #[serde(default)]
    pub seed: u64,
}

fn default_qos_minimum() -> f64 {
    0.5
}

impl EvaluationRequest {
    pub fn new(dataset_id: impl Into<String>, dimension: impl Into<String>, metric: MetricKind) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            dimension: dimension.into(),
            metric,
            groups: None,
            binning: BinningRequest::default(),
            dp: DpRequest::default(),
            qos_minimum: default_qos_minimum(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBin {
    pub bin_index: usize,
    pub counts: (Cell, Cell),
    /// Absent when either group has no labeled examples in the bin.
    pub diff: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAggregate {
    pub group_pair: (String, String),
    /// Omitted when any contributing cell was suppressed.
    pub gap: Option<f64>,
    pub signed_gap: Option<f64>,
    pub under_predicted: Option<String>,
    pub bins: Vec<GapBin>,
    pub flags: Vec<ReportFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bin_index: usize,
    pub bin_mass: Cell,
    pub mean_score: Option<Cell>,
    pub empirical_outcome_rate: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveAggregate {
    pub group: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosAggregate {
    pub group: String,
    /// Absent when the group's value is suppressed.
    pub status: Option<QosStatus>,
    pub value: Option<Cell>,
    pub standard_error: Option<Cell>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricResult {
    ParityGap {
        pairs: Vec<GapAggregate>,
        /// Pairs the library could not compare, with the error code.
        skipped: Vec<(String, String, String)>,
    },
    CalibrationCurve {
        curves: Vec<CurveAggregate>,
    },
    QosReport {
        metric: QosMetric,
        minimum: f64,
        groups: Vec<QosAggregate>,
    },
    GroupDistribution {
        counts: BTreeMap<String, Cell>,
        proportions: BTreeMap<String, Cell>,
        unknown_count: Cell,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResponse {
    pub report_schema: u32,
    pub dataset_id: String,
    pub dimension: String,
    pub metric: MetricKind,
    pub suppression_threshold: usize,
    pub suppressed_cells: usize,
    pub dp: Option<DpAnnotation>,
    pub result: MetricResult,
}

/// Joins the dataset with the store, computes the metric through the core
/// library and strips it down to thresholded aggregates.
pub fn evaluate(store: &DemographicStore, dataset: &Dataset, req: &EvaluationRequest) -> Result<EvaluationResponse, ServiceError> {
    let assignment = store.assignment(&req.dimension)?;
    let gd = join_groups(dataset, assignment);
    let threshold = store.policy().suppression_threshold;
    let channel = channel_for(&gd, req)?;
    let opts = DebiasOptions::default();

    let result = match req.metric {
        MetricKind::ParityGap => {
            let b = binning(&gd, req.binning)?;
            let pairs = match &req.groups {
                Some((a, a2)) => vec![(a.clone(), a2.clone())],
                None => all_pairs(gd.labels()),
            };
            let mut released = Vec::new();
            let mut skipped = Vec::new();
            for (a, a2) in pairs {
                let report = match &channel {
                    Some(ch) => dp_parity_gap(&gd, ch, &b, &a, &a2, &opts).map_err(ServiceError::from),
                    None => parity_gap(&gd, &b, &a, &a2).map_err(ServiceError::from),
                };
                match report {
                    Ok(r) => released.push(gate_gap(&r, threshold)),
                    // the all-pairs sweep records pairs that cannot be compared, as the library does
                    Err(e) if req.groups.is_none() && matches!(e.code(), "NO_DATA" | "INCOMPARABLE") => {
                        skipped.push((a, a2, e.code().to_string()))
                    }
                    Err(e) => return Err(e),
                }
            }
            MetricResult::ParityGap {
                pairs: released,
                skipped,
            }
        }
        MetricKind::CalibrationCurve => {
            let b = binning(&gd, req.binning)?;
            let curves = gd
                .labels()
                .iter()
                .map(|g| {
                    let c = match &channel {
                        Some(ch) => dp_calibration_curve(&gd, ch, &b, g, &opts)?,
                        None => calibration_curve(&gd, &b, g)?,
                    };
                    Ok(gate_curve(&c, threshold))
                })
                .collect::<Result<Vec<_>, ServiceError>>()?;
            MetricResult::CalibrationCurve { curves }
        }
        MetricKind::QosReport => {
            if channel.is_some() {
                return Err(ServiceError::UnsupportedDp(req.metric));
            }
            let opts = QosOptions {
                seed: req.seed,
                ..QosOptions::default()
            };
            let report = qos_report(&gd, QosMetric::Auroc, req.qos_minimum, opts)?;
            let groups = report
                .groups
                .iter()
                .map(|g| {
                    let n = gd.labeled_count(&g.group) as f64;
                    let released = n >= threshold as f64;
                    QosAggregate {
                        group: g.group.clone(),
                        status: released.then_some(g.status),
                        value: g.value.map(|v| Cell::gate(v, n, threshold)),
                        standard_error: g.standard_error.map(|v| Cell::gate(v, n, threshold)),
                        low_confidence: released && g.low_confidence,
                    }
                })
                .collect();
            MetricResult::QosReport {
                metric: report.metric,
                minimum: report.minimum,
                groups,
            }
        }
        MetricKind::GroupDistribution => {
            let d = match &channel {
                Some(ch) => dp_group_distribution(&gd, ch, &opts)?,
                None => group_distribution(&gd, None),
            };
            gate_distribution(&d, threshold)
        }
    };

    Ok(EvaluationResponse {
        report_schema: REPORT_SCHEMA_VERSION,
        dataset_id: req.dataset_id.clone(),
        dimension: req.dimension.clone(),
        metric: req.metric,
        suppression_threshold: threshold,
        suppressed_cells: count_suppressed(&result),
        dp: channel.map(|ch| DpAnnotation {
            rho: ch.rho(),
            mechanism: MECHANISM.to_string(),
        }),
        result,
    })
}

fn channel_for(gd: &GroupedDataset, req: &EvaluationRequest) -> Result<Option<NoiseChannel>, ServiceError> {
    match (req.dp.enabled, gd.noise_rho()) {
        (false, Some(_)) => Err(ServiceError::DpRequired(req.dimension.clone())),
        (false, None) => Ok(None),
        (true, _) => Ok(Some(NoiseChannel::new(gd.labels().to_vec(), req.dp.rho)?)),
    }
}

fn binning(gd: &GroupedDataset, req: BinningRequest) -> Result<BinningScheme, ServiceError> {
    Ok(BinningScheme::build(req.kind, req.bins, &gd.dataset().scores())?)
}

fn all_pairs(labels: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            out.push((labels[i].clone(), labels[j].clone()));
        }
    }
    out
}

pub fn gate_gap(r: &ParityGapReport, threshold: usize) -> GapAggregate {
    let mut contributing_suppressed = false;
    let bins = r
        .per_bin_diffs
        .iter()
        .map(|d| {
            let counts = (
                Cell::gate(d.mass.0, d.mass.0, threshold),
                Cell::gate(d.mass.1, d.mass.1, threshold),
            );
            let hidden = counts.0.is_suppressed() || counts.1.is_suppressed();
            if d.diff.is_some() && hidden {
                contributing_suppressed = true;
            }
            GapBin {
                bin_index: d.bin_index,
                counts,
                diff: d.diff.map(|v| if hidden { Cell::Suppressed } else { Cell::Value(v) }),
            }
        })
        .collect();
    let release = |v| (!contributing_suppressed).then_some(v);
    GapAggregate {
        group_pair: r.group_pair.clone(),
        gap: release(r.gap),
        signed_gap: release(r.signed_gap),
        under_predicted: r.under_predicted.clone().filter(|_| !contributing_suppressed),
        bins,
        flags: r.flags.clone(),
    }
}

pub fn gate_curve(c: &CalibrationCurve, threshold: usize) -> CurveAggregate {
    CurveAggregate {
        group: c.group.clone(),
        points: c
            .points
            .iter()
            .map(|p| CurvePoint {
                bin_index: p.bin_index,
                bin_mass: Cell::gate(p.bin_mass, p.bin_mass, threshold),
                mean_score: p.mean_score.map(|v| Cell::gate(v, p.bin_mass, threshold)),
                empirical_outcome_rate: p.empirical_outcome_rate.map(|v| Cell::gate(v, p.bin_mass, threshold)),
            })
            .collect(),
    }
}

pub fn gate_distribution(d: &GroupDistribution, threshold: usize) -> MetricResult {
    MetricResult::GroupDistribution {
        counts: d
            .counts
            .iter()
            .map(|(l, &c)| (l.clone(), Cell::gate(c, c, threshold)))
            .collect(),
        proportions: d
            .proportions
            .iter()
            .map(|(l, &p)| (l.clone(), Cell::gate(p, d.counts[l], threshold)))
            .collect(),
        unknown_count: Cell::gate(d.unknown_count, d.unknown_count, threshold),
    }
}

fn count_suppressed(r: &MetricResult) -> usize {
    let n = |cells: &mut dyn Iterator<Item = Cell>| cells.filter(|c| c.is_suppressed()).count();
    match r {
        MetricResult::ParityGap { pairs, .. } => pairs
            .iter()
            .flat_map(|p| &p.bins)
            .map(|b| n(&mut [b.counts.0, b.counts.1].into_iter()))
            .sum(),
        MetricResult::CalibrationCurve { curves } => curves
            .iter()
            .flat_map(|c| &c.points)
            .filter(|p| p.bin_mass.is_suppressed())
            .count(),
        MetricResult::QosReport { groups, .. } => groups.iter().filter(|g| g.status.is_none()).count(),
        MetricResult::GroupDistribution {
            counts, unknown_count, ..
        } => n(&mut counts.values().copied().chain([*unknown_count])),
    }
}
