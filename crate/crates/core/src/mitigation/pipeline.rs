use std::collections::BTreeSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{run_blind_harness, GroupCalibrator, HarnessConfig, HarnessReport, MitigationError, Strategy};
use crate::cohort::{build_error_tree, CohortOptions, CohortTree};
use crate::consequence::{ConsequenceVerdict, Verdict};
use crate::data::GroupedDataset;
use crate::parity::{group_distribution, GroupDistribution, REPORT_SCHEMA_VERSION};

pub const DEFAULT_ADEQUACY_THRESHOLD: f64 = 0.25;
pub const DEFAULT_TEST_FRACTION: f64 = 0.3;

/// Requests to move outcomes toward a target for some group. The pipeline
/// refuses all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    ScoreBoost { group: String, amount: f64 },
    RepresentationQuota { group: String, share: f64 },
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ScoreBoost { group, amount } => write!(f, "score boost of {amount:+} for group `{group}`"),
            Self::RepresentationQuota { group, share } => {
                write!(f, "representation quota of {share} for group `{group}`")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Features that must not reach the model, whatever their predictive value.
    pub unjustifiable_features: Vec<String>,
    /// Cohort tree candidates; empty means every side feature plus the
    /// grouping dimension.
    pub cohort_features: Vec<String>,
    pub cohort: CohortOptions,
    pub harness: HarnessConfig,
    /// Minimum relative gap reduction for blind mitigation to count as adequate.
    pub adequacy_threshold: f64,
    pub test_fraction: f64,
    pub interventions: Vec<Intervention>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            unjustifiable_features: Vec::new(),
            cohort_features: Vec::new(),
            cohort: CohortOptions::default(),
            harness: HarnessConfig::default(),
            adequacy_threshold: DEFAULT_ADEQUACY_THRESHOLD,
            test_fraction: DEFAULT_TEST_FRACTION,
            interventions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineStatus {
    BlindSufficient,
    DemographicJustified,
    DataUnavailable,
    Ship,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShipGate {
    PendingConsequenceReport,
    Blocked { reason: String },
    Ship,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCheck {
    pub feature: String,
    pub unjustifiable: bool,
    pub used_by_harness: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub distribution: GroupDistribution,
    pub feature_checklist: Vec<FeatureCheck>,
    pub cohort_tree: Option<CohortTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JustifiabilityReport {
    pub report_schema: u32,
    pub dimension: String,
    pub status: PipelineStatus,
    /// Status before a consequence verdict was attached.
    pub mitigation_basis: PipelineStatus,
    pub ship: ShipGate,
    pub root_cause: RootCause,
    pub blind: Option<HarnessReport>,
    pub adequacy_threshold: f64,
    pub best_blind_relative_reduction: Option<f64>,
    pub best_blind_strategy: Option<Strategy>,
    pub demographic: Option<HarnessReport>,
    pub calibrator: Option<GroupCalibrator>,
    pub consequence: Option<ConsequenceVerdict>,
    pub guardrail: String,
    /// Steps restored from the step log rather than recomputed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resumed_steps: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogEntry {
    fingerprint: String,
    step: String,
    payload: serde_json::Value,
}

/// Append-only JSONL record of finished steps. A rerun with the same input
/// and config picks up the recorded results; any other fingerprint starts over.
#[derive(Debug)]
pub struct StepLog {
    path: PathBuf,
    fingerprint: String,
    done: Vec<LogEntry>,
}

impl StepLog {
    pub fn open(path: &Path, fingerprint: String) -> Result<Self, MitigationError> {
        let io = |source| MitigationError::StepLog {
            path: path.display().to_string(),
            source,
        };
        let mut done = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(path).map_err(io)?).lines() {
                let line = line.map_err(io)?;
                if let Ok(entry) = serde_json::from_str::<LogEntry>(&line) {
                    if entry.fingerprint == fingerprint {
                        done.push(entry);
                    }
                }
            }
            if done.is_empty() {
                File::create(path).map_err(io)?;
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            fingerprint,
            done,
        })
    }

    fn restore<T: DeserializeOwned>(&self, step: &str) -> Option<T> {
        self.done
            .iter()
            .find(|e| e.step == step)
            .and_then(|e| serde_json::from_value(e.payload.clone()).ok())
    }

    fn record<T: Serialize>(&mut self, step: &str, payload: &T) -> Result<(), MitigationError> {
        let io = |source| MitigationError::StepLog {
            path: self.path.display().to_string(),
            source,
        };
        let entry = LogEntry {
            fingerprint: self.fingerprint.clone(),
            step: step.to_string(),
            payload: serde_json::to_value(payload).expect("report types serialize"),
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serializes")).map_err(io)?;
        self.done.push(entry);
        Ok(())
    }
}

fn fingerprint(gd: &GroupedDataset, cfg: &PipelineConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(gd.dataset().to_jsonl());
    h.update(gd.dimension());
    for (i, _) in gd.examples().iter().enumerate() {
        h.update(gd.label_of(i).unwrap_or("\u{0}"));
        h.update([0xff]);
    }
    hex::encode(h.finalize())
}

fn run_step<T, F>(log: &mut Option<StepLog>, resumed: &mut Vec<String>, step: &str, f: F) -> Result<T, MitigationError>
where
    T: Serialize + DeserializeOwned,
    F: FnOnce() -> Result<T, MitigationError>,
{
    if let Some(v) = log.as_ref().and_then(|l| l.restore(step)) {
        resumed.push(step.to_string());
        return Ok(v);
    }
    let v = f()?;
    if let Some(l) = log.as_mut() {
        l.record(step, &v)?;
    }
    Ok(v)
}

fn split_test(gd: &GroupedDataset, fraction: f64, seed: u64) -> Result<(GroupedDataset, GroupedDataset), MitigationError> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(MitigationError::InvalidArgument(format!("test fraction {fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..gd.len()).collect();
    // a stream distinct from the harness holdout split
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let cut = ((gd.len() as f64) * fraction).round() as usize;
    let (mut test, mut train) = (idx[..cut].to_vec(), idx[cut..].to_vec());
    test.sort_unstable();
    train.sort_unstable();
    Ok((gd.subset(&train), gd.subset(&test)))
}

fn demographics_available(gd: &GroupedDataset) -> bool {
    gd.labels().iter().filter(|l| gd.labeled_count(l) > 0).count() >= 2
}

/// Runs root-cause analysis, blind mitigation and, only when blind
/// mitigation is inadequate, per-group calibration. Shipping stays blocked
/// until a consequence verdict is attached.
pub fn justifiability_pipeline(
    gd: &GroupedDataset,
    cfg: &PipelineConfig,
    step_log: Option<&Path>,
) -> Result<JustifiabilityReport, MitigationError> {
    if let Some(first) = cfg.interventions.first() {
        return Err(MitigationError::GuardrailEquityIntervention(format!(
            "{first}: interventions that target outcomes for a group are out of scope"
        )));
    }
    if let Some(rho) = gd.noise_rho() {
        return Err(MitigationError::PolicyViolation(format!(
            "the workflow needs true group labels; these are noised (rho = {rho})"
        )));
    }
    let mut log = match step_log {
        Some(p) => Some(StepLog::open(p, fingerprint(gd, cfg))?),
        None => None,
    };
    let mut resumed = Vec::new();

    let unjustifiable: BTreeSet<&String> = cfg.unjustifiable_features.iter().collect();
    let mut harness_cfg = cfg.harness.clone();
    harness_cfg.baseline_features.retain(|f| !unjustifiable.contains(f));
    harness_cfg.feature_superset.retain(|f| !unjustifiable.contains(f));

    let root_cause: RootCause = run_step(&mut log, &mut resumed, "root_cause", || {
        let all_features: BTreeSet<String> = gd.examples().iter().flat_map(|e| e.features.keys().cloned()).collect();
        let feature_checklist = all_features
            .iter()
            .map(|f| FeatureCheck {
                feature: f.clone(),
                unjustifiable: unjustifiable.contains(f),
                used_by_harness: harness_cfg.baseline_features.contains(f) || harness_cfg.feature_superset.contains(f),
            })
            .collect();
        let candidates: Vec<String> = if cfg.cohort_features.is_empty() {
            all_features
                .iter()
                .cloned()
                .chain(std::iter::once(gd.dimension().to_string()))
                .collect()
        } else {
            cfg.cohort_features.clone()
        };
        let (cohort_tree, cohort_error) = match build_error_tree(gd, &candidates, cfg.cohort) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(format!("{}: {e}", e.code()))),
        };
        Ok(RootCause {
            distribution: group_distribution(gd, None),
            feature_checklist,
            cohort_tree,
            cohort_error,
        })
    })?;

    let mut report = JustifiabilityReport {
        report_schema: REPORT_SCHEMA_VERSION,
        dimension: gd.dimension().to_string(),
        status: PipelineStatus::DataUnavailable,
        mitigation_basis: PipelineStatus::DataUnavailable,
        ship: ShipGate::Blocked {
            reason: "no group labels to measure parity with".into(),
        },
        root_cause,
        blind: None,
        adequacy_threshold: cfg.adequacy_threshold,
        best_blind_relative_reduction: None,
        best_blind_strategy: None,
        demographic: None,
        calibrator: None,
        consequence: None,
        guardrail: "no outcome-targeting interventions requested".into(),
        resumed_steps: Vec::new(),
    };
    if !demographics_available(gd) {
        report.resumed_steps = resumed;
        return Ok(report);
    }

    let (train, test) = split_test(gd, cfg.test_fraction, harness_cfg.seed)?;
    let blind: HarnessReport = run_step(&mut log, &mut resumed, "blind_mitigation", || {
        let mut c = harness_cfg.clone();
        c.strategies = std::iter::once(Strategy::Baseline)
            .chain(cfg.harness.strategies.iter().copied().filter(|s| !s.uses_demographics_at_inference()))
            .collect();
        run_blind_harness(&train, &test, &c)
    })?;
    let best = blind
        .experiments
        .iter()
        .filter(|e| e.strategy != Strategy::Baseline)
        .map(|e| {
            let rel = if blind.baseline_gap > 0.0 {
                (blind.baseline_gap - e.parity_gap) / blind.baseline_gap
            } else {
                0.0
            };
            (rel, e.strategy)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0));
    report.best_blind_relative_reduction = best.map(|b| b.0);
    report.best_blind_strategy = best.map(|b| b.1);
    let adequate = blind.baseline_gap == 0.0 || best.is_some_and(|(rel, _)| rel >= cfg.adequacy_threshold);
    report.blind = Some(blind);

    if adequate {
        report.status = PipelineStatus::BlindSufficient;
    } else {
        let demographic: HarnessReport = run_step(&mut log, &mut resumed, "demographic_mitigation", || {
            let mut c = harness_cfg.clone();
            c.strategies = std::iter::once(Strategy::Baseline)
                .chain(cfg.harness.strategies.iter().copied().filter(|s| s.uses_demographics_at_inference()))
                .chain(std::iter::once(Strategy::Bmt))
                .collect();
            run_blind_harness(&train, &test, &c)
        })?;
        report.calibrator = demographic.calibrator.clone();
        report.demographic = Some(demographic);
        report.status = PipelineStatus::DemographicJustified;
    }
    report.mitigation_basis = report.status;
    report.ship = ShipGate::PendingConsequenceReport;
    report.resumed_steps = resumed;
    Ok(report)
}

/// Records a consequence verdict; only NO_HARM unblocks shipping.
pub fn attach_consequence_report(report: &mut JustifiabilityReport, verdict: ConsequenceVerdict) {
    if report.mitigation_basis == PipelineStatus::DataUnavailable {
        report.consequence = Some(verdict);
        return;
    }
    report.ship = match verdict.verdict {
        Verdict::NoHarm => ShipGate::Ship,
        Verdict::Review => ShipGate::Blocked {
            reason: "consequence review requested".into(),
        },
        Verdict::Harm => ShipGate::Blocked {
            reason: format!("consequence analysis found harm: {}", verdict.rationale.join("; ")),
        },
    };
    report.status = if report.ship == ShipGate::Ship {
        PipelineStatus::Ship
    } else {
        report.mitigation_basis
    };
    report.consequence = Some(verdict);
}

impl fmt::Display for JustifiabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# Mitigation report [{}]", self.dimension)?;
        writeln!(f, "status: {:?}", self.status)?;
        writeln!(f)?;
        writeln!(f, "## 1. Root cause")?;
        write!(f, "{}", self.root_cause.distribution)?;
        writeln!(f, "feature checklist:")?;
        for c in &self.root_cause.feature_checklist {
            let mark = if c.unjustifiable { "REMOVED (unjustifiable)" } else if c.used_by_harness { "used" } else { "unused" };
            writeln!(f, "  {:<24} {mark}", c.feature)?;
        }
        match (&self.root_cause.cohort_tree, &self.root_cause.cohort_error) {
            (Some(t), _) => write!(f, "cohort tree:\n{t}")?,
            (None, Some(e)) => writeln!(f, "cohort tree: {e}")?,
            (None, None) => {}
        }
        writeln!(f)?;
        writeln!(f, "## 2. Mitigation without group labels")?;
        match &self.blind {
            Some(b) => {
                write!(f, "{b}")?;
                if let (Some(rel), Some(s)) = (self.best_blind_relative_reduction, self.best_blind_strategy) {
                    writeln!(
                        f,
                        "best: {s} at {:.1}% relative reduction (adequacy threshold {:.1}%)",
                        100.0 * rel,
                        100.0 * self.adequacy_threshold
                    )?;
                }
            }
            None => writeln!(f, "not run: group labels unavailable")?,
        }
        writeln!(f)?;
        writeln!(f, "## 3. Mitigation with group labels")?;
        match &self.demographic {
            Some(d) => write!(f, "{d}")?,
            None if self.mitigation_basis == PipelineStatus::BlindSufficient => {
                writeln!(f, "skipped: blind mitigation met the adequacy threshold")?
            }
            None => writeln!(f, "not run")?,
        }
        writeln!(f)?;
        writeln!(f, "## 4. Unintended consequences")?;
        match &self.consequence {
            Some(v) => write!(f, "{v}")?,
            None => writeln!(f, "required before shipping; none attached")?,
        }
        writeln!(f, "ship gate: {:?}", self.ship)?;
        writeln!(f)?;
        writeln!(f, "## 5. Guardrails")?;
        writeln!(f, "{}", self.guardrail)
    }
}
