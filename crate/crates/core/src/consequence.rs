//! Edge-level response rates for control vs treatment arms, segmented by the
//! recommended member's group, and a harm verdict over them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GroupAssignment;

pub const INTERFERENCE_CAVEAT: &str = "arms share members, so spillover between control and treatment is not \
     modeled; read the differences as a heuristic estimate of the treatment effect";

pub const DEFAULT_REPLY_TOLERANCE: f64 = -0.05;
pub const DEFAULT_REPORT_HARM_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum ConsequenceError {
    #[error("edge {index}: {message}")]
    InvalidEdge { index: usize, message: String },
    #[error("arm `{0}` has no edges")]
    EmptyArm(Arm),
    #[error("table is missing {0}")]
    IncompleteTable(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ConsequenceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidEdge { .. } => "INVALID_EDGE",
            Self::EmptyArm(_) => "EMPTY_ARM",
            Self::IncompleteTable(_) => "INCOMPLETE_TABLE",
            Self::Parse { .. } => "MALFORMED_INPUT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treatment,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Control => "control",
            Arm::Treatment => "treatment",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeEvents {
    pub invite_sent: bool,
    pub invite_accepted: bool,
    pub message_sent: bool,
    pub message_replied: bool,
    pub reported: bool,
}

/// One viewer → recommended-member edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub viewer_id: String,
    pub dest_id: String,
    pub arm: Arm,
    #[serde(default)]
    pub events: EdgeEvents,
}

impl Edge {
    pub fn validate(&self) -> Result<(), String> {
        if self.events.invite_accepted && !self.events.invite_sent {
            return Err("invite accepted without an invite".into());
        }
        if self.events.message_replied && !self.events.message_sent {
            return Err("message replied without a message".into());
        }
        Ok(())
    }
}

pub fn parse_edges_jsonl(text: &str) -> Result<Vec<Edge>, ConsequenceError> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let edge: Edge = serde_json::from_str(line).map_err(|e| ConsequenceError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        edge.validate().map_err(|message| ConsequenceError::Parse { line: i + 1, message })?;
        edges.push(edge);
    }
    Ok(edges)
}

/// Event counts; merging is associative, so edges can be sharded freely.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub edges: u64,
    pub invites_sent: u64,
    pub invites_accepted: u64,
    pub messages_sent: u64,
    pub messages_replied: u64,
    pub reports: u64,
}

impl EdgeCounts {
    pub fn add(&mut self, e: &EdgeEvents) {
        self.edges += 1;
        self.invites_sent += u64::from(e.invite_sent);
        self.invites_accepted += u64::from(e.invite_accepted);
        self.messages_sent += u64::from(e.message_sent);
        self.messages_replied += u64::from(e.message_replied);
        self.reports += u64::from(e.reported);
    }

    pub fn merge(&mut self, other: &EdgeCounts) {
        self.edges += other.edges;
        self.invites_sent += other.invites_sent;
        self.invites_accepted += other.invites_accepted;
        self.messages_sent += other.messages_sent;
        self.messages_replied += other.messages_replied;
        self.reports += other.reports;
    }

    /// (numerator, denominator) for a metric.
    pub fn ratio(&self, m: EdgeMetric) -> (u64, u64) {
        match m {
            EdgeMetric::Accept => (self.invites_accepted, self.invites_sent),
            EdgeMetric::Reply => (self.messages_replied, self.messages_sent),
            EdgeMetric::Report => (self.reports, self.edges),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMetric {
    /// Accepted / sent invites.
    Accept,
    /// Replied / sent messages.
    Reply,
    /// Reported / all edges.
    Report,
}

impl EdgeMetric {
    pub const ALL: [EdgeMetric; 3] = [EdgeMetric::Accept, EdgeMetric::Reply, EdgeMetric::Report];
}

impl fmt::Display for EdgeMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeMetric::Accept => "accept",
            EdgeMetric::Reply => "reply",
            EdgeMetric::Report => "report",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RateStatus {
    Ok,
    /// A zero denominator in at least one arm.
    NoEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRateRow {
    pub edge_type: String,
    pub metric: EdgeMetric,
    pub control_rate: Option<f64>,
    pub treatment_rate: Option<f64>,
    /// `treatment / control − 1`, only when the control rate is positive.
    pub relative_diff: Option<f64>,
    pub status: RateStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRateTable {
    pub dimension: String,
    pub counts: BTreeMap<String, BTreeMap<Arm, EdgeCounts>>,
    pub rows: Vec<EdgeRateRow>,
}

impl EdgeRateTable {
    pub fn row(&self, edge_type: &str, metric: EdgeMetric) -> Option<&EdgeRateRow> {
        self.rows.iter().find(|r| r.edge_type == edge_type && r.metric == metric)
    }
}

pub const ALL_EDGES: &str = "all";

pub fn edge_type_for(label: &str) -> String {
    format!("to_{label}")
}

fn rate((num, den): (u64, u64)) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Rates per arm for all edges and for edges into each destination group.
/// Edges into members without a group count toward `all` only.
pub fn edge_rates(edges: &[Edge], groups: &GroupAssignment) -> Result<EdgeRateTable, ConsequenceError> {
    let mut counts: BTreeMap<String, BTreeMap<Arm, EdgeCounts>> = BTreeMap::new();
    let segments = std::iter::once(ALL_EDGES.to_string()).chain(groups.label_set().iter().map(|l| edge_type_for(l)));
    for seg in segments {
        counts.insert(seg, [(Arm::Control, EdgeCounts::default()), (Arm::Treatment, EdgeCounts::default())].into());
    }
    for (index, e) in edges.iter().enumerate() {
        e.validate().map_err(|message| ConsequenceError::InvalidEdge { index, message })?;
        counts
            .get_mut(ALL_EDGES)
            .and_then(|arms| arms.get_mut(&e.arm))
            .expect("all segment")
            .add(&e.events);
        if let Some(label) = groups.label_of(&e.dest_id) {
            counts
                .get_mut(&edge_type_for(label))
                .and_then(|arms| arms.get_mut(&e.arm))
                .expect("segment per label")
                .add(&e.events);
        }
    }
    for arm in [Arm::Control, Arm::Treatment] {
        if counts[ALL_EDGES][&arm].edges == 0 {
            return Err(ConsequenceError::EmptyArm(arm));
        }
    }
    // `all` first, then groups in label order
    let mut order: Vec<&String> = counts.keys().filter(|k| *k != ALL_EDGES).collect();
    order.insert(0, counts.keys().find(|k| *k == ALL_EDGES).expect("all segment"));
    let mut rows = Vec::new();
    for seg in order {
        let arms = &counts[seg];
        for metric in EdgeMetric::ALL {
            let c = rate(arms[&Arm::Control].ratio(metric));
            let t = rate(arms[&Arm::Treatment].ratio(metric));
            let relative_diff = match (c, t) {
                (Some(c), Some(t)) if c > 0.0 => Some(t / c - 1.0),
                _ => None,
            };
            rows.push(EdgeRateRow {
                edge_type: seg.clone(),
                metric,
                control_rate: c,
                treatment_rate: t,
                relative_diff,
                status: if c.is_some() && t.is_some() {
                    RateStatus::Ok
                } else {
                    RateStatus::NoEvents
                },
            });
        }
    }
    Ok(EdgeRateTable {
        dimension: groups.dimension().to_string(),
        counts,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerdictPolicy {
    /// Destination group whose rows are judged; `None` judges all edges.
    pub protected_group: Option<String>,
    /// Reply relative change must stay strictly above this.
    pub reply_tolerance: f64,
    /// Report relative change above this is harm.
    pub report_harm_threshold: f64,
}

impl Default for VerdictPolicy {
    fn default() -> Self {
        Self {
            protected_group: None,
            reply_tolerance: DEFAULT_REPLY_TOLERANCE,
            report_harm_threshold: DEFAULT_REPORT_HARM_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    NoHarm,
    Review,
    Harm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsequenceVerdict {
    pub verdict: Verdict,
    pub edge_type: String,
    pub rationale: Vec<String>,
    pub caveat: String,
}

pub fn consequence_verdict(t: &EdgeRateTable, policy: &VerdictPolicy) -> Result<ConsequenceVerdict, ConsequenceError> {
    let edge_type = policy
        .protected_group
        .as_deref()
        .map_or_else(|| ALL_EDGES.to_string(), edge_type_for);
    let diff = |m: EdgeMetric| {
        t.row(&edge_type, m)
            .and_then(|r| r.relative_diff)
            .ok_or_else(|| ConsequenceError::IncompleteTable(format!("a {m} relative difference for `{edge_type}`")))
    };
    let (accept, reply, report) = (diff(EdgeMetric::Accept)?, diff(EdgeMetric::Reply)?, diff(EdgeMetric::Report)?);
    let mut rationale = Vec::new();
    let mut harm = false;
    if accept < 0.0 {
        harm = true;
        rationale.push(format!("accept rate fell ({accept:+.4})"));
    }
    if report > policy.report_harm_threshold {
        harm = true;
        rationale.push(format!(
            "report rate rose {report:+.4}, above the {:+.4} harm threshold",
            policy.report_harm_threshold
        ));
    }
    let verdict = if harm {
        Verdict::Harm
    } else if report <= 0.0 && reply > policy.reply_tolerance {
        rationale.push(format!(
            "accept {accept:+.4} >= 0, report {report:+.4} <= 0, reply {reply:+.4} within tolerance {:+.4}",
            policy.reply_tolerance
        ));
        Verdict::NoHarm
    } else {
        if report > 0.0 {
            rationale.push(format!("report rate rose {report:+.4}"));
        }
        if reply <= policy.reply_tolerance {
            rationale.push(format!(
                "reply rate moved {reply:+.4}, at or below tolerance {:+.4}",
                policy.reply_tolerance
            ));
        }
        Verdict::Review
    };
    Ok(ConsequenceVerdict {
        verdict,
        edge_type,
        rationale,
        caveat: INTERFERENCE_CAVEAT.to_string(),
    })
}

impl fmt::Display for EdgeRateTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "NO_EVENTS".to_string(), |x| format!("{x:.prec$}"));
        writeln!(f, "edge-level response rates [{}]", self.dimension)?;
        writeln!(
            f,
            "  {:<16} {:<7} {:>10} {:>10} {:>13}",
            "edge type", "metric", "control", "treatment", "relative diff"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "  {:<16} {:<7} {:>10} {:>10} {:>13}",
                r.edge_type,
                r.metric.to_string(),
                opt(r.control_rate, 6),
                opt(r.treatment_rate, 6),
                r.relative_diff.map_or_else(|| "-".to_string(), |d| format!("{d:+.6}"))
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for ConsequenceVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict [{}]: {:?}", self.edge_type, self.verdict)?;
        for r in &self.rationale {
            writeln!(f, "  - {r}")?;
        }
        writeln!(f, "  note: {}", self.caveat)
    }
}
