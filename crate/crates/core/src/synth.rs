//! Deterministic synthetic fixtures. Every generator is a pure function of
//! its arguments, so the same seed always yields byte-identical files.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::consequence::{Arm, Edge, EdgeEvents};
use crate::data::{join_groups, Dataset, FeatureValue, GroupAssignment, GroupedDataset, ScoredExample};

/// Share of members labeled F in the score-shift family.
pub const FEMALE_SHARE: f64 = 0.455;
pub const DEFAULT_SHIFT: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    OutcomeShift,
    GroupLabelBias,
    Confounder,
    CohortResidual,
    Edges,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Self::OutcomeShift,
        Self::GroupLabelBias,
        Self::Confounder,
        Self::CohortResidual,
        Self::Edges,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OutcomeShift => "outcome-shift",
            Self::GroupLabelBias => "group-label-bias",
            Self::Confounder => "confounder",
            Self::CohortResidual => "cohort-residual",
            Self::Edges => "edges",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown family `{s}`"))
    }
}

/// A scored dataset plus the group file that goes with it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    pub groups: GroupAssignment,
}

impl SynthData {
    pub fn grouped(&self) -> GroupedDataset {
        join_groups(&self.dataset, &self.groups)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn member(i: usize) -> String {
    format!("m{i:06}")
}

fn finish(examples: Vec<ScoredExample>, pairs: Vec<(String, &'static str)>, dim: &str, tag: String) -> SynthData {
    SynthData {
        dataset: Dataset::new(examples, tag).expect("generated examples are valid"),
        groups: GroupAssignment::from_pairs(dim, pairs),
    }
}

/// Scores ~ Beta(1.5, 12); outcome log-odds equal the score's log-odds,
/// plus `shift` for F members. The model under-predicts F at every score.
pub fn outcome_shift(n: usize, seed: u64, shift: f64) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = Beta::new(1.5, 12.0).expect("valid beta");
    let regions = ["na", "emea", "apac", "latam"];
    let mut examples = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let female = rng.random::<f64>() < FEMALE_SHARE;
        let s = f64::clamp(scores.sample(&mut rng), 1e-6, 1.0 - 1e-6);
        let p = sigmoid(logit(s) + if female { shift } else { 0.0 });
        let y = rng.random::<f64>() < p;
        let tenure = rng.random_range(0.0..20.0_f64);
        let region = regions[rng.random_range(0..regions.len())];
        examples.push(
            ScoredExample::new(member(i), s, Some(y))
                .with_feature("tenure_years", FeatureValue::Num((tenure * 10.0).round() / 10.0))
                .with_feature("region", FeatureValue::Cat(region.into())),
        );
        pairs.push((member(i), if female { "F" } else { "M" }));
    }
    finish(examples, pairs, "gender", format!("synth:outcome-shift:{seed}"))
}

/// Outcomes depend on the group directly, including a group-specific slope
/// on `x2`. `x1` is missing for 30% of rows and its mean differs by group.
/// No feature carries the direct effect, so blind strategies cannot remove it.
/// Scores are a flat placeholder; the harness retrains its own model.
pub fn group_label_bias(n: usize, seed: u64) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let mut examples = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let female = rng.random::<f64>() < 0.5;
        let f = if female { 1.0 } else { 0.0 };
        let x1 = std.sample(&mut rng) + 0.5 * f;
        let x2 = std.sample(&mut rng);
        let noise = std.sample(&mut rng);
        let eta = -1.0 + 0.8 * x1 + 0.8 * x2 + f * (0.6 + 0.6 * x2);
        let y = rng.random::<f64>() < sigmoid(eta);
        let mut ex = ScoredExample::new(member(i), 0.5, Some(y))
            .with_feature("x2", FeatureValue::Num(x2))
            .with_feature("noise", FeatureValue::Num(noise));
        if rng.random::<f64>() >= 0.3 {
            ex = ex.with_feature("x1", FeatureValue::Num(x1));
        }
        examples.push(ex);
        pairs.push((member(i), if female { "F" } else { "M" }));
    }
    finish(examples, pairs, "gender", format!("synth:group-label-bias:{seed}"))
}

/// The group moves `click_probability`, which alone drives the group part
/// of the outcome. A model that sees it has nothing left to learn from the
/// group label.
pub fn confounder(n: usize, seed: u64) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let mut examples = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let female = rng.random::<f64>() < 0.5;
        let click = sigmoid(-0.5 + if female { 1.5 } else { 0.0 } + 0.5 * std.sample(&mut rng));
        let x = std.sample(&mut rng);
        let noise = std.sample(&mut rng);
        let eta = -1.5 + x + 3.0 * click;
        let y = rng.random::<f64>() < sigmoid(eta);
        examples.push(
            ScoredExample::new(member(i), 0.5, Some(y))
                .with_feature("x", FeatureValue::Num(x))
                .with_feature("click_probability", FeatureValue::Num(click))
                .with_feature("noise", FeatureValue::Num(noise)),
        );
        pairs.push((member(i), if female { "F" } else { "M" }));
    }
    finish(examples, pairs, "gender", format!("synth:confounder:{seed}"))
}

/// Scores ~ U(0.3, 0.7); the outcome rate is the score plus 0.2 for F
/// destinations and minus 0.2 for M, so residuals are ±0.2 by group.
pub fn cohort_residual(n: usize, seed: u64) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let devices = ["desktop", "ios", "android"];
    let mut examples = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let female = rng.random::<f64>() < 0.5;
        let s: f64 = rng.random_range(0.3..0.7);
        let p = s + if female { 0.2 } else { -0.2 };
        let y = rng.random::<f64>() < p;
        examples.push(
            ScoredExample::new(member(i), s, Some(y))
                .with_feature("tenure_years", FeatureValue::Num(rng.random_range(0.0..20.0_f64).floor()))
                .with_feature("device", FeatureValue::Cat(devices[rng.random_range(0..3)].into())),
        );
        pairs.push((member(i), if female { "F" } else { "M" }));
    }
    finish(examples, pairs, "destination_gender", format!("synth:cohort-residual:{seed}"))
}

/// Per (destination group, arm) totals used by [`edges_from_counts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeCell {
    pub group: &'static str,
    pub arm: Arm,
    pub edges: u64,
    pub invites: u64,
    pub accepted: u64,
    pub messages: u64,
    pub replied: u64,
    pub reports: u64,
}

/// Counts whose female-destination rates reproduce the reference accept,
/// reply and report rows to six decimals.
pub const RATE_TABLE_CELLS: [EdgeCell; 4] = [
    EdgeCell { group: "F", arm: Arm::Control, edges: 21298, invites: 4000, accepted: 811, messages: 3533, replied: 1105, reports: 1 },
    EdgeCell { group: "F", arm: Arm::Treatment, edges: 21678, invites: 4679, accepted: 1095, messages: 7573, replied: 2320, reports: 1 },
    EdgeCell { group: "M", arm: Arm::Control, edges: 12034, invites: 4068, accepted: 890, messages: 2073, replied: 644, reports: 1 },
    EdgeCell { group: "M", arm: Arm::Treatment, edges: 10784, invites: 5422, accepted: 1359, messages: 4173, replied: 1256, reports: 1 },
];

/// Expands aggregate cells into edges. Destinations cycle through 500
/// members per group; viewers through 1000.
pub fn edges_from_counts(cells: &[EdgeCell]) -> (Vec<Edge>, GroupAssignment) {
    let mut edges = Vec::new();
    let mut pairs = Vec::new();
    for g in ["F", "M"] {
        for j in 0..500 {
            pairs.push((format!("{g}{j:03}"), g));
        }
    }
    for c in cells {
        for j in 0..c.edges {
            edges.push(Edge {
                viewer_id: format!("v{:04}", (edges.len()) % 1000),
                dest_id: format!("{}{:03}", c.group, j % 500),
                arm: c.arm,
                events: EdgeEvents {
                    invite_sent: j < c.invites,
                    invite_accepted: j < c.accepted,
                    message_sent: j < c.messages,
                    message_replied: j < c.replied,
                    reported: j < c.reports,
                },
            });
        }
    }
    (edges, GroupAssignment::from_pairs("destination_gender", pairs))
}

pub fn rate_table_edges() -> (Vec<Edge>, GroupAssignment) {
    edges_from_counts(&RATE_TABLE_CELLS)
}

/// Random edges with per-event probabilities; the treatment arm raises the
/// accept rate to F destinations by `accept_lift` (absolute).
pub fn random_edges(n: usize, seed: u64, accept_lift: f64) -> (Vec<Edge>, GroupAssignment) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for g in ["F", "M"] {
        for j in 0..500 {
            pairs.push((format!("{g}{j:03}"), g));
        }
    }
    let edges = (0..n)
        .map(|_| {
            let female = rng.random::<f64>() < 0.5;
            let arm = if rng.random::<f64>() < 0.5 { Arm::Control } else { Arm::Treatment };
            let accept = 0.2 + if female && arm == Arm::Treatment { accept_lift } else { 0.0 };
            let invite_sent = rng.random::<f64>() < 0.2;
            let message_sent = rng.random::<f64>() < 0.2;
            let events = EdgeEvents {
                invite_sent,
                invite_accepted: invite_sent && rng.random::<f64>() < accept,
                message_sent,
                message_replied: message_sent && rng.random::<f64>() < 0.3,
                reported: rng.random::<f64>() < 1e-3,
            };
            Edge {
                viewer_id: format!("v{:04}", rng.random_range(0..1000)),
                dest_id: format!("{}{:03}", if female { "F" } else { "M" }, rng.random_range(0..500)),
                arm,
                events,
            }
        })
        .collect();
    (edges, GroupAssignment::from_pairs("destination_gender", pairs))
}

pub fn edges_to_jsonl(edges: &[Edge]) -> String {
    let mut out = String::new();
    for e in edges {
        out.push_str(&serde_json::to_string(e).expect("edges serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consequence::{edge_rates, EdgeMetric};

    #[test]
    fn deterministic() {
        let a = outcome_shift(500, 7, DEFAULT_SHIFT);
        let b = outcome_shift(500, 7, DEFAULT_SHIFT);
        assert_eq!(a.dataset.to_jsonl(), b.dataset.to_jsonl());
        assert_eq!(a.groups.to_jsonl(), b.groups.to_jsonl());
        assert_ne!(a.dataset.to_jsonl(), outcome_shift(500, 8, DEFAULT_SHIFT).dataset.to_jsonl());
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
    }

    #[test]
    fn female_share() {
        let d = outcome_shift(20_000, 1, DEFAULT_SHIFT);
        let f = d.groups.values().values().filter(|l| *l == "F").count() as f64 / 20_000.0;
        assert!((f - FEMALE_SHARE).abs() < 0.015, "{f}");
    }

    #[test]
    fn rate_table_female_rows() {
        let (edges, groups) = rate_table_edges();
        let t = edge_rates(&edges, &groups).unwrap();
        let accept = t.row("to_F", EdgeMetric::Accept).unwrap();
        assert!((accept.control_rate.unwrap() - 0.20275).abs() < 1e-6);
        assert!((accept.treatment_rate.unwrap() - 0.234024).abs() < 1e-6);
        let report = t.row("to_F", EdgeMetric::Report).unwrap();
        assert!((report.relative_diff.unwrap() + 0.017529).abs() < 1e-5);
    }

    #[test]
    fn edges_validate() {
        let (edges, _) = random_edges(2000, 3, 0.05);
        assert!(edges.iter().all(|e| e.validate().is_ok()));
    }
}
