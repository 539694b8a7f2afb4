//! Domain types shared by every stage: scored examples, datasets, group
//! assignments and score binning.

mod binning;
mod grouping;
mod ingest;

pub use binning::{bin_scores, BinKind, BinningScheme};
pub use grouping::{join_groups, parse_group_jsonl, read_group_file, GroupAssignment, GroupedDataset};
pub use ingest::{ingest, ingest_csv_str, ingest_jsonl_str, InputFormat};

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label used in reports for examples whose member has no group assignment.
pub const UNKNOWN_LABEL: &str = "UNKNOWN";

/// Label used by cohort splits for a feature that is absent on an example.
pub const MISSING_CATEGORY: &str = "MISSING";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: field `{field}`: {message}")]
    Malformed {
        row: usize,
        field: String,
        message: String,
    },
    #[error("row {row}: score {score} outside [0, 1]")]
    ScoreOutOfRange { row: usize, score: f64 },
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("invalid group assignment: {0}")]
    InvalidGroupAssignment(String),
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
}

impl DataError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "IO_ERROR",
            Self::Malformed { .. } => "MALFORMED_ROW",
            Self::ScoreOutOfRange { .. } => "SCORE_OUT_OF_RANGE",
            Self::InvalidExample(_) => "INVALID_EXAMPLE",
            Self::InvalidGroupAssignment(_) => "INVALID_GROUP_ASSIGNMENT",
            Self::InvalidBinning(_) => "INVALID_BINNING",
        }
    }
}

/// A side feature value. Numbers feed thresholds, strings feed subset splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Num(f64),
    Cat(String),
}

impl FeatureValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Self::Num(v) => Some(*v),
            Self::Cat(_) => None,
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Num(v) => write!(f, "{v}"),
            Self::Cat(s) => f.write_str(s),
        }
    }
}

/// One model prediction joined with its realized outcome.
///
/// `outcome` is `None` for members whose label was never observed; such
/// examples count toward distribution audits but never toward calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub member_id: String,
    pub score: f64,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "outcome_serde"
    )]
    pub outcome: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, FeatureValue>,
}

impl ScoredExample {
    pub fn new(member_id: impl Into<String>, score: f64, outcome: Option<bool>) -> Self {
        Self {
            member_id: member_id.into(),
            score,
            outcome,
            session_id: None,
            features: BTreeMap::new(),
        }
    }

    pub fn with_feature(mut self, name: impl Into<String>, value: FeatureValue) -> Self {
        self.features.insert(name.into(), value);
        self
    }

    pub fn with_session(mut self, session_id: impl Into<String>) -> Self {
        self.session_id = Some(session_id.into());
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.member_id.is_empty() {
            return Err(DataError::InvalidExample("empty member_id".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(DataError::InvalidExample(format!(
                "member {}: score {} outside [0, 1]",
                self.member_id, self.score
            )));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.outcome.is_some()
    }

    /// Outcome as 0.0/1.0 for labeled examples.
    pub fn outcome_value(&self) -> Option<f64> {
        self.outcome.map(|y| if y { 1.0 } else { 0.0 })
    }
}

mod outcome_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(y) => s.serialize_u8(u8::from(*y)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(None),
            Some(0) => Ok(Some(false)),
            Some(1) => Ok(Some(true)),
            Some(other) => Err(serde::de::Error::custom(format!(
                "outcome must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// An ordered, immutable collection of scored examples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    examples: Vec<ScoredExample>,
    provenance: String,
}

impl Dataset {
    pub fn new(examples: Vec<ScoredExample>, provenance: impl Into<String>) -> Result<Self, DataError> {
        for ex in &examples {
            ex.validate()?;
        }
        Ok(Self {
            examples,
            provenance: provenance.into(),
        })
    }

    pub fn examples(&self) -> &[ScoredExample] {
        &self.examples
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.score).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_labeled()).count()
    }

    /// Canonical JSONL form: one object per line, keys in a fixed order,
    /// absent fields omitted.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::with_capacity(self.examples.len() * 64);
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
            out.push('\n');
        }
        out
    }

    /// Same rows with every score replaced; scores must stay in `[0, 1]`.
    pub fn with_scores(&self, scores: &[f64]) -> Result<Self, DataError> {
        if scores.len() != self.examples.len() {
            return Err(DataError::InvalidExample(format!(
                "{} replacement scores for {} examples",
                scores.len(),
                self.examples.len()
            )));
        }
        let examples = self
            .examples
            .iter()
            .zip(scores)
            .map(|(ex, &s)| ScoredExample { score: s, ..ex.clone() })
            .collect();
        Self::new(examples, self.provenance.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_member_and_bad_score() {
        assert!(ScoredExample::new("", 0.5, None).validate().is_err());
        assert!(ScoredExample::new("m", 1.5, None).validate().is_err());
        assert!(ScoredExample::new("m", f64::NAN, None).validate().is_err());
        assert!(ScoredExample::new("m", 1.0, Some(true)).validate().is_ok());
    }

    #[test]
    fn absent_outcome_is_omitted_from_json() {
        let ex = ScoredExample::new("m1", 0.25, None);
        let json = serde_json::to_string(&ex).unwrap();
        assert_eq!(json, r#"{"member_id":"m1","score":0.25}"#);
        let back: ScoredExample = serde_json::from_str(&json).unwrap();
        assert_eq!(back.outcome, None);
        let labeled: ScoredExample =
            serde_json::from_str(r#"{"member_id":"m1","score":0.25,"outcome":1}"#).unwrap();
        assert_eq!(labeled.outcome, Some(true));
    }

    #[test]
    fn with_scores_checks_length_and_range() {
        let d = Dataset::new(vec![ScoredExample::new("a", 0.1, Some(true))], "t").unwrap();
        assert!(d.with_scores(&[0.2, 0.3]).is_err());
        assert!(d.with_scores(&[1.2]).is_err());
        assert_eq!(d.with_scores(&[0.7]).unwrap().examples()[0].score, 0.7);
    }
}
