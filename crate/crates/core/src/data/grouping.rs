use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{DataError, Dataset, ScoredExample};

/// Member id → group label for one demographic dimension.
///
/// `noise_rho` is set when labels have been passed through randomized
/// response; it must stay below `(k - 1) / k` for the channel to be
/// invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroupAssignmentRepr", into = "GroupAssignmentRepr")]
pub struct GroupAssignment {
    dimension: String,
    label_set: BTreeSet<String>,
    values: BTreeMap<String, String>,
    noise_rho: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct GroupAssignmentRepr {
    dimension: String,
    labels: BTreeSet<String>,
    values: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_rho: Option<f64>,
}

impl TryFrom<GroupAssignmentRepr> for GroupAssignment {
    type Error = DataError;

    fn try_from(r: GroupAssignmentRepr) -> Result<Self, Self::Error> {
        GroupAssignment::new(r.dimension, r.labels, r.values, r.noise_rho)
    }
}

impl From<GroupAssignment> for GroupAssignmentRepr {
    fn from(g: GroupAssignment) -> Self {
        Self {
            dimension: g.dimension,
            labels: g.label_set,
            values: g.values,
            noise_rho: g.noise_rho,
        }
    }
}

impl GroupAssignment {
    pub fn new(
        dimension: impl Into<String>,
        label_set: BTreeSet<String>,
        values: BTreeMap<String, String>,
        noise_rho: Option<f64>,
    ) -> Result<Self, DataError> {
        let dimension = dimension.into();
        if dimension.is_empty() {
            return Err(DataError::InvalidGroupAssignment("empty dimension".into()));
        }
        if let Some((member, label)) = values.iter().find(|(_, l)| !label_set.contains(*l)) {
            return Err(DataError::InvalidGroupAssignment(format!(
                "member {member} has label `{label}` outside the declared set"
            )));
        }
        if let Some(rho) = noise_rho {
            let k = label_set.len().max(2) as f64;
            let bound = (k - 1.0) / k;
            if !(0.0..bound).contains(&rho) {
                return Err(DataError::InvalidGroupAssignment(format!(
                    "noise_rho {rho} outside [0, {bound})"
                )));
            }
        }
        Ok(Self {
            dimension,
            label_set,
            values,
            noise_rho,
        })
    }

    /// Builds an unnoised assignment whose label set is the set of labels seen.
    pub fn from_pairs<I, M, L>(dimension: impl Into<String>, pairs: I) -> Self
    where
        I: IntoIterator<Item = (M, L)>,
        M: Into<String>,
        L: Into<String>,
    {
        let values: BTreeMap<String, String> =
            pairs.into_iter().map(|(m, l)| (m.into(), l.into())).collect();
        let label_set = values.values().cloned().collect();
        Self::new(dimension, label_set, values, None).expect("labels drawn from their own set")
    }

    pub fn empty(dimension: impl Into<String>, label_set: BTreeSet<String>) -> Self {
        Self::new(dimension, label_set, BTreeMap::new(), None).expect("no values to violate")
    }

    pub fn dimension(&self) -> &str {
        &self.dimension
    }

    pub fn label_set(&self) -> &BTreeSet<String> {
        &self.label_set
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn noise_rho(&self) -> Option<f64> {
        self.noise_rho
    }

    pub fn label_of(&self, member_id: &str) -> Option<&str> {
        self.values.get(member_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Group-file JSONL: a header record followed by one row per member.
    pub fn to_jsonl(&self) -> String {
        let mut header = Map::new();
        header.insert("dimension".into(), Value::String(self.dimension.clone()));
        header.insert(
            "labels".into(),
            Value::Array(self.label_set.iter().cloned().map(Value::String).collect()),
        );
        if let Some(rho) = self.noise_rho {
            header.insert("noise_rho".into(), serde_json::json!(rho));
        }
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (member, label) in &self.values {
            let row = serde_json::json!({
                "member_id": member,
                "dimension": self.dimension,
                "label": label,
            });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Default)]
struct PendingDimension {
    labels: Option<BTreeSet<String>>,
    noise_rho: Option<f64>,
    values: BTreeMap<String, String>,
}

/// Parses a group file. A record without `member_id` is a header carrying
/// `dimension` and optionally `labels` and `noise_rho`. Rows without a
/// `dimension` key inherit the most recent header's dimension.
pub fn parse_group_jsonl(text: &str) -> Result<Vec<GroupAssignment>, DataError> {
    let mut dims: BTreeMap<String, PendingDimension> = BTreeMap::new();
    let mut current: Option<String> = None;
    let bad = |row: usize, field: &str, message: &str| DataError::Malformed {
        row,
        field: field.to_string(),
        message: message.to_string(),
    };
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Map<String, Value> =
            serde_json::from_str(line).map_err(|e| bad(row, "<line>", &e.to_string()))?;
        let dimension = match obj.get("dimension") {
            Some(Value::String(d)) => Some(d.clone()),
            Some(_) => return Err(bad(row, "dimension", "expected a string")),
            None => None,
        };
        if !obj.contains_key("member_id") {
            let dim = dimension.ok_or_else(|| bad(row, "dimension", "header record needs a dimension"))?;
            let entry = dims.entry(dim.clone()).or_default();
            if let Some(labels) = obj.get("labels") {
                let arr = labels
                    .as_array()
                    .ok_or_else(|| bad(row, "labels", "expected an array of strings"))?;
                let mut set = BTreeSet::new();
                for l in arr {
                    set.insert(
                        l.as_str()
                            .ok_or_else(|| bad(row, "labels", "expected an array of strings"))?
                            .to_string(),
                    );
                }
                entry.labels = Some(set);
            }
            match obj.get("noise_rho") {
                None | Some(Value::Null) => {}
                Some(v) => {
                    entry.noise_rho = Some(v.as_f64().ok_or_else(|| bad(row, "noise_rho", "expected a number"))?)
                }
            }
            current = Some(dim);
            continue;
        }
        let member = obj
            .get("member_id")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| bad(row, "member_id", "expected a non-empty string"))?;
        let label = obj
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(row, "label", "expected a string"))?;
        let dim = dimension
            .or_else(|| current.clone())
            .ok_or_else(|| bad(row, "dimension", "missing and no header record precedes this row"))?;
        dims.entry(dim)
            .or_default()
            .values
            .insert(member.to_string(), label.to_string());
    }
    dims.into_iter()
        .map(|(dim, p)| {
            let labels = p.labels.unwrap_or_else(|| p.values.values().cloned().collect());
            GroupAssignment::new(dim, labels, p.values, p.noise_rho)
        })
        .collect()
}

pub fn read_group_file(path: &Path) -> Result<Vec<GroupAssignment>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_group_jsonl(&text)
}

/// A dataset annotated with one group label (or UNKNOWN) per example.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    dataset: Dataset,
    dimension: String,
    labels: Vec<String>,
    assigned: Vec<Option<usize>>,
    noise_rho: Option<f64>,
}

/// Annotates every example with its member's label; members missing from
/// `groups` land in the UNKNOWN bucket.
pub fn join_groups(d: &Dataset, groups: &GroupAssignment) -> GroupedDataset {
    let labels: Vec<String> = groups.label_set().iter().cloned().collect();
    let assigned = d
        .examples()
        .iter()
        .map(|ex| {
            groups
                .label_of(&ex.member_id)
                .map(|l| labels.binary_search_by(|x| x.as_str().cmp(l)).expect("label in set"))
        })
        .collect();
    GroupedDataset {
        dataset: d.clone(),
        dimension: groups.dimension().to_string(),
        labels,
        assigned,
        noise_rho: groups.noise_rho(),
    }
}

impl GroupedDataset {
    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn examples(&self) -> &[ScoredExample] {
        self.dataset.examples()
    }

    pub fn dimension(&self) -> &str {
        &self.dimension
    }

    /// The declared label set, sorted.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn noise_rho(&self) -> Option<f64> {
        self.noise_rho
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Label index of example `i`, `None` for UNKNOWN.
    pub fn group_of(&self, i: usize) -> Option<usize> {
        self.assigned[i]
    }

    pub fn label_of(&self, i: usize) -> Option<&str> {
        self.assigned[i].map(|g| self.labels[g].as_str())
    }

    pub fn group_indices(&self) -> &[Option<usize>] {
        &self.assigned
    }

    pub fn unknown_count(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_none()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ScoredExample, Option<&str>)> {
        self.examples()
            .iter()
            .zip(&self.assigned)
            .map(|(ex, g)| (ex, g.map(|g| self.labels[g].as_str())))
    }

    /// Examples of one group, in dataset order.
    pub fn group_members(&self, label: &str) -> Vec<&ScoredExample> {
        match self.label_index(label) {
            Some(g) => self
                .examples()
                .iter()
                .zip(&self.assigned)
                .filter(|(_, a)| **a == Some(g))
                .map(|(ex, _)| ex)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn labeled_count(&self, label: &str) -> usize {
        self.group_members(label).iter().filter(|e| e.is_labeled()).count()
    }

    /// Same grouping with replaced scores.
    pub fn with_scores(&self, scores: &[f64]) -> Result<Self, DataError> {
        Ok(Self {
            dataset: self.dataset.with_scores(scores)?,
            ..self.clone()
        })
    }

    /// Drops the group annotation, leaving only what a demographic-blind
    /// consumer may see.
    pub fn strip_labels(&self) -> Dataset {
        self.dataset.clone()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dataset: self.dataset.subset(indices),
            dimension: self.dimension.clone(),
            labels: self.labels.clone(),
            assigned: indices.iter().map(|&i| self.assigned[i]).collect(),
            noise_rho: self.noise_rho,
        }
    }

    /// Re-joins the same examples against a different assignment of the
    /// same dimension (e.g. a noised copy).
    pub fn regroup(&self, groups: &GroupAssignment) -> Self {
        join_groups(&self.dataset, groups)
    }
}
