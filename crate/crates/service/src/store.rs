use std::collections::BTreeMap;
use std::path::Path;

use eqtreat_core::data::{parse_group_jsonl, GroupAssignment};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessPolicy {
    pub aggregate_only: bool,
    pub suppression_threshold: usize,
}

/// Demographic labels held behind the service boundary. Immutable once
/// loaded; nothing outside this crate can read a member's label.
#[derive(Debug)]
pub struct DemographicStore {
    assignments: BTreeMap<String, GroupAssignment>,
    digest: String,
    policy: AccessPolicy,
}

impl DemographicStore {
    pub fn load(path: &Path, suppression_threshold: usize) -> Result<Self, ServiceError> {
        let bytes = std::fs::read(path).map_err(|source| ServiceError::Io {
            context: format!("reading store {}", path.display()),
            source,
        })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| ServiceError::InvalidRequest(format!("store {} is not UTF-8", path.display())))?;
        Self::build(parse_group_jsonl(&text)?, hex::encode(Sha256::digest(&bytes)), suppression_threshold)
    }

    /// The digest is taken over the canonical JSONL of each assignment.
    pub fn from_assignments(assignments: Vec<GroupAssignment>, suppression_threshold: usize) -> Result<Self, ServiceError> {
        let mut h = Sha256::new();
        for g in &assignments {
            h.update(g.to_jsonl().as_bytes());
        }
        Self::build(assignments, hex::encode(h.finalize()), suppression_threshold)
    }

    fn build(assignments: Vec<GroupAssignment>, digest: String, suppression_threshold: usize) -> Result<Self, ServiceError> {
        let mut map = BTreeMap::new();
        for g in assignments {
            let dim = g.dimension().to_string();
            if map.insert(dim.clone(), g).is_some() {
                return Err(ServiceError::InvalidRequest(format!("store declares dimension `{dim}` twice")));
            }
        }
        Ok(Self {
            assignments: map,
            digest,
            policy: AccessPolicy {
                aggregate_only: true,
                suppression_threshold,
            },
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn policy(&self) -> AccessPolicy {
        self.policy
    }

    pub fn dimensions(&self) -> Vec<String> {
        self.assignments.keys().cloned().collect()
    }

    pub(crate) fn assignment(&self, dimension: &str) -> Result<&GroupAssignment, ServiceError> {
        self.assignments
            .get(dimension)
            .ok_or_else(|| ServiceError::UnknownDimension(dimension.to_string()))
    }

    pub(crate) fn assignments(&self) -> impl Iterator<Item = &GroupAssignment> {
        self.assignments.values()
    }
}
