//! Residual cohort trees: greedy, depth-limited partitions of the labeled
//! examples that separate high-error from low-error cohorts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureValue, GroupedDataset, ScoredExample, MISSING_CATEGORY, UNKNOWN_LABEL};

pub const DEFAULT_MAX_DEPTH: usize = 3;
/// Categorical features with at most this many levels get an exhaustive
/// subset search.
const EXHAUSTIVE_CATEGORIES: usize = 8;
const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{labeled} labeled examples, need at least {needed}")]
    InsufficientData { labeled: usize, needed: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl CohortError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InsufficientData { .. } => "INSUFFICIENT_DATA",
            Self::InvalidArgument(_) => "INVALID_ARGUMENT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortOptions {
    pub max_depth: usize,
    /// Defaults to 1% of the labeled examples.
    pub min_leaf: Option<usize>,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// `x <= threshold` goes left; missing values go left iff `missing_left`.
    Numeric { threshold: f64, missing_left: bool },
    /// Members of `left` go left.
    Categorical { left: BTreeSet<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: String,
    pub rule: SplitRule,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortNode {
    pub id: usize,
    pub depth: usize,
    pub count: usize,
    pub mean_residual: f64,
    pub group_counts: BTreeMap<String, usize>,
    pub split: Option<Split>,
    pub children: Option<(usize, usize)>,
    /// 1..L, ascending by mean residual. Leaves only.
    pub leaf_number: Option<usize>,
}

impl CohortNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTree {
    pub dimension: String,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features: Vec<String>,
    /// Node 0 is the root.
    pub nodes: Vec<CohortNode>,
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Num(f64),
    Cat(String),
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Numeric,
    Categorical,
}

struct Column {
    name: String,
    kind: Kind,
    values: Vec<Value>,
}

fn raw_value(ex: &ScoredExample, label: Option<&str>, feature: &str, dimension: &str) -> Value {
    if feature == dimension {
        return Value::Cat(label.unwrap_or(UNKNOWN_LABEL).to_string());
    }
    match ex.features.get(feature) {
        Some(FeatureValue::Num(x)) => Value::Num(*x),
        Some(FeatureValue::Cat(s)) => Value::Cat(s.clone()),
        None => Value::Missing,
    }
}

/// A feature is numeric when every present value is a number.
fn build_column(rows: &[(&ScoredExample, Option<&str>)], feature: &str, dimension: &str) -> Column {
    let raw: Vec<Value> = rows
        .iter()
        .map(|(ex, label)| raw_value(ex, *label, feature, dimension))
        .collect();
    let any_cat = raw.iter().any(|v| matches!(v, Value::Cat(_)));
    let any_num = raw.iter().any(|v| matches!(v, Value::Num(_)));
    if any_num && !any_cat {
        return Column {
            name: feature.to_string(),
            kind: Kind::Numeric,
            values: raw,
        };
    }
    let values = raw
        .into_iter()
        .map(|v| match v {
            Value::Num(x) => Value::Cat(x.to_string()),
            Value::Missing => Value::Cat(MISSING_CATEGORY.to_string()),
            cat => cat,
        })
        .collect();
    Column {
        name: feature.to_string(),
        kind: Kind::Categorical,
        values,
    }
}

fn split_score(sum_l: f64, n_l: usize, sum_r: f64, n_r: usize) -> f64 {
    let n = (n_l + n_r) as f64;
    let diff = (sum_l / n_l as f64 - sum_r / n_r as f64).abs();
    diff * n_l.min(n_r) as f64 / n
}

/// Deciles of the present values at the node, ascending and distinct.
fn percentile_thresholds(present: &mut [f64]) -> Vec<f64> {
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let mut out: Vec<f64> = (1..=9)
        .map(|p| present[((p as f64 / 10.0) * (n as f64 - 1.0)).round() as usize])
        .collect();
    out.dedup();
    out
}

fn best_numeric(col: &Column, idx: &[usize], residuals: &[f64], min_leaf: usize) -> Option<(SplitRule, f64)> {
    let mut present: Vec<f64> = idx
        .iter()
        .filter_map(|&i| match col.values[i] {
            Value::Num(x) => Some(x),
            _ => None,
        })
        .collect();
    if present.is_empty() {
        return None;
    }
    let (mut miss_sum, mut miss_n) = (0.0, 0usize);
    for &i in idx {
        if col.values[i] == Value::Missing {
            miss_sum += residuals[i];
            miss_n += 1;
        }
    }
    let total_sum: f64 = idx.iter().map(|&i| residuals[i]).sum();
    let mut best: Option<(SplitRule, f64)> = None;
    for threshold in percentile_thresholds(&mut present) {
        let (mut le_sum, mut le_n) = (0.0, 0usize);
        for &i in idx {
            if let Value::Num(x) = col.values[i] {
                if x <= threshold {
                    le_sum += residuals[i];
                    le_n += 1;
                }
            }
        }
        for missing_left in [false, true] {
            let (l_sum, l_n) = if missing_left {
                (le_sum + miss_sum, le_n + miss_n)
            } else {
                (le_sum, le_n)
            };
            let r_n = idx.len() - l_n;
            if l_n < min_leaf || r_n < min_leaf {
                continue;
            }
            let score = split_score(l_sum, l_n, total_sum - l_sum, r_n);
            if best.as_ref().is_none_or(|(_, s)| score > s + SCORE_EPS) {
                best = Some((SplitRule::Numeric { threshold, missing_left }, score));
            }
            if miss_n == 0 {
                break;
            }
        }
    }
    best
}

fn best_categorical(col: &Column, idx: &[usize], residuals: &[f64], min_leaf: usize) -> Option<(SplitRule, f64)> {
    let mut stats: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for &i in idx {
        if let Value::Cat(c) = &col.values[i] {
            let e = stats.entry(c.as_str()).or_default();
            e.0 += residuals[i];
            e.1 += 1;
        }
    }
    let cats: Vec<(&str, f64, usize)> = stats.into_iter().map(|(c, (s, n))| (c, s, n)).collect();
    if cats.len() < 2 {
        return None;
    }
    let total_sum: f64 = cats.iter().map(|c| c.1).sum();
    let total_n = idx.len();
    // candidate left sets as index lists into `cats`
    let candidates: Vec<Vec<usize>> = if cats.len() <= EXHAUSTIVE_CATEGORIES {
        // the first category always goes left, so each partition appears once
        let rest = cats.len() - 1;
        (0..(1u32 << rest) - 1)
            .map(|mask| {
                std::iter::once(0)
                    .chain((0..rest).filter(|b| mask & (1 << b) != 0).map(|b| b + 1))
                    .collect()
            })
            .collect()
    } else {
        let mut order: Vec<usize> = (0..cats.len()).collect();
        order.sort_by(|&a, &b| (cats[a].1 / cats[a].2 as f64).total_cmp(&(cats[b].1 / cats[b].2 as f64)));
        (1..cats.len()).map(|k| order[..k].to_vec()).collect()
    };
    let mut best: Option<(SplitRule, f64)> = None;
    for left in candidates {
        let l_sum: f64 = left.iter().map(|&c| cats[c].1).sum();
        let l_n: usize = left.iter().map(|&c| cats[c].2).sum();
        let r_n = total_n - l_n;
        if l_n < min_leaf || r_n < min_leaf {
            continue;
        }
        let score = split_score(l_sum, l_n, total_sum - l_sum, r_n);
        if best.as_ref().is_none_or(|(_, s)| score > s + SCORE_EPS) {
            let set = left.iter().map(|&c| cats[c].0.to_string()).collect();
            best = Some((SplitRule::Categorical { left: set }, score));
        }
    }
    best
}

fn goes_left(rule: &SplitRule, v: &Value) -> bool {
    match (rule, v) {
        (SplitRule::Numeric { threshold, .. }, Value::Num(x)) => x <= threshold,
        (SplitRule::Numeric { missing_left, .. }, _) => *missing_left,
        (SplitRule::Categorical { left }, Value::Cat(c)) => left.contains(c),
        (SplitRule::Categorical { left }, _) => left.contains(MISSING_CATEGORY),
    }
}

struct Builder<'a> {
    columns: Vec<Column>,
    residuals: Vec<f64>,
    labels: Vec<Option<&'a str>>,
    min_leaf: usize,
    max_depth: usize,
    nodes: Vec<CohortNode>,
}

impl Builder<'_> {
    fn node(&mut self, idx: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let mut group_counts = BTreeMap::new();
        for &i in idx {
            *group_counts
                .entry(self.labels[i].unwrap_or(UNKNOWN_LABEL).to_string())
                .or_insert(0) += 1;
        }
        let sum: f64 = idx.iter().map(|&i| self.residuals[i]).sum();
        self.nodes.push(CohortNode {
            id,
            depth,
            count: idx.len(),
            mean_residual: sum / idx.len() as f64,
            group_counts,
            split: None,
            children: None,
            leaf_number: None,
        });
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return id;
        }
        let Some((feature, rule, score)) = self.best_split(idx) else {
            return id;
        };
        let col = self.columns.iter().position(|c| c.name == feature).expect("known column");
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| goes_left(&rule, &self.columns[col].values[i]));
        let l = self.node(&left, depth + 1);
        let r = self.node(&right, depth + 1);
        let n = &mut self.nodes[id];
        n.split = Some(Split { feature, rule, score });
        n.children = Some((l, r));
        id
    }

    /// Features are visited in name order and a later candidate must win by
    /// a strict margin, which gives the lexicographic tie-break.
    fn best_split(&self, idx: &[usize]) -> Option<(String, SplitRule, f64)> {
        let per_feature: Vec<Option<(SplitRule, f64)>> = self
            .columns
            .par_iter()
            .map(|col| match col.kind {
                Kind::Numeric => best_numeric(col, idx, &self.residuals, self.min_leaf),
                Kind::Categorical => best_categorical(col, idx, &self.residuals, self.min_leaf),
            })
            .collect();
        let mut best: Option<(String, SplitRule, f64)> = None;
        for (col, found) in self.columns.iter().zip(per_feature) {
            if let Some((rule, score)) = found {
                if score > SCORE_EPS && best.as_ref().is_none_or(|b| score > b.2 + SCORE_EPS) {
                    best = Some((col.name.clone(), rule, score));
                }
            }
        }
        best
    }
}

/// Greedy residual tree over the labeled examples. A candidate feature equal
/// to the grouping dimension reads the group label.
pub fn build_error_tree(
    gd: &GroupedDataset,
    candidate_features: &[String],
    opts: CohortOptions,
) -> Result<CohortTree, CohortError> {
    let rows: Vec<(&ScoredExample, Option<&str>)> = gd
        .iter()
        .filter(|(ex, _)| ex.is_labeled())
        .collect();
    let labeled = rows.len();
    let min_leaf = opts.min_leaf.unwrap_or_else(|| (labeled / 100).max(1));
    if min_leaf == 0 {
        return Err(CohortError::InvalidArgument("min_leaf must be positive".into()));
    }
    if labeled == 0 || labeled < 2 * min_leaf {
        return Err(CohortError::InsufficientData {
            labeled,
            needed: (2 * min_leaf).max(1),
        });
    }
    let features: Vec<String> = candidate_features
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut builder = Builder {
        columns: features
            .iter()
            .map(|f| build_column(&rows, f, gd.dimension()))
            .collect(),
        residuals: rows
            .iter()
            .map(|(ex, _)| ex.outcome_value().expect("labeled") - ex.score)
            .collect(),
        labels: rows.iter().map(|(_, l)| *l).collect(),
        min_leaf,
        max_depth: opts.max_depth,
        nodes: Vec::new(),
    };
    let all: Vec<usize> = (0..labeled).collect();
    builder.node(&all, 0);
    let mut nodes = builder.nodes;
    let mut leaves: Vec<usize> = nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect();
    leaves.sort_by(|&a, &b| nodes[a].mean_residual.total_cmp(&nodes[b].mean_residual).then(a.cmp(&b)));
    for (k, id) in leaves.into_iter().enumerate() {
        nodes[id].leaf_number = Some(k + 1);
    }
    Ok(CohortTree {
        dimension: gd.dimension().to_string(),
        max_depth: opts.max_depth,
        min_leaf,
        features,
        nodes,
    })
}

impl CohortTree {
    pub fn root(&self) -> &CohortNode {
        &self.nodes[0]
    }

    /// Leaves in cohort-number order.
    pub fn leaves(&self) -> Vec<&CohortNode> {
        let mut out: Vec<&CohortNode> = self.nodes.iter().filter(|n| n.is_leaf()).collect();
        out.sort_by_key(|n| n.leaf_number);
        out
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node id of the leaf an example routes to.
    pub fn route(&self, ex: &ScoredExample, label: Option<&str>) -> usize {
        let mut id = 0;
        while let (Some(split), Some((l, r))) = (&self.nodes[id].split, self.nodes[id].children) {
            let raw = raw_value(ex, label, &split.feature, &self.dimension);
            let v = match (&split.rule, raw) {
                (SplitRule::Categorical { .. }, Value::Num(x)) => Value::Cat(x.to_string()),
                (_, v) => v,
            };
            id = if goes_left(&split.rule, &v) { l } else { r };
        }
        id
    }

    fn describe(&self, id: usize) -> String {
        let Some(parent) = self.nodes.iter().find(|n| n.children.is_some_and(|(l, r)| l == id || r == id)) else {
            return "all".to_string();
        };
        let split = parent.split.as_ref().expect("internal node has a split");
        let left = parent.children.expect("internal").0 == id;
        let mut text = match &split.rule {
            SplitRule::Numeric { threshold, .. } => {
                format!("{} {} {threshold}", split.feature, if left { "<=" } else { ">" })
            }
            SplitRule::Categorical { left: set } => {
                let set: Vec<&str> = set.iter().map(String::as_str).collect();
                format!("{} {} {{{}}}", split.feature, if left { "in" } else { "not in" }, set.join(","))
            }
        };
        if let Some(k) = self.nodes[id].leaf_number {
            text.push_str(&format!(" [cohort {k}]"));
        }
        text
    }

    pub fn export_sankey(&self) -> SankeyExport {
        SankeyExport {
            nodes: self
                .nodes
                .iter()
                .map(|n| SankeyNode {
                    id: n.id,
                    label: self.describe(n.id),
                    count: n.count,
                    mean_residual: n.mean_residual,
                })
                .collect(),
            links: self
                .nodes
                .iter()
                .filter_map(|n| n.children.map(|c| (n.id, c)))
                .flat_map(|(p, (l, r))| {
                    [l, r].map(|c| SankeyLink {
                        source: p,
                        target: c,
                        value: self.nodes[c].count,
                    })
                })
                .collect(),
            leaf_order: self.leaves().iter().map(|n| n.id).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyNode {
    pub id: usize,
    pub label: String,
    pub count: usize,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: usize,
    pub target: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyExport {
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
    /// Leaf node ids, cohort 1 first.
    pub leaf_order: Vec<usize>,
}

pub fn export_sankey(t: &CohortTree) -> SankeyExport {
    t.export_sankey()
}

impl fmt::Display for CohortTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn walk(t: &CohortTree, id: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let n = &t.nodes[id];
            writeln!(
                f,
                "{:indent$}{}  n={} mean_residual={:+.4}",
                "",
                t.describe(id),
                n.count,
                n.mean_residual,
                indent = 2 * n.depth
            )?;
            if let Some((l, r)) = n.children {
                walk(t, l, f)?;
                walk(t, r, f)?;
            }
            Ok(())
        }
        walk(self, 0, f)
    }
}
