use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinKind {
    EqualWidth,
    EqualMass,
}

impl FromStr for BinKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "equal_width" => Ok(Self::EqualWidth),
            "equal_mass" => Ok(Self::EqualMass),
            other => Err(format!("unknown bin kind `{other}` (expected equal-width or equal-mass)")),
        }
    }
}

impl fmt::Display for BinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EqualWidth => "equal_width",
            Self::EqualMass => "equal_mass",
        })
    }
}

/// Partition of `[0, 1]` into half-open bins `[lo, hi)`, the last bin closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinningRepr")]
pub struct BinningScheme {
    kind: BinKind,
    edges: Vec<f64>,
}

#[derive(Deserialize)]
struct BinningRepr {
    kind: BinKind,
    edges: Vec<f64>,
}

impl TryFrom<BinningRepr> for BinningScheme {
    type Error = DataError;

    fn try_from(r: BinningRepr) -> Result<Self, Self::Error> {
        BinningScheme::from_edges(r.kind, r.edges)
    }
}

impl BinningScheme {
    pub const DEFAULT_BINS: usize = 10;

    pub fn from_edges(kind: BinKind, edges: Vec<f64>) -> Result<Self, DataError> {
        if edges.len() < 2 {
            return Err(DataError::InvalidBinning("need at least two edges".into()));
        }
        if edges[0] != 0.0 || *edges.last().unwrap() != 1.0 {
            return Err(DataError::InvalidBinning("edges must start at 0 and end at 1".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(DataError::InvalidBinning("edges must be strictly increasing".into()));
        }
        Ok(Self { kind, edges })
    }

    pub fn equal_width(num_bins: usize) -> Result<Self, DataError> {
        if num_bins == 0 {
            return Err(DataError::InvalidBinning("num_bins must be positive".into()));
        }
        let mut edges: Vec<f64> = (0..num_bins).map(|i| i as f64 / num_bins as f64).collect();
        edges.push(1.0);
        Self::from_edges(BinKind::EqualWidth, edges)
    }

    /// Quantile edges placed midway between neighbouring sorted scores, so
    /// distinct scores split into bins of `n / num_bins` each. Tied scores
    /// can merge bins; the result then has fewer than `num_bins` bins.
    pub fn equal_mass(scores: &[f64], num_bins: usize) -> Result<Self, DataError> {
        if num_bins == 0 {
            return Err(DataError::InvalidBinning("num_bins must be positive".into()));
        }
        if scores.is_empty() {
            return Err(DataError::InvalidBinning("equal-mass bins need at least one score".into()));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges = vec![0.0];
        for i in 1..num_bins {
            let j = ((i * n) as f64 / num_bins as f64).round() as usize;
            if j == 0 || j >= n {
                continue;
            }
            let edge = 0.5 * (sorted[j - 1] + sorted[j]);
            if edge > *edges.last().unwrap() && edge < 1.0 {
                edges.push(edge);
            }
        }
        edges.push(1.0);
        Self::from_edges(BinKind::EqualMass, edges)
    }

    pub fn build(kind: BinKind, num_bins: usize, scores: &[f64]) -> Result<Self, DataError> {
        match kind {
            BinKind::EqualWidth => Self::equal_width(num_bins),
            BinKind::EqualMass => Self::equal_mass(scores, num_bins),
        }
    }

    pub fn for_dataset(d: &Dataset, kind: BinKind, num_bins: usize) -> Result<Self, DataError> {
        Self::build(kind, num_bins, &d.scores())
    }

    pub fn kind(&self) -> BinKind {
        self.kind
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin containing `score`. Scores must lie in `[0, 1]`.
    pub fn bin_of(&self, score: f64) -> usize {
        debug_assert!((0.0..=1.0).contains(&score));
        let upper = self.edges.partition_point(|&e| e <= score);
        upper.saturating_sub(1).min(self.num_bins() - 1)
    }
}

pub fn bin_scores(d: &Dataset, b: &BinningScheme) -> Vec<usize> {
    d.examples().iter().map(|e| b.bin_of(e.score)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_rules() {
        let b = BinningScheme::equal_width(10).unwrap();
        assert_eq!(b.bin_of(0.0), 0);
        assert_eq!(b.bin_of(1.0), 9);
        assert_eq!(b.bin_of(0.1), 1);
        assert_eq!(b.bin_of(0.0999), 0);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(BinningScheme::from_edges(BinKind::EqualWidth, vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(BinningScheme::from_edges(BinKind::EqualWidth, vec![0.1, 1.0]).is_err());
        assert!(BinningScheme::equal_width(0).is_err());
        assert!(BinningScheme::equal_mass(&[], 4).is_err());
    }

    #[test]
    fn ties_collapse_equal_mass_bins() {
        let b = BinningScheme::equal_mass(&[0.3; 50], 10).unwrap();
        assert!(b.num_bins() <= 2);
        assert_eq!(b.bin_of(0.3), b.num_bins() - 1);
    }

    #[test]
    fn deserialize_validates() {
        let bad = r#"{"kind":"equal_width","edges":[0.0,0.7,0.2,1.0]}"#;
        assert!(serde_json::from_str::<BinningScheme>(bad).is_err());
        let good = r#"{"kind":"equal_mass","edges":[0.0,0.2,1.0]}"#;
        assert_eq!(serde_json::from_str::<BinningScheme>(good).unwrap().num_bins(), 2);
    }

    proptest! {
        #[test]
        fn every_score_maps_to_one_containing_bin(
            scores in proptest::collection::vec(0.0f64..=1.0, 1..200),
            bins in 1usize..25,
            mass in any::<bool>(),
        ) {
            let kind = if mass { BinKind::EqualMass } else { BinKind::EqualWidth };
            let b = BinningScheme::build(kind, bins, &scores).unwrap();
            let mut masses = vec![0usize; b.num_bins()];
            for &s in &scores {
                let i = b.bin_of(s);
                let (lo, hi) = (b.edges()[i], b.edges()[i + 1]);
                let last = i + 1 == b.num_bins();
                prop_assert!(lo <= s && (s < hi || (last && s <= hi)));
                masses[i] += 1;
            }
            prop_assert_eq!(masses.iter().sum::<usize>(), scores.len());
        }
    }
}
