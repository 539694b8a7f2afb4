//! Measurement over privacy-noised group labels.
//!
//! Labels are noised with k-ary randomized response: the true label is kept
//! with probability `1 − rho`, otherwise replaced by one of the other `k − 1`
//! labels uniformly. The transition matrix `T` is known, so for any
//! per-example additive aggregate the expected observed totals satisfy
//! `E[observed] = Tᵀ · true`, and solving that system per bin gives unbiased
//! estimates of the true-group counts and sums.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinningScheme, DataError, GroupAssignment, GroupedDataset};
use crate::parity::{
    calibration_curve_from_stats, gap_from_stats, group_bin_stats, BinStats, CalibrationCurve, DpAnnotation,
    GroupDistribution, MetricError, ParityGapReport, ReportFlag,
};

pub const MECHANISM: &str = "randomized_response";

/// Default ceiling on `cond(T)` before de-noising is refused.
pub const DEFAULT_MAX_CONDITION: f64 = 1e3;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("group labels are already noised (rho = {0})")]
    DoubleNoise(f64),
    #[error("invalid noise channel: {0}")]
    InvalidChannel(String),
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("grouping carries noise_rho {found:?} but the channel has rho {expected}")]
    RhoMismatch { expected: f64, found: Option<f64> },
    #[error("noise channel too ill-conditioned to invert (condition number {condition_number:.3e})")]
    NumericallyUnstable { condition_number: f64 },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl DpError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::DoubleNoise(_) => "DOUBLE_NOISE",
            Self::InvalidChannel(_) => "INVALID_CHANNEL",
            Self::LabelMismatch(_) => "LABEL_MISMATCH",
            Self::RhoMismatch { .. } => "RHO_MISMATCH",
            Self::NumericallyUnstable { .. } => "NUMERICALLY_UNSTABLE",
            Self::Metric(e) => e.code(),
            Self::Data(e) => e.code(),
        }
    }
}

/// k-ary randomized response over an ordered label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelRepr")]
pub struct NoiseChannel {
    labels: Vec<String>,
    rho: f64,
}

#[derive(Deserialize)]
struct ChannelRepr {
    labels: Vec<String>,
    rho: f64,
}

impl TryFrom<ChannelRepr> for NoiseChannel {
    type Error = DpError;

    fn try_from(r: ChannelRepr) -> Result<Self, Self::Error> {
        NoiseChannel::new(r.labels, r.rho)
    }
}

impl NoiseChannel {
    pub fn new<I, S>(labels: I, rho: f64) -> Result<Self, DpError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let distinct: BTreeSet<&String> = labels.iter().collect();
        if labels.len() < 2 || distinct.len() != labels.len() {
            return Err(DpError::InvalidChannel(
                "need at least two distinct labels".into(),
            ));
        }
        let bound = Self::rho_bound(labels.len());
        if !(0.0..bound).contains(&rho) {
            return Err(DpError::InvalidChannel(format!("rho {rho} outside [0, {bound})")));
        }
        Ok(Self { labels, rho })
    }

    /// `(k − 1) / k`: at this flip rate the report carries no information.
    pub fn rho_bound(k: usize) -> f64 {
        (k as f64 - 1.0) / k as f64
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Row-stochastic: entry `(i, j)` is P(report j | true i).
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let off = self.rho / (k as f64 - 1.0);
        DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 - self.rho } else { off })
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.transition_matrix().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// The single channel equivalent to applying `self` and then `next`.
    pub fn compose(&self, next: &NoiseChannel) -> Result<NoiseChannel, DpError> {
        if self.labels != next.labels {
            return Err(DpError::LabelMismatch("composed channels need the same labels".into()));
        }
        let k = self.k() as f64;
        let keep = (1.0 - self.rho) * (1.0 - next.rho) + self.rho * next.rho / (k - 1.0);
        NoiseChannel::new(self.labels.clone(), 1.0 - keep)
    }

    fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Applies randomized response to every member independently. Members are
/// visited in id order, so the output depends only on the input and `seed`.
pub fn randomize(g: &GroupAssignment, ch: &NoiseChannel, seed: u64) -> Result<GroupAssignment, DpError> {
    if let Some(rho) = g.noise_rho() {
        return Err(DpError::DoubleNoise(rho));
    }
    if let Some(stray) = g.label_set().iter().find(|l| ch.index_of(l).is_none()) {
        return Err(DpError::LabelMismatch(format!("label `{stray}` not in the channel")));
    }
    let k = ch.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = BTreeMap::new();
    for (member, label) in g.values() {
        let truth = ch.index_of(label).expect("checked above");
        let reported = if rng.random::<f64>() < ch.rho {
            let other = rng.random_range(0..k - 1);
            if other >= truth {
                other + 1
            } else {
                other
            }
        } else {
            truth
        };
        values.insert(member.clone(), ch.labels[reported].clone());
    }
    let label_set = ch.labels.iter().cloned().collect();
    Ok(GroupAssignment::new(g.dimension(), label_set, values, Some(ch.rho))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasOptions {
    pub max_condition: f64,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        Self {
            max_condition: DEFAULT_MAX_CONDITION,
        }
    }
}

/// De-noised per-group, per-bin aggregates, in channel label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedStats {
    pub labels: Vec<String>,
    pub per_group: Vec<Vec<BinStats>>,
    pub clipped: bool,
    pub condition_number: f64,
}

impl DebiasedStats {
    pub fn group(&self, label: &str) -> Option<&[BinStats]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.per_group[i].as_slice())
    }
}

fn check_grouping(noised: &GroupedDataset, ch: &NoiseChannel) -> Result<Vec<usize>, DpError> {
    let found = noised.noise_rho();
    if (found.unwrap_or(0.0) - ch.rho).abs() > 1e-12 {
        return Err(DpError::RhoMismatch { expected: ch.rho, found });
    }
    if noised.labels().len() != ch.k() {
        return Err(DpError::LabelMismatch(format!(
            "grouping has {} labels, channel has {}",
            noised.labels().len(),
            ch.k()
        )));
    }
    noised
        .labels()
        .iter()
        .map(|l| {
            ch.index_of(l)
                .ok_or_else(|| DpError::LabelMismatch(format!("label `{l}` not in the channel")))
        })
        .collect()
}

/// Solves `Tᵀ X = observed` column by column; rows of `observed` follow the
/// channel's label order.
fn invert(ch: &NoiseChannel, observed: DMatrix<f64>, opts: &DebiasOptions) -> Result<(DMatrix<f64>, f64), DpError> {
    let condition_number = ch.condition_number();
    if !condition_number.is_finite() || condition_number > opts.max_condition {
        return Err(DpError::NumericallyUnstable { condition_number });
    }
    if ch.rho == 0.0 {
        return Ok((observed, condition_number));
    }
    let solved = ch
        .transition_matrix()
        .transpose()
        .lu()
        .solve(&observed)
        .ok_or(DpError::NumericallyUnstable { condition_number })?;
    Ok((solved, condition_number))
}

/// Unbiased estimates of true-group labeled counts, outcome sums and score
/// sums per bin. Negative count estimates are clipped to zero and flagged.
pub fn debias_group_stats(
    noised: &GroupedDataset,
    ch: &NoiseChannel,
    b: &BinningScheme,
    opts: &DebiasOptions,
) -> Result<DebiasedStats, DpError> {
    let to_channel = check_grouping(noised, ch)?;
    let observed = group_bin_stats(noised, b);
    let k = ch.k();
    let bins = b.num_bins();
    // columns: [counts | outcome sums | score sums] per bin
    let mut obs = DMatrix::zeros(k, 3 * bins);
    for (g, stats) in observed.iter().enumerate() {
        let row = to_channel[g];
        for (bin, s) in stats.iter().enumerate() {
            obs[(row, bin)] = s.count;
            obs[(row, bins + bin)] = s.outcome_sum;
            obs[(row, 2 * bins + bin)] = s.score_sum;
        }
    }
    let (est, condition_number) = invert(ch, obs, opts)?;
    let mut clipped = false;
    let per_group = (0..k)
        .map(|row| {
            (0..bins)
                .map(|bin| {
                    let mut s = BinStats {
                        count: est[(row, bin)],
                        outcome_sum: est[(row, bins + bin)],
                        score_sum: est[(row, 2 * bins + bin)],
                    };
                    if s.count < 0.0 || s.outcome_sum < 0.0 || s.score_sum < 0.0 {
                        clipped = true;
                        if s.count < 0.0 {
                            s = BinStats::default();
                        } else {
                            s.outcome_sum = s.outcome_sum.max(0.0);
                            s.score_sum = s.score_sum.max(0.0);
                        }
                    }
                    s
                })
                .collect()
        })
        .collect();
    Ok(DebiasedStats {
        labels: ch.labels.clone(),
        per_group,
        clipped,
        condition_number,
    })
}

fn annotate(report: &mut ParityGapReport, ch: &NoiseChannel, clipped: bool) {
    report.flags.push(ReportFlag::DpEstimated);
    if clipped {
        report.flags.push(ReportFlag::Clipped);
    }
    report.dp = Some(DpAnnotation {
        rho: ch.rho,
        mechanism: MECHANISM.to_string(),
    });
}

/// Parity gap between two true groups, estimated from noised labels.
pub fn dp_parity_gap(
    noised: &GroupedDataset,
    ch: &NoiseChannel,
    b: &BinningScheme,
    a: &str,
    a2: &str,
    opts: &DebiasOptions,
) -> Result<ParityGapReport, DpError> {
    let stats = debias_group_stats(noised, ch, b, opts)?;
    let missing = |l: &str| MetricError::UnknownGroup { group: l.to_string() };
    let first = stats.group(a).ok_or_else(|| missing(a))?;
    let second = stats.group(a2).ok_or_else(|| missing(a2))?;
    let mut report = gap_from_stats(noised.dimension(), (a, a2), first, second)?;
    annotate(&mut report, ch, stats.clipped);
    Ok(report)
}

pub fn dp_calibration_curve(
    noised: &GroupedDataset,
    ch: &NoiseChannel,
    b: &BinningScheme,
    group: &str,
    opts: &DebiasOptions,
) -> Result<CalibrationCurve, DpError> {
    let stats = debias_group_stats(noised, ch, b, opts)?;
    let s = stats.group(group).ok_or_else(|| MetricError::UnknownGroup {
        group: group.to_string(),
    })?;
    Ok(calibration_curve_from_stats(group, s)?)
}

/// De-noised label shares over all examples (labeled or not).
pub fn dp_group_distribution(
    noised: &GroupedDataset,
    ch: &NoiseChannel,
    opts: &DebiasOptions,
) -> Result<GroupDistribution, DpError> {
    let to_channel = check_grouping(noised, ch)?;
    let mut obs = DMatrix::zeros(ch.k(), 1);
    for g in noised.group_indices().iter().flatten() {
        obs[(to_channel[*g], 0)] += 1.0;
    }
    let (est, _) = invert(ch, obs, opts)?;
    let counts = ch
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), est[(i, 0)].max(0.0)))
        .collect();
    Ok(GroupDistribution::from_counts(
        noised.dimension(),
        counts,
        noised.unknown_count() as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{join_groups, Dataset, ScoredExample};

    fn binary(rho: f64) -> NoiseChannel {
        NoiseChannel::new(["A", "B"], rho).unwrap()
    }

    #[test]
    fn channel_bounds() {
        assert!(NoiseChannel::new(["A", "B"], 0.5).is_err());
        assert!(NoiseChannel::new(["A", "B", "C"], 0.6).is_ok());
        assert!(NoiseChannel::new(["A", "A"], 0.1).is_err());
        assert!(NoiseChannel::new(["A"], 0.0).is_err());
        let m = NoiseChannel::new(["A", "B", "C"], 0.3).unwrap().transition_matrix();
        for r in 0..3 {
            assert!((m.row(r).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_json_validates() {
        let ch: NoiseChannel = serde_json::from_str(r#"{"labels":["F","M"],"rho":0.2}"#).unwrap();
        assert_eq!(ch.rho(), 0.2);
        assert!(serde_json::from_str::<NoiseChannel>(r#"{"labels":["F","M"],"rho":0.7}"#).is_err());
    }

    #[test]
    fn binary_condition_number() {
        // eigenvalues 1 and 1 − 2ρ
        let ch = binary(0.3);
        assert!((ch.condition_number() - 1.0 / 0.4).abs() < 1e-9);
    }

    #[test]
    fn composition_matches_matrix_product() {
        for (r1, r2, labels) in [(0.1, 0.2, 2usize), (0.3, 0.25, 3), (0.05, 0.6, 4)] {
            let names: Vec<String> = (0..labels).map(|i| format!("g{i}")).collect();
            let c1 = NoiseChannel::new(names.clone(), r1).unwrap();
            let c2 = NoiseChannel::new(names, r2).unwrap();
            let product = c1.transition_matrix() * c2.transition_matrix();
            let composed = c1.compose(&c2).unwrap().transition_matrix();
            assert!((product - composed).abs().max() < 1e-14);
        }
    }

    #[test]
    fn randomize_rejects_double_noise() {
        let g = GroupAssignment::from_pairs("d", [("m1", "A"), ("m2", "B")]);
        let once = randomize(&g, &binary(0.2), 1).unwrap();
        assert_eq!(randomize(&once, &binary(0.2), 2).unwrap_err().code(), "DOUBLE_NOISE");
    }

    #[test]
    fn exact_two_by_two_inversion() {
        // True per-bin: A has 100 examples at rate 0.8, B 100 at rate 0.2.
        // Expected observed under rho=0.3: count_A = 0.7*100 + 0.3*100,
        // sum_A = 0.7*80 + 0.3*20, and symmetrically for B.
        let ch = binary(0.3);
        let obs = DMatrix::from_row_slice(2, 2, &[100.0, 0.7 * 80.0 + 0.3 * 20.0, 100.0, 0.3 * 80.0 + 0.7 * 20.0]);
        let (est, _) = invert(&ch, obs, &DebiasOptions::default()).unwrap();
        assert!((est[(0, 1)] / est[(0, 0)] - 0.8).abs() < 1e-12);
        assert!((est[(1, 1)] / est[(1, 0)] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ill_conditioned_channel_rejected() {
        let ch = binary(0.4999);
        let examples = vec![ScoredExample::new("m1", 0.5, Some(true)), ScoredExample::new("m2", 0.5, Some(false))];
        let d = Dataset::new(examples, "t").unwrap();
        let g = GroupAssignment::from_pairs("d", [("m1", "A"), ("m2", "B")]);
        let noised = randomize(&g, &ch, 3).unwrap();
        let gd = join_groups(&d, &noised);
        let b = BinningScheme::equal_width(2).unwrap();
        let err = debias_group_stats(&gd, &ch, &b, &DebiasOptions::default()).unwrap_err();
        assert_eq!(err.code(), "NUMERICALLY_UNSTABLE");
    }

    #[test]
    fn rho_mismatch_rejected() {
        let examples = vec![ScoredExample::new("m1", 0.5, Some(true))];
        let d = Dataset::new(examples, "t").unwrap();
        let g = GroupAssignment::from_pairs("d", [("m1", "A"), ("m2", "B")]);
        let noised = randomize(&g, &binary(0.2), 3).unwrap();
        let gd = join_groups(&d, &noised);
        let b = BinningScheme::equal_width(2).unwrap();
        let err = debias_group_stats(&gd, &binary(0.3), &b, &DebiasOptions::default()).unwrap_err();
        assert_eq!(err.code(), "RHO_MISMATCH");
    }
}
