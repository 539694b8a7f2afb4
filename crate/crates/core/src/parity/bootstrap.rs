use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gap_from_stats, require_group, BinStats, MetricError};
use crate::data::{BinningScheme, GroupedDataset};

pub const DEFAULT_RESAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub resamples: usize,
    pub seed: u64,
    pub standard_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Resample `i` of a bootstrap draws from its own ChaCha stream, so results
/// do not depend on thread scheduling.
pub(crate) fn resample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

pub(crate) fn summarize(values: &mut [f64], resamples: usize, seed: u64) -> Option<BootstrapSummary> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    values.sort_by(f64::total_cmp);
    let q = |p: f64| values[((p * (n - 1.0)).round() as usize).min(values.len() - 1)];
    Some(BootstrapSummary {
        resamples,
        seed,
        standard_error: var.sqrt(),
        ci_low: q(0.025),
        ci_high: q(0.975),
    })
}

/// Nonparametric bootstrap of the parity gap over the labeled examples of
/// the two groups. The binning is held fixed across resamples.
pub fn bootstrap_gap(
    gd: &GroupedDataset,
    b: &BinningScheme,
    a: &str,
    a2: &str,
    resamples: usize,
    seed: u64,
) -> Result<Option<BootstrapSummary>, MetricError> {
    let ia = require_group(gd, a)?;
    let ib = require_group(gd, a2)?;
    // (is_first, bin, score, outcome)
    let cells: Vec<(bool, usize, f64, f64)> = gd
        .examples()
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| {
            let g = gd.group_of(i)?;
            let y = ex.outcome_value()?;
            (g == ia || g == ib).then(|| (g == ia, b.bin_of(ex.score), ex.score, y))
        })
        .collect();
    if cells.is_empty() {
        return Err(MetricError::NoData { group: a.to_string() });
    }
    let mut gaps: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = resample_rng(seed, r);
            let mut first = vec![BinStats::default(); b.num_bins()];
            let mut second = vec![BinStats::default(); b.num_bins()];
            for _ in 0..cells.len() {
                let (is_first, bin, s, y) = cells[rng.random_range(0..cells.len())];
                if is_first {
                    first[bin].add(s, y);
                } else {
                    second[bin].add(s, y);
                }
            }
            gap_from_stats(gd.dimension(), (a, a2), &first, &second).ok().map(|r| r.gap)
        })
        .collect();
    Ok(summarize(&mut gaps, resamples, seed))
}
