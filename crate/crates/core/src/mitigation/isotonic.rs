use serde::{Deserialize, Serialize};

use super::MitigationError;

/// Nondecreasing piecewise-linear map over `[0, 1]`.
///
/// Knots sit at the weighted centroid of each pool-adjacent-violators
/// block, valued at the block mean. Between knots the map interpolates
/// linearly; outside the knot range it is flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    knots: Vec<(f64, f64)>,
}

impl IsotonicMap {
    pub fn identity() -> Self {
        Self {
            knots: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self, MitigationError> {
        if knots.is_empty() {
            return Err(MitigationError::InvalidArgument("isotonic map needs a knot".into()));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if knots.iter().any(|&(x, y)| !in_unit(x) || !in_unit(y)) {
            return Err(MitigationError::InvalidArgument("knots must lie in [0, 1]".into()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1) {
            return Err(MitigationError::InvalidArgument(
                "knots must be strictly increasing in x and nondecreasing in y".into(),
            ));
        }
        Ok(Self { knots })
    }

    /// Weighted least-squares monotone fit of `ys` on `xs`.
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self, MitigationError> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(MitigationError::InvalidArgument(format!(
                "isotonic fit needs matching non-empty inputs ({} x, {} y)",
                xs.len(),
                ys.len()
            )));
        }
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));

        // (weight, Σy, Σx); distinct x values start as their own block
        let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
        let mut last_x = f64::NAN;
        for &i in &order {
            if xs[i] == last_x {
                let b = blocks.last_mut().expect("block for repeated x");
                b.0 += 1.0;
                b.1 += ys[i];
                b.2 += xs[i];
                continue;
            }
            last_x = xs[i];
            blocks.push((1.0, ys[i], xs[i]));
        }
        let mut pooled: Vec<(f64, f64, f64)> = Vec::with_capacity(blocks.len());
        for b in blocks {
            pooled.push(b);
            while pooled.len() > 1 {
                let n = pooled.len();
                let (prev, cur) = (pooled[n - 2], pooled[n - 1]);
                if prev.1 / prev.0 < cur.1 / cur.0 {
                    break;
                }
                pooled.pop();
                let merged = pooled.last_mut().expect("at least one block");
                merged.0 += cur.0;
                merged.1 += cur.1;
                merged.2 += cur.2;
            }
        }
        let knots = pooled
            .into_iter()
            .map(|(w, sy, sx)| ((sx / w).clamp(0.0, 1.0), (sy / w).clamp(0.0, 1.0)))
            .collect();
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn apply(&self, x: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|&(kx, _)| kx <= x);
        if i == 0 {
            return k[0].1;
        }
        if i == k.len() {
            return k[k.len() - 1].1;
        }
        let ((x0, y0), (x1, y1)) = (k[i - 1], k[i]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}
