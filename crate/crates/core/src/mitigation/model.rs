use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MitigationError;

pub const DEFAULT_L2: f64 = 1.0;
const MAX_ITER: usize = 50;
const TOL: f64 = 1e-8;

/// L2-regularized logistic regression on standardized columns, fitted by
/// Newton iterations. The intercept is not penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub coef: Vec<f64>,
    pub intercept: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticRegression {
    pub fn fit(rows: &[Vec<f64>], y: &[f64], l2: f64) -> Result<Self, MitigationError> {
        if rows.is_empty() || rows.len() != y.len() {
            return Err(MitigationError::ModelFit(format!("{} rows for {} outcomes", rows.len(), y.len())));
        }
        let p = rows[0].len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(MitigationError::ModelFit("ragged design matrix".into()));
        }
        let n = rows.len() as f64;
        let means: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scales: Vec<f64> = (0..p)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                std::iter::once(1.0)
                    .chain((0..p).map(|j| (r[j] - means[j]) / scales[j]))
                    .collect()
            })
            .collect();
        let d = p + 1;
        let mut beta = DVector::zeros(d);
        for _ in 0..MAX_ITER {
            let mut grad = DVector::zeros(d);
            let mut hess = DMatrix::zeros(d, d);
            for (zi, &yi) in z.iter().zip(y) {
                let eta: f64 = zi.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let mu = sigmoid(eta);
                let w = (mu * (1.0 - mu)).max(1e-10);
                for a in 0..d {
                    grad[a] += zi[a] * (yi - mu);
                    for b in a..d {
                        hess[(a, b)] += w * zi[a] * zi[b];
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    hess[(a, b)] = hess[(b, a)];
                }
            }
            for a in 1..d {
                grad[a] -= l2 * beta[a];
                hess[(a, a)] += l2;
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| MitigationError::ModelFit("Hessian not positive definite".into()))?
                .solve(&grad);
            beta += &step;
            if step.amax() < TOL {
                break;
            }
        }
        Ok(Self {
            means,
            scales,
            coef: beta.iter().skip(1).copied().collect(),
            intercept: beta[0],
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let eta: f64 = self.intercept
            + row
                .iter()
                .zip(&self.coef)
                .enumerate()
                .map(|(j, (x, c))| c * (x - self.means[j]) / self.scales[j])
                .sum::<f64>();
        sigmoid(eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut rows, mut y) = (Vec::new(), Vec::new());
        for _ in 0..20_000 {
            let x: f64 = rng.random_range(-1.0..1.0);
            rows.push(vec![x]);
            y.push(if rng.random::<f64>() < sigmoid(-0.5 + 2.0 * x) { 1.0 } else { 0.0 });
        }
        let m = LogisticRegression::fit(&rows, &y, 1e-6).unwrap();
        // back to raw-x units
        let slope = m.coef[0] / m.scales[0];
        let intercept = m.intercept - slope * m.means[0];
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
        assert!((intercept + 0.5).abs() < 0.05, "intercept {intercept}");
    }

    #[test]
    fn constant_column_is_harmless() {
        let rows = vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
        let m = LogisticRegression::fit(&rows, &[1.0, 0.0, 1.0, 1.0], DEFAULT_L2).unwrap();
        assert!((m.predict(&[1.0]) - 0.75).abs() < 1e-6);
    }
}
