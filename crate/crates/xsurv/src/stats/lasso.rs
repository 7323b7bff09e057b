//! L1-penalized Cox regression by proximal gradient (FISTA with backtracking)
//! over a lambda grid, with the working lambda chosen by 5-fold
//! cross-validated concordance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cox::CoxData, FeatureMatrix, StatsError};
use crate::survival::{concordance_index, SurvivalRecord};

#[derive(Debug, Clone)]
pub struct LassoResult {
    pub selected: Vec<String>,
    pub best_lambda: f64,
    /// `(lambda, coefficients)` for the full-data path, largest lambda first.
    pub path: Vec<(f64, Vec<f64>)>,
    /// Mean cross-validated C-index per lambda.
    pub cv_scores: Vec<f64>,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimize `-loglik(beta)/n + lambda * ||beta||_1` by FISTA, warm-started.
fn fit_penalized(data: &CoxData, lambda: f64, start: &[f64], max_iter: usize) -> Vec<f64> {
    let n = data.n_events.max(1) as f64;
    let p = data.n_features();
    let smooth = |b: &[f64]| -> (f64, Vec<f64>) {
        let (ll, grad) = data.loglik_grad(b);
        (-ll / n, grad.iter().map(|g| -g / n).collect())
    };
    let mut beta = start.to_vec();
    let mut momentum = beta.clone();
    let mut t_prev = 1.0f64;
    let mut step = 1.0f64;
    let (mut fy, mut gy) = smooth(&momentum);
    for _ in 0..max_iter {
        // Backtracking line search on the smooth part.
        let mut next;
        loop {
            next = (0..p)
                .map(|k| soft_threshold(momentum[k] - step * gy[k], step * lambda))
                .collect::<Vec<f64>>();
            let (f_next, _) = smooth(&next);
            let mut quad = fy;
            for k in 0..p {
                let d = next[k] - momentum[k];
                quad += gy[k] * d + d * d / (2.0 * step);
            }
            if f_next <= quad + 1e-12 {
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt());
        let accel = (t_prev - 1.0) / t_next;
        let mut moved = 0.0f64;
        let new_momentum: Vec<f64> = (0..p)
            .map(|k| {
                moved = moved.max((next[k] - beta[k]).abs());
                next[k] + accel * (next[k] - beta[k])
            })
            .collect();
        beta = next;
        momentum = new_momentum;
        t_prev = t_next;
        if moved < 1e-9 {
            break;
        }
        let (f, g) = smooth(&momentum);
        fy = f;
        gy = g;
    }
    beta
}

/// Geometric grid from the smallest all-zero lambda down by three decades.
pub fn default_lambda_grid(
    matrix: &FeatureMatrix,
    records: &[SurvivalRecord],
    len: usize,
) -> Result<Vec<f64>, StatsError> {
    let data = CoxData::new(matrix, records)?;
    let (_, grad) = data.loglik_grad(&vec![0.0; data.n_features()]);
    let n = data.n_events.max(1) as f64;
    let lambda_max = grad
        .iter()
        .map(|g| (g / n).abs())
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let lo = lambda_max * 1e-3;
    Ok((0..len)
        .map(|i| {
            let t = i as f64 / (len - 1).max(1) as f64;
            lambda_max * (lo / lambda_max).powf(t)
        })
        .collect())
}

/// Feature selection: fit the penalized path per fold (warm starts down the
/// grid), score each lambda by held-out C-index of the negated linear
/// predictor, refit the best lambda on all rows, and return the nonzero
/// coefficients' names.
pub fn lasso_select(
    matrix: &FeatureMatrix,
    records: &[SurvivalRecord],
    lambda_grid: &[f64],
) -> Result<LassoResult, StatsError> {
    if lambda_grid.is_empty() {
        return Err(StatsError::EmptyGrid);
    }
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let n = records.len();
    let folds = 5usize.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a550);
    order.shuffle(&mut rng);
    let mut cv_scores = vec![0.0; grid.len()];
    let mut cv_counts = vec![0usize; grid.len()];
    for f in 0..folds {
        let held: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % folds == f)
            .map(|(_, v)| v)
            .collect();
        let train: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % folds != f)
            .map(|(_, v)| v)
            .collect();
        let train_matrix = FeatureMatrix {
            names: matrix.names.clone(),
            rows: train.iter().map(|&i| matrix.rows[i].clone()).collect(),
        };
        let train_records: Vec<SurvivalRecord> = train.iter().map(|&i| records[i]).collect();
        let data = match CoxData::new(&train_matrix, &train_records) {
            Ok(d) => d,
            Err(StatsError::TooFewEvents(_)) => continue,
            Err(e) => return Err(e),
        };
        let held_records: Vec<SurvivalRecord> = held.iter().map(|&i| records[i]).collect();
        let mut beta = vec![0.0; matrix.n_cols()];
        for (gi, &lambda) in grid.iter().enumerate() {
            beta = fit_penalized(&data, lambda, &beta, 300);
            let scores: Vec<f64> = held
                .iter()
                .map(|&i| {
                    -matrix.rows[i]
                        .iter()
                        .zip(&beta)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect();
            if let Ok(c) = concordance_index(&scores, &held_records) {
                cv_scores[gi] += c;
                cv_counts[gi] += 1;
            }
        }
    }
    for (s, &c) in cv_scores.iter_mut().zip(&cv_counts) {
        if c > 0 {
            *s /= c as f64;
        } else {
            *s = 0.5;
        }
    }

    // Ties prefer the larger lambda (sparser model).
    let mut best = 0;
    for gi in 1..grid.len() {
        if cv_scores[gi] > cv_scores[best] + 1e-12 {
            best = gi;
        }
    }

    // Full-data path with warm starts; keep every lambda's coefficients.
    let data = CoxData::new(matrix, records)?;
    let mut path = Vec::with_capacity(grid.len());
    let mut beta = vec![0.0; matrix.n_cols()];
    for &lambda in &grid {
        let iters = if lambda == grid[best] { 2000 } else { 300 };
        beta = fit_penalized(&data, lambda, &beta, iters);
        path.push((lambda, beta.clone()));
    }
    let best_beta = &path[best].1;
    let selected = matrix
        .names
        .iter()
        .zip(best_beta)
        .filter(|(_, &b)| b.abs() > 1e-8)
        .map(|(n, _)| n.clone())
        .collect();
    Ok(LassoResult {
        selected,
        best_lambda: grid[best],
        path,
        cv_scores,
    })
}

/// Unpenalized fit through the same proximal-gradient route (used by the
/// `lambda == 0` equivalence check).
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn fit_unpenalized_fista(
    matrix: &FeatureMatrix,
    records: &[SurvivalRecord],
    max_iter: usize,
) -> Result<Vec<f64>, StatsError> {
    let data = CoxData::new(matrix, records)?;
    Ok(fit_penalized(&data, 0.0, &vec![0.0; data.n_features()], max_iter))
}
