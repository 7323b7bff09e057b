//! Cox proportional-hazards regression: Breslow partial likelihood maximized
//! by Newton-Raphson with step-halving, plus univariate/multivariate Wald
//! screening.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{FeatureMatrix, StatsError};
use crate::survival::SurvivalRecord;

/// Precomputed event ordering shared by the Newton fit and the LASSO path:
/// rows sorted by descending time so risk sets accumulate incrementally, with
/// tied times grouped (Breslow handling).
pub struct CoxData {
    /// Row-major covariates.
    x: Vec<f64>,
    p: usize,
    /// Row indices grouped by equal time, longest-surviving first.
    groups: Vec<Vec<usize>>,
    events: Vec<bool>,
    pub n_events: usize,
}

impl CoxData {
    pub fn new(matrix: &FeatureMatrix, records: &[SurvivalRecord]) -> Result<Self, StatsError> {
        if matrix.n_rows() != records.len() {
            return Err(StatsError::Misaligned(format!(
                "{} feature rows vs {} records",
                matrix.n_rows(),
                records.len()
            )));
        }
        let n_events = records.iter().filter(|r| !r.censored).count();
        if n_events < 2 {
            return Err(StatsError::TooFewEvents(n_events));
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[b].time_days.partial_cmp(&records[a].time_days).unwrap());
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for &i in &order {
            match groups.last_mut() {
                Some(g) if records[g[0]].time_days == records[i].time_days => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        let p = matrix.n_cols();
        let mut x = Vec::with_capacity(records.len() * p);
        for row in &matrix.rows {
            x.extend_from_slice(row);
        }
        Ok(CoxData {
            x,
            p,
            groups,
            events: records.iter().map(|r| !r.censored).collect(),
            n_events,
        })
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Breslow log partial likelihood and its gradient at `beta`.
    pub fn loglik_grad(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let p = self.p;
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut ll = 0.0;
        let mut grad = vec![0.0; p];
        for group in &self.groups {
            for &i in group {
                let xi = self.row(i);
                let lp: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
                let w = lp.exp();
                s0 += w;
                for (s, &v) in s1.iter_mut().zip(xi) {
                    *s += w * v;
                }
            }
            for &i in group {
                if !self.events[i] {
                    continue;
                }
                let xi = self.row(i);
                let lp: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
                ll += lp - s0.ln();
                for k in 0..p {
                    grad[k] += xi[k] - s1[k] / s0;
                }
            }
        }
        (ll, grad)
    }

    /// Log likelihood, gradient, and observed information matrix at `beta`.
    fn loglik_grad_info(&self, beta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p;
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for group in &self.groups {
            for &i in group {
                let xi = self.row(i);
                let lp: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
                let w = lp.exp();
                s0 += w;
                for k in 0..p {
                    s1[k] += w * xi[k];
                    for l in 0..p {
                        s2[k * p + l] += w * xi[k] * xi[l];
                    }
                }
            }
            for &i in group {
                if !self.events[i] {
                    continue;
                }
                let xi = self.row(i);
                let lp: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
                ll += lp - s0.ln();
                for k in 0..p {
                    let mk = s1[k] / s0;
                    grad[k] += xi[k] - mk;
                    for l in 0..p {
                        info[(k, l)] += s2[k * p + l] / s0 - mk * s1[l] / s0;
                    }
                }
            }
        }
        (ll, grad, info)
    }

    /// Linear predictor per row at `beta`.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.events.len())
            .map(|i| self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CoxModel {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Set when a singular information matrix forced a ridge-stabilized fit.
    pub ridged: bool,
    /// Max-norm of the score at the returned coefficients.
    pub grad_norm: f64,
}

const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const RIDGE: f64 = 1e-6;

/// Maximize the Breslow partial likelihood by Newton-Raphson with
/// step-halving. A singular information matrix triggers one ridge-stabilized
/// retry, flagged on the result.
pub fn cox_fit(matrix: &FeatureMatrix, records: &[SurvivalRecord]) -> Result<CoxModel, StatsError> {
    let data = CoxData::new(matrix, records)?;
    let p = data.n_features();
    let mut beta = vec![0.0; p];
    let mut ridged = false;
    let (mut ll, mut grad, mut info) = data.loglik_grad_info(&beta);
    let mut converged = false;
    for _ in 0..MAX_ITER {
        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        let mut stabilized = info.clone();
        let step = loop {
            match stabilized.clone().cholesky() {
                Some(ch) => break ch.solve(&grad),
                None => {
                    ridged = true;
                    for k in 0..p {
                        stabilized[(k, k)] += RIDGE + stabilized[(k, k)].abs() * RIDGE;
                    }
                }
            }
        };
        // Step-halving guarantees ascent; the tolerance is relative to the
        // likelihood's own roundoff floor so full Newton steps keep being
        // accepted in the quadratic basin where improvements underflow.
        let ascent_floor = ll.abs().max(1.0) * 1e-12;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = beta
                .iter()
                .enumerate()
                .map(|(k, &b)| b + scale * step[k])
                .collect();
            let (cand_ll, cand_grad, cand_info) = data.loglik_grad_info(&cand);
            if cand_ll.is_finite() && cand_ll >= ll - ascent_floor {
                beta = cand;
                ll = cand_ll;
                grad = cand_grad;
                info = cand_info;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if grad.amax() < GRAD_TOL {
        converged = true;
    }

    // Standard errors from the inverse information at the optimum.
    let mut stabilized = info.clone();
    let inv = loop {
        match stabilized.clone().try_inverse() {
            Some(inv) => break inv,
            None => {
                ridged = true;
                for k in 0..p {
                    stabilized[(k, k)] += RIDGE + stabilized[(k, k)].abs() * RIDGE;
                }
            }
        }
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let std_errors: Vec<f64> = (0..p).map(|k| inv[(k, k)].max(0.0).sqrt()).collect();
    let p_values: Vec<f64> = (0..p)
        .map(|k| {
            if std_errors[k] > 0.0 {
                2.0 * (1.0 - normal.cdf((beta[k] / std_errors[k]).abs()))
            } else {
                1.0
            }
        })
        .collect();
    Ok(CoxModel {
        names: matrix.names.clone(),
        coefficients: beta,
        std_errors,
        p_values,
        log_likelihood: ll,
        converged,
        ridged,
        grad_norm: grad.amax(),
    })
}

/// Two-pass significance screening: keep features with univariate Wald
/// `p < threshold`, then refit multivariately on the survivors and keep those
/// passing the threshold again. An empty result is valid.
pub fn cox_screen(
    clinical: &FeatureMatrix,
    records: &[SurvivalRecord],
    p_threshold: f64,
) -> Result<Vec<String>, StatsError> {
    let mut univariate_survivors = Vec::new();
    for j in 0..clinical.n_cols() {
        let single = clinical.select(&[clinical.names[j].clone()])?;
        let fit = cox_fit(&single, records)?;
        if fit.p_values[0] < p_threshold {
            univariate_survivors.push(clinical.names[j].clone());
        }
    }
    if univariate_survivors.is_empty() {
        return Ok(Vec::new());
    }
    let multi = clinical.select(&univariate_survivors)?;
    let fit = cox_fit(&multi, records)?;
    Ok(univariate_survivors
        .into_iter()
        .enumerate()
        .filter(|&(k, _)| fit.p_values[k] < p_threshold)
        .map(|(_, name)| name)
        .collect())
}
