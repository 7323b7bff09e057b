//! Finite-difference verification of backward rules.
//!
//! `gradient_check` compares each analytic input gradient against central
//! differences `(f(x+h) - f(x-h)) / 2h`, element by element. The closure is
//! re-run from the same leaves after every perturbation, which is exactly the
//! define-by-run contract of the engine. `gradient_check_directional`
//! aggregates the whole gradient into one directional derivative per input,
//! which stays reliable in 32-bit where per-element quotients get noisy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub nonfinite: bool,
}

impl GradCheckReport {
    fn fail_nonfinite() -> Self {
        GradCheckReport {
            max_rel_err: f64::INFINITY,
            pass: false,
            checked: 0,
            worst: None,
            nonfinite: true,
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} over {} elements",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.checked
        )?;
        if let Some((i, j, a, n)) = self.worst {
            write!(f, " (worst: input {} elem {}: analytic {:.6e} vs numeric {:.6e})", i, j, a, n)?;
        }
        Ok(())
    }
}

/// Relative error, with differences below the finite-difference noise floor
/// counting as exact agreement. The floor is the cancellation error of the
/// central difference: roundoff of the loss evaluation divided by `2h`.
fn rel_err(a: f64, n: f64, noise_abs: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= noise_abs {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(noise_abs)
}

fn noise_floor<E: Element>(f0: f64, step: f64) -> f64 {
    // Loss roundoff: relative machine precision with slack for accumulation
    // across thousands of operations.
    let eps_rel = if std::mem::size_of::<E>() == 4 { 1e-5 } else { 1e-12 };
    eps_rel * f0.abs().max(1.0) / (2.0 * step)
}

/// Check all elements of all `requires_grad` inputs.
pub fn gradient_check<E, F>(f: F, inputs: &[Tensor<E>], step: f64, tol: f64) -> GradCheckReport
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Tensor<E>,
{
    gradient_check_sampled(f, inputs, step, tol, usize::MAX, 0)
}

/// Check at most `max_per_input` elements per input, chosen deterministically
/// from `seed`. The analytic gradient is still computed in full.
pub fn gradient_check_sampled<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    step: f64,
    tol: f64,
    max_per_input: usize,
    seed: u64,
) -> GradCheckReport
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Tensor<E>,
{
    assert!(step > 0.0, "gradient_check: step must be positive");
    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs);
    assert_eq!(out.numel(), 1, "gradient_check: f must be scalar-valued");
    let f0 = out.item().as_f64();
    if !f0.is_finite() {
        return GradCheckReport::fail_nonfinite();
    }
    if out.backward().is_err() {
        return GradCheckReport::fail_nonfinite();
    }
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(out);

    let floor = noise_floor::<E>(f0, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        worst: None,
        nonfinite: false,
    };
    let h = E::of_f64(step);
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        let elems: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            // Sample without replacement.
            let mut idx: Vec<usize> = (0..n).collect();
            for k in 0..max_per_input {
                let j = rng.gen_range(k..n);
                idx.swap(k, j);
            }
            idx.truncate(max_per_input);
            idx
        };
        for j in elems {
            let orig = t.data()[j];
            t.data_mut()[j] = orig + h;
            let fp = f(inputs).item().as_f64();
            t.data_mut()[j] = orig - h;
            let fm = f(inputs).item().as_f64();
            t.data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return GradCheckReport::fail_nonfinite();
            }
            let numeric = (fp - fm) / (2.0 * step);
            let err = rel_err(analytic[i][j], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j, analytic[i][j], numeric));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    report
}

/// Directional finite-difference check: for each `requires_grad` input, draw a
/// random unit direction `v`, compare `(f(x+hv) - f(x-hv)) / 2h` against
/// `v . grad`. One aggregate comparison per input per round.
pub fn gradient_check_directional<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    step: f64,
    tol: f64,
    rounds: usize,
    seed: u64,
) -> GradCheckReport
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Tensor<E>,
{
    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs);
    assert_eq!(out.numel(), 1, "gradient_check: f must be scalar-valued");
    let f0 = out.item().as_f64();
    if !f0.is_finite() || out.backward().is_err() {
        return GradCheckReport::fail_nonfinite();
    }
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(out);

    let floor = noise_floor::<E>(f0, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        worst: None,
        nonfinite: false,
    };
    for round in 0..rounds {
        for (i, t) in inputs.iter().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in v.iter_mut() {
                *x /= norm;
            }
            let orig = t.to_vec();
            {
                let mut d = t.data_mut();
                for j in 0..n {
                    d[j] = orig[j] + E::of_f64(step * v[j]);
                }
            }
            let fp = f(inputs).item().as_f64();
            {
                let mut d = t.data_mut();
                for j in 0..n {
                    d[j] = orig[j] - E::of_f64(step * v[j]);
                }
            }
            let fm = f(inputs).item().as_f64();
            {
                let mut d = t.data_mut();
                d.copy_from_slice(&orig);
            }
            if !fp.is_finite() || !fm.is_finite() {
                return GradCheckReport::fail_nonfinite();
            }
            let numeric = (fp - fm) / (2.0 * step);
            let dot: f64 = v.iter().zip(&analytic[i]).map(|(a, b)| a * b).sum();
            let err = rel_err(dot, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, round, dot, numeric));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    report
}
