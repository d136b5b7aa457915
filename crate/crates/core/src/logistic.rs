//! Multinomial logistic regression with soft (weighted) class targets,
//! fitted by Newton-Raphson (iteratively reweighted least squares).

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::mixture::{log_gating_into, GatingParams};

#[derive(Debug, Clone)]
pub struct LogisticOptions {
    pub max_iterations: usize,
    /// Relative log-likelihood change at which iteration stops.
    pub tolerance: f64,
    /// Coefficients are clamped to `[-cap, cap]`; hitting the cap flags
    /// separation.
    pub cap: Option<f64>,
    /// When false only the intercepts are updated.
    pub slopes_free: bool,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-12,
            cap: None,
            slopes_free: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub params: GatingParams,
    /// Covariance of the free coefficients, ordered per non-reference class
    /// as (intercept, slopes...).
    pub covariance: Option<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
}

impl LogisticFit {
    /// Standard error of the coefficient of covariate `j` for class `k`
    /// (1-based non-reference class index as in the gating parameters).
    pub fn slope_se(&self, k: usize, j: usize) -> Option<f64> {
        let c = self.params.n_covariates();
        let cov = self.covariance.as_ref()?;
        let idx = (k - 1) * (1 + c) + 1 + j;
        (idx < cov.nrows()).then(|| cov[(idx, idx)].max(0.0).sqrt())
    }
}

fn objective(x: &[f64], c: usize, targets: &[f64], k: usize, gp: &GatingParams, buf: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (i, t) in targets.chunks(k).enumerate() {
        log_gating_into(&x[i * c..(i + 1) * c], gp, buf);
        for (tk, lg) in t.iter().zip(buf.iter()) {
            if *tk != 0.0 {
                ll += tk * lg;
            }
        }
    }
    ll
}

fn read(theta: &[f64], gp: &mut GatingParams, slopes_free: bool) {
    let c = gp.n_covariates();
    let w = if slopes_free { 1 + c } else { 1 };
    for k in 0..gp.intercepts.len() {
        gp.intercepts[k] = theta[k * w];
        if slopes_free {
            gp.coefficients[k].copy_from_slice(&theta[k * w + 1..(k + 1) * w]);
        }
    }
}

fn write(gp: &GatingParams, slopes_free: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..gp.intercepts.len() {
        out.push(gp.intercepts[k]);
        if slopes_free {
            out.extend_from_slice(&gp.coefficients[k]);
        }
    }
    out
}

/// Maximizes `sum_i sum_k t_ik log g_k(x_i)` over the gating coefficients.
///
/// `x` is n×c row-major, `targets` n×K row-major with non-negative rows.
pub fn fit_multinomial(
    x: &[f64],
    c: usize,
    targets: &[f64],
    init: &GatingParams,
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    let k = init.classes();
    if k < 2 {
        return invalid("multinomial regression needs at least two classes");
    }
    if init.n_covariates() != c || targets.len() % k != 0 || x.len() != (targets.len() / k) * c {
        return invalid("logistic design dimensions do not match");
    }
    let n = targets.len() / k;
    if n == 0 {
        return invalid("logistic regression needs observations");
    }
    if opts.slopes_free {
        for j in 0..c {
            let first = x[j];
            if (0..n).all(|i| x[i * c + j] == first) {
                return invalid(format!(
                    "gating covariate {} has zero variance; its coefficient is undefined",
                    j + 1
                ));
            }
        }
    }
    let zw = if opts.slopes_free { 1 + c } else { 1 };
    let m = (k - 1) * zw;
    let mut gp = init.clone();
    let mut theta = write(&gp, opts.slopes_free);
    let mut buf = vec![0.0; k];
    let mut ll = objective(x, c, targets, k, &gp, &mut buf);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    let mut hess = DMatrix::zeros(m, m);
    let mut z = vec![0.0; zw];
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut grad = DVector::zeros(m);
        hess.fill(0.0);
        for i in 0..n {
            let xi = &x[i * c..(i + 1) * c];
            let t = &targets[i * k..(i + 1) * k];
            let s: f64 = t.iter().sum();
            log_gating_into(xi, &gp, &mut buf);
            for v in buf.iter_mut() {
                *v = v.exp();
            }
            z[0] = 1.0;
            if opts.slopes_free {
                z[1..].copy_from_slice(xi);
            }
            for a in 1..k {
                let ra = t[a] - s * buf[a];
                for (p, zp) in z.iter().enumerate() {
                    grad[(a - 1) * zw + p] += ra * zp;
                }
                for b in 1..k {
                    let w = s * (if a == b { buf[a] } else { 0.0 } - buf[a] * buf[b]);
                    if w == 0.0 {
                        continue;
                    }
                    for (p, zp) in z.iter().enumerate() {
                        for (q, zq) in z.iter().enumerate() {
                            hess[((a - 1) * zw + p, (b - 1) * zw + q)] += w * zp * zq;
                        }
                    }
                }
            }
        }
        let Some(chol) = hess.clone().cholesky() else {
            // flat directions: fall back to a ridge-stabilized step
            let ridge = hess.clone() + DMatrix::identity(m, m) * (1e-8 * hess.diagonal().amax().max(1e-12));
            let Some(ch) = ridge.cholesky() else {
                return Err(Error::Numeric("logistic information matrix is singular".into()));
            };
            let step = ch.solve(&grad);
            if !take_step(&mut theta, &step, x, c, targets, k, &mut gp, opts, &mut ll, &mut buf, &mut separated) {
                converged = grad.amax() < 1e-6;
                break;
            }
            continue;
        };
        let step = chol.solve(&grad);
        let before = ll;
        if !take_step(&mut theta, &step, x, c, targets, k, &mut gp, opts, &mut ll, &mut buf, &mut separated) {
            converged = grad.amax() < 1e-6 * (n as f64) || separated;
            break;
        }
        if (ll - before).abs() <= opts.tolerance * ll.abs().max(1.0) && step.amax() < 1e-6 {
            converged = true;
            break;
        }
    }
    if let Some(cap) = opts.cap {
        if theta.iter().any(|v| v.abs() >= cap) {
            separated = true;
        }
    }
    let covariance = hess.clone().try_inverse().filter(|c| c.diagonal().iter().all(|v| *v >= 0.0));
    if separated {
        log::warn!("gating regression hit the coefficient cap: classes are (quasi-)separated by the covariates");
    }
    Ok(LogisticFit {
        params: gp,
        covariance,
        log_likelihood: ll,
        iterations,
        converged,
        separated,
    })
}

#[allow(clippy::too_many_arguments)]
fn take_step(
    theta: &mut Vec<f64>,
    step: &DVector<f64>,
    x: &[f64],
    c: usize,
    targets: &[f64],
    k: usize,
    gp: &mut GatingParams,
    opts: &LogisticOptions,
    ll: &mut f64,
    buf: &mut [f64],
    separated: &mut bool,
) -> bool {
    let mut scale = 1.0;
    for _ in 0..40 {
        let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
        if let Some(cap) = opts.cap {
            for v in &mut cand {
                if v.abs() > cap {
                    *v = v.signum() * cap;
                    *separated = true;
                }
            }
        }
        let mut trial = gp.clone();
        read(&cand, &mut trial, opts.slopes_free);
        let v = objective(x, c, targets, k, &trial, buf);
        // rounding slack: near the optimum exact gains fall below ulp(ll)
        if v.is_finite() && v >= *ll - 1e-12 * ll.abs().max(1.0) {
            let moved = cand.iter().zip(theta.iter()).any(|(a, b)| a != b);
            *theta = cand;
            *gp = trial;
            *ll = v;
            return moved;
        }
        scale *= 0.5;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn recovers_generating_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let truth = GatingParams {
            intercepts: vec![0.3],
            coefficients: vec![vec![1.5f64.ln(), 1.7f64.ln()]],
        };
        let mut x = Vec::new();
        let mut t = Vec::new();
        for _ in 0..n {
            let xi: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let eta = truth.predictor(1, &xi);
            let p = 1.0 / (1.0 + (-eta).exp());
            let y = rng.random::<f64>() < p;
            x.extend_from_slice(&xi);
            t.extend_from_slice(if y { &[0.0, 1.0] } else { &[1.0, 0.0] });
        }
        let fit = fit_multinomial(&x, 2, &t, &GatingParams::zeros(2, 2), &LogisticOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.params.coefficients[0][0] - 1.5f64.ln()).abs() < 0.05);
        assert!((fit.params.coefficients[0][1] - 1.7f64.ln()).abs() < 0.05);
        assert!((fit.params.intercepts[0] - 0.3).abs() < 0.05);
        let se = fit.slope_se(1, 0).unwrap();
        assert!(se > 0.005 && se < 0.03, "{se}");
    }

    #[test]
    fn separation_is_capped() {
        let x: Vec<f64> = (0..40).map(|i| if i < 20 { 0.0 } else { 1.0 }).collect();
        let t: Vec<f64> = (0..40).flat_map(|i| if i < 20 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let opts = LogisticOptions {
            cap: Some(15.0),
            ..Default::default()
        };
        let fit = fit_multinomial(&x, 1, &t, &GatingParams::zeros(2, 1), &opts).unwrap();
        assert!(fit.separated);
        assert!(fit.params.coefficients[0][0].abs() <= 15.0);
        assert!(fit.params.coefficients[0][0] > 10.0);
    }

    #[test]
    fn proportions_only_and_zero_variance() {
        // intercept-only fit returns the log-odds of the target shares
        let x = vec![0.0; 10];
        let t: Vec<f64> = (0..10).flat_map(|i| if i < 3 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let opts = LogisticOptions {
            slopes_free: false,
            ..Default::default()
        };
        let fit = fit_multinomial(&x, 1, &t, &GatingParams::zeros(2, 1), &opts).unwrap();
        assert!((fit.params.intercepts[0] - (7.0f64 / 3.0).ln()).abs() < 1e-8, "{:?} {} {}", fit.params, fit.iterations, fit.converged);
        assert_eq!(fit.params.coefficients[0][0], 0.0);
        assert!(fit_multinomial(&x, 1, &t, &GatingParams::zeros(2, 1), &LogisticOptions::default()).is_err());
    }
}
