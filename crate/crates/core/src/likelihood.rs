//! Mixture log-likelihood, class densities and responsibilities.
//!
//! Each class density is evaluated through 3×3 reductions of the J×J
//! implied covariance: with `Sigma = theta I + Lambda Psi Lambda'` and a
//! factor `Psi = F F'`, both `log|Sigma|` and `r' Sigma^{-1} r` follow from
//! `Lambda' Lambda`, `Lambda' r` and `r' r` and the 3×3 matrix
//! `C = theta I + F' Lambda' Lambda F`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::data::LongitudinalDataset;
use crate::error::{invalid, Error, Result};
use crate::growth::{loading_row, psd_factor3, ClassParams, Frame};
use crate::mixture::{log_gating_into, Gating, MixtureParams, MixtureSpec};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dataset flattened for evaluation, with covariate columns resolved to the
/// roles of one mixture spec.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    offsets: Vec<usize>,
    times: Vec<f64>,
    y: Vec<f64>,
    cg: usize,
    ce: usize,
    xg: Vec<f64>,
    xe: Vec<f64>,
    pub knot_bounds: (f64, f64),
}

impl Design {
    pub fn new(data: &LongitudinalDataset, spec: &MixtureSpec) -> Result<Design> {
        spec.validate()?;
        if data.is_empty() {
            return invalid("dataset has no individuals");
        }
        data.validate()?;
        let gi: Vec<usize> = spec
            .gating_covariates
            .iter()
            .map(|n| data.covariate_index(n))
            .collect::<Result<_>>()?;
        let ei: Vec<usize> = spec
            .expert_covariates
            .iter()
            .map(|n| data.covariate_index(n))
            .collect::<Result<_>>()?;
        let mut d = Design {
            n: data.len(),
            offsets: Vec::with_capacity(data.len() + 1),
            times: Vec::new(),
            y: Vec::new(),
            cg: gi.len(),
            ce: ei.len(),
            xg: Vec::with_capacity(data.len() * gi.len()),
            xe: Vec::with_capacity(data.len() * ei.len()),
            knot_bounds: data.default_knot_bounds(),
        };
        d.offsets.push(0);
        for ind in &data.individuals {
            d.times.extend_from_slice(&ind.times);
            d.y.extend_from_slice(&ind.outcomes);
            d.offsets.push(d.times.len());
            d.xg.extend(gi.iter().map(|&j| ind.covariates[j]));
            d.xe.extend(ei.iter().map(|&j| ind.covariates[j]));
        }
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_gating(&self) -> usize {
        self.cg
    }

    pub fn n_expert(&self) -> usize {
        self.ce
    }

    #[inline]
    pub fn times(&self, i: usize) -> &[f64] {
        &self.times[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn outcomes(&self, i: usize) -> &[f64] {
        &self.y[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn gating_covariates(&self, i: usize) -> &[f64] {
        &self.xg[i * self.cg..(i + 1) * self.cg]
    }

    #[inline]
    pub fn expert_covariates(&self, i: usize) -> &[f64] {
        &self.xe[i * self.ce..(i + 1) * self.ce]
    }

    pub fn with_knot_bounds(mut self, bounds: (f64, f64)) -> Self {
        self.knot_bounds = bounds;
        self
    }

    /// Design restricted to the given rows (repeats allowed).
    pub fn subset(&self, rows: &[usize]) -> Design {
        let mut d = Design {
            n: rows.len(),
            offsets: Vec::with_capacity(rows.len() + 1),
            times: Vec::new(),
            y: Vec::new(),
            cg: self.cg,
            ce: self.ce,
            xg: Vec::with_capacity(rows.len() * self.cg),
            xe: Vec::with_capacity(rows.len() * self.ce),
            knot_bounds: self.knot_bounds,
        };
        d.offsets.push(0);
        for &i in rows {
            d.times.extend_from_slice(self.times(i));
            d.y.extend_from_slice(self.outcomes(i));
            d.offsets.push(d.times.len());
            d.xg.extend_from_slice(self.gating_covariates(i));
            d.xe.extend_from_slice(self.expert_covariates(i));
        }
        d
    }
}

/// Weighted gradient of a class's log density, accumulated over individuals.
#[derive(Debug, Clone)]
pub(crate) struct ClassGrad {
    pub beta0: Vector3<f64>,
    /// d/dPsi treating Psi as an unconstrained symmetric matrix.
    pub psi: Matrix3<f64>,
    pub theta: f64,
    /// 3×c row-major.
    pub paths: Vec<f64>,
    pub xmean: DVector<f64>,
    pub phi: DMatrix<f64>,
}

impl ClassGrad {
    pub fn zeros(c: usize) -> Self {
        Self {
            beta0: Vector3::zeros(),
            psi: Matrix3::zeros(),
            theta: 0.0,
            paths: vec![0.0; 3 * c],
            xmean: DVector::zeros(c),
            phi: DMatrix::zeros(c, c),
        }
    }
}

#[inline]
fn chol3(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let l00 = m[(0, 0)];
    if !(l00 > 0.0) {
        return None;
    }
    let l00 = l00.sqrt();
    let l10 = m[(1, 0)] / l00;
    let l20 = m[(2, 0)] / l00;
    let d1 = m[(1, 1)] - l10 * l10;
    if !(d1 > 0.0) {
        return None;
    }
    let l11 = d1.sqrt();
    let l21 = (m[(2, 1)] - l20 * l10) / l11;
    let d2 = m[(2, 2)] - l20 * l20 - l21 * l21;
    if !(d2 > 0.0) {
        return None;
    }
    let l22 = d2.sqrt();
    Some(Matrix3::new(l00, 0.0, 0.0, l10, l11, 0.0, l20, l21, l22))
}

/// Inverse of a positive-definite 3×3 matrix from its Cholesky factor.
#[inline]
fn inv_from_chol3(l: &Matrix3<f64>) -> Matrix3<f64> {
    // L^{-1} (lower triangular)
    let a = 1.0 / l[(0, 0)];
    let d = 1.0 / l[(1, 1)];
    let f = 1.0 / l[(2, 2)];
    let b = -l[(1, 0)] * a * d;
    let e = -l[(2, 1)] * d * f;
    let c = -(l[(2, 0)] * a + l[(2, 1)] * b) * f;
    let li = Matrix3::new(a, 0.0, 0.0, b, d, 0.0, c, e, f);
    li.transpose() * li
}

/// Pre-factored class parameters for repeated density evaluation.
pub(crate) struct ClassKernel<'a> {
    beta0: Vector3<f64>,
    factor: Matrix3<f64>,
    gamma: f64,
    theta: f64,
    ln_theta: f64,
    frame: Frame,
    paths: &'a DMatrix<f64>,
    cov: Option<CovKernel>,
}

struct CovKernel {
    mean: DVector<f64>,
    inv: DMatrix<f64>,
    logdet: f64,
}

impl<'a> ClassKernel<'a> {
    pub fn new(cp: &'a ClassParams, frame: Frame, covariate_density: bool) -> Result<Self> {
        Self::with_factor(cp, psd_factor3(&cp.psi)?, frame, covariate_density)
    }

    pub fn with_factor(cp: &'a ClassParams, factor: Matrix3<f64>, frame: Frame, covariate_density: bool) -> Result<Self> {
        if !(cp.residual > 0.0) || !cp.residual.is_finite() {
            return Err(Error::Numeric(format!(
                "residual variance {} leaves the implied covariance singular",
                cp.residual
            )));
        }
        let cov = if covariate_density && cp.n_covariates() > 0 {
            let ch = cp.cov_cov.clone().cholesky().ok_or_else(|| {
                let eig = cp.cov_cov.clone().symmetric_eigen().eigenvalues;
                Error::Numeric(format!(
                    "covariate covariance is singular (condition number {:.3e})",
                    eig.max() / eig.min().max(f64::MIN_POSITIVE)
                ))
            })?;
            let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Some(CovKernel {
                mean: cp.cov_mean.clone(),
                inv: ch.inverse(),
                logdet,
            })
        } else {
            None
        };
        Ok(Self {
            beta0: cp.beta0,
            factor,
            gamma: cp.gamma,
            theta: cp.residual,
            ln_theta: cp.residual.ln(),
            frame,
            paths: &cp.paths,
            cov,
        })
    }

    pub fn with_gamma(&self, gamma: f64) -> ClassKernel<'a> {
        ClassKernel {
            beta0: self.beta0,
            factor: self.factor,
            gamma,
            theta: self.theta,
            ln_theta: self.ln_theta,
            frame: self.frame,
            paths: self.paths,
            cov: None,
        }
    }

    #[inline]
    fn conditional_mean(&self, xe: &[f64]) -> Vector3<f64> {
        let mut m = self.beta0;
        let c = xe.len();
        if c > 0 {
            for r in 0..3 {
                let mut acc = 0.0;
                for (j, x) in xe.iter().enumerate() {
                    acc += self.paths[(r, j)] * x;
                }
                m[r] += acc;
            }
        }
        m
    }

    /// Sufficient statistics of one individual: (Lambda'Lambda, Lambda'r, r'r, J).
    #[inline]
    fn stats(&self, t: &[f64], y: &[f64], m: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>, f64, usize) {
        let mut s = [0.0f64; 6];
        let mut q = Vector3::zeros();
        let mut rr = 0.0;
        for (&tj, &yj) in t.iter().zip(y) {
            let l = loading_row(tj, self.gamma, self.frame);
            let r = yj - (l[0] * m[0] + l[1] * m[1] + l[2] * m[2]);
            s[0] += l[0] * l[0];
            s[1] += l[1] * l[0];
            s[2] += l[1] * l[1];
            s[3] += l[2] * l[0];
            s[4] += l[2] * l[1];
            s[5] += l[2] * l[2];
            q[0] += l[0] * r;
            q[1] += l[1] * r;
            q[2] += l[2] * r;
            rr += r * r;
        }
        let sm = Matrix3::new(s[0], s[1], s[3], s[1], s[2], s[4], s[3], s[4], s[5]);
        (sm, q, rr, t.len())
    }

    #[inline]
    fn reduce(&self, s: &Matrix3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>, f64)> {
        let fsf = self.factor.transpose() * s * self.factor;
        let c = Matrix3::from_diagonal_element(self.theta) + fsf;
        let lc = chol3(&c).ok_or_else(|| {
            Error::Numeric(format!(
                "implied covariance is not positive definite (residual {:.3e}, reduced trace {:.3e})",
                self.theta,
                c.trace()
            ))
        })?;
        let logdet = 2.0 * (lc[(0, 0)] * lc[(1, 1)] * lc[(2, 2)]).ln();
        Ok((inv_from_chol3(&lc), fsf, logdet))
    }

    /// Log density of the outcomes given expert covariates.
    #[inline]
    pub fn y_logdens(&self, t: &[f64], y: &[f64], xe: &[f64]) -> Result<f64> {
        let m = self.conditional_mean(xe);
        let (s, q, rr, j) = self.stats(t, y, &m);
        let f = &self.factor;
        let c = Matrix3::from_diagonal_element(self.theta) + f.transpose() * s * f;
        let lc = chol3(&c).ok_or_else(|| Error::Numeric("implied covariance is not positive definite".into()))?;
        let z = f.transpose() * q;
        // |L^{-1} z|^2 by forward substitution
        let u0 = z[0] / lc[(0, 0)];
        let u1 = (z[1] - lc[(1, 0)] * u0) / lc[(1, 1)];
        let u2 = (z[2] - lc[(2, 0)] * u0 - lc[(2, 1)] * u1) / lc[(2, 2)];
        let quad = (rr - (u0 * u0 + u1 * u1 + u2 * u2)) / self.theta;
        let logdet_c = 2.0 * (lc[(0, 0)] * lc[(1, 1)] * lc[(2, 2)]).ln();
        let jf = j as f64;
        Ok(-0.5 * (jf * LN_2PI + (jf - 3.0) * self.ln_theta + logdet_c + quad))
    }

    /// Log density plus `w` times its gradient added into `g`.
    pub fn y_logdens_grad(&self, t: &[f64], y: &[f64], xe: &[f64], w: f64, g: &mut ClassGrad) -> Result<f64> {
        let m = self.conditional_mean(xe);
        let (s, q, rr, j) = self.stats(t, y, &m);
        let (ci, fsf, logdet_c) = self.reduce(&s)?;
        let f = &self.factor;
        let z = f.transpose() * q;
        let ciz = ci * z;
        let quad = (rr - z.dot(&ciz)) / self.theta;
        let jf = j as f64;
        let value = -0.5 * (jf * LN_2PI + (jf - 3.0) * self.ln_theta + logdet_c + quad);
        if w == 0.0 {
            return Ok(value);
        }
        let inv_theta = 1.0 / self.theta;
        // P = F C^{-1} F'
        let pq = f * ciz;
        let spq = s * pq;
        let a = (q - spq) * inv_theta;
        let p = f * ci * f.transpose();
        let sps = s * p * s;
        let mmat = (s - sps) * inv_theta;
        let gpsi = (a * a.transpose() - mmat) * 0.5;
        let norm2 = (rr - 2.0 * q.dot(&pq) + pq.dot(&spq)) * inv_theta * inv_theta;
        let tr = (jf - (ci * fsf).trace()) * inv_theta;
        g.beta0 += a * w;
        g.psi += gpsi * w;
        g.theta += 0.5 * (norm2 - tr) * w;
        let c = xe.len();
        for r in 0..3 {
            for (jx, x) in xe.iter().enumerate() {
                g.paths[r * c + jx] += w * a[r] * x;
            }
        }
        Ok(value)
    }

    #[inline]
    pub fn x_logdens(&self, xe: &[f64]) -> f64 {
        let Some(cov) = &self.cov else { return 0.0 };
        let c = xe.len();
        let mut quad = 0.0;
        for a in 0..c {
            let da = xe[a] - cov.mean[a];
            for b in 0..c {
                quad += da * cov.inv[(a, b)] * (xe[b] - cov.mean[b]);
            }
        }
        -0.5 * (c as f64 * LN_2PI + cov.logdet + quad)
    }

    pub fn x_logdens_grad(&self, xe: &[f64], w: f64, g: &mut ClassGrad) -> f64 {
        let Some(cov) = &self.cov else { return 0.0 };
        let d = DVector::from_iterator(xe.len(), xe.iter().zip(cov.mean.iter()).map(|(x, m)| x - m));
        let u = &cov.inv * &d;
        let quad = d.dot(&u);
        g.xmean += &u * w;
        g.phi += (&u * u.transpose() - &cov.inv) * (0.5 * w);
        -0.5 * (xe.len() as f64 * LN_2PI + cov.logdet + quad)
    }
}

/// Step used for the central difference in the knot.
pub(crate) const KNOT_STEP: f64 = 1e-4;

/// `sum_i w_i log f(y_i, x_i)` over a design, with its gradient and the
/// central-difference derivative in the knot. Rows with zero weight are
/// skipped.
pub(crate) fn weighted_class_pass(
    ker: &ClassKernel<'_>,
    design: &Design,
    weights: &[f64],
    knot_derivative: bool,
) -> Result<(f64, ClassGrad, f64)> {
    let mut g = ClassGrad::zeros(design.n_expert());
    let mut value = 0.0;
    let mut dgamma = 0.0;
    let (up, down) = (ker.with_gamma(ker.gamma + KNOT_STEP), ker.with_gamma(ker.gamma - KNOT_STEP));
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (t, y, xe) = (design.times(i), design.outcomes(i), design.expert_covariates(i));
        value += w * (ker.y_logdens_grad(t, y, xe, w, &mut g)? + ker.x_logdens_grad(xe, w, &mut g));
        if knot_derivative {
            dgamma += w * (up.y_logdens(t, y, xe)? - down.y_logdens(t, y, xe)?);
        }
    }
    Ok((value, g, dgamma / (2.0 * KNOT_STEP)))
}

/// Log density of one individual under one class: the outcome density given
/// expert covariates, times the covariate density when `covariate_density`.
pub fn class_log_density(
    outcomes: &[f64],
    times: &[f64],
    expert_covariates: &[f64],
    params: &ClassParams,
    frame: Frame,
    covariate_density: bool,
) -> Result<f64> {
    if outcomes.len() != times.len() || times.is_empty() {
        return invalid("outcomes and times must be non-empty and of equal length");
    }
    if expert_covariates.len() != params.n_covariates() {
        return invalid(format!(
            "expected {} expert covariates, got {}",
            params.n_covariates(),
            expert_covariates.len()
        ));
    }
    params.validate()?;
    let k = ClassKernel::new(params, frame, covariate_density)?;
    Ok(k.y_logdens(times, outcomes, expert_covariates)? + k.x_logdens(expert_covariates))
}

fn check_design(spec: &MixtureSpec, params: &MixtureParams, design: &Design) -> Result<()> {
    if params.classes.len() != spec.classes {
        return invalid("class count does not match the spec");
    }
    if design.n_gating() != spec.n_gating() || design.n_expert() != spec.n_expert() {
        return invalid("design covariates do not match the spec");
    }
    if design.n() == 0 {
        return invalid("dataset has no individuals");
    }
    Ok(())
}

/// n×K matrix (row-major) of `log g_k(x_g) + log f_k(y, x_e)`.
pub(crate) fn log_joint_matrix(spec: &MixtureSpec, params: &MixtureParams, design: &Design) -> Result<Vec<f64>> {
    check_design(spec, params, design)?;
    let k = spec.classes;
    let n = design.n();
    let mut out = vec![0.0; n * k];
    fill_log_gating(params, design, &mut out)?;
    let covd = spec.covariate_density();
    for (c, cp) in params.classes.iter().enumerate() {
        let ker = ClassKernel::new(cp, params.frame, covd)?;
        for i in 0..n {
            let xe = design.expert_covariates(i);
            out[i * k + c] += ker.y_logdens(design.times(i), design.outcomes(i), xe)? + ker.x_logdens(xe);
        }
    }
    Ok(out)
}

pub(crate) fn fill_log_gating(params: &MixtureParams, design: &Design, out: &mut [f64]) -> Result<()> {
    let k = params.classes.len();
    match &params.gating {
        Gating::Proportions(p) => {
            if p.len() != k {
                return invalid("proportions do not match class count");
            }
            let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            for row in out.chunks_mut(k) {
                row.copy_from_slice(&lp);
            }
        }
        Gating::Logistic(g) => {
            if g.classes() != k || g.n_covariates() != design.n_gating() {
                return invalid("gating coefficients do not match design");
            }
            for (i, row) in out.chunks_mut(k).enumerate() {
                log_gating_into(design.gating_covariates(i), g, row);
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-likelihood and row-major n×K responsibilities from a joint matrix.
pub(crate) fn normalize_rows(joint: &[f64], k: usize) -> (f64, Vec<f64>) {
    let mut ll = 0.0;
    let mut resp = vec![0.0; joint.len()];
    for (row, out) in joint.chunks(k).zip(resp.chunks_mut(k)) {
        let lse = log_sum_exp(row);
        ll += lse;
        let mut s = 0.0;
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - lse).exp();
            s += *o;
        }
        for o in out.iter_mut() {
            *o /= s;
        }
    }
    (ll, resp)
}

pub fn log_likelihood(spec: &MixtureSpec, params: &MixtureParams, design: &Design) -> Result<f64> {
    let joint = log_joint_matrix(spec, params, design)?;
    Ok(joint.chunks(spec.classes).map(log_sum_exp).sum())
}

/// n×K posterior class probabilities.
pub fn responsibilities(spec: &MixtureSpec, params: &MixtureParams, design: &Design) -> Result<DMatrix<f64>> {
    let (_, r) = e_step(spec, params, design)?;
    Ok(DMatrix::from_row_slice(design.n(), spec.classes, &r))
}

/// Log-likelihood and row-major responsibilities.
pub(crate) fn e_step(spec: &MixtureSpec, params: &MixtureParams, design: &Design) -> Result<(f64, Vec<f64>)> {
    let joint = log_joint_matrix(spec, params, design)?;
    Ok(normalize_rows(&joint, spec.classes))
}
