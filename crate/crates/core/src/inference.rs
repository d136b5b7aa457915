//! Standard errors, Wald intervals and information criteria.
//!
//! The observed information is the negative central-difference Jacobian of
//! the analytic log-likelihood gradient in natural coordinates. Intervals in
//! the other frame use the delta method with a numerical Jacobian of the
//! frame map.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::Result;
use crate::fit::{FittedModel, Freeze};
use crate::growth::Frame;
use crate::likelihood::{self, weighted_class_pass, ClassKernel, Design};
use crate::mixture::{
    from_natural, log_gating_into, natural_names, natural_roles, natural_vector, Gating, MixtureParams, MixtureSpec,
    NaturalRole, PSI_INDEX,
};

pub const WALD_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub original: Vec<ParamEstimate>,
    pub reparameterized: Vec<ParamEstimate>,
    /// The observed information was not positive definite; SEs are missing.
    pub singular: bool,
    /// Largest |H - H'| before symmetrization, relative to max |H|.
    pub hessian_asymmetry: f64,
}

impl StandardErrors {
    pub fn in_frame(&self, frame: Frame) -> &[ParamEstimate] {
        match frame {
            Frame::Original => &self.original,
            Frame::Reparameterized => &self.reparameterized,
        }
    }

    pub fn get(&self, frame: Frame, name: &str) -> Option<&ParamEstimate> {
        self.in_frame(frame).iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub neg2ll: f64,
    pub aic: f64,
    pub bic: f64,
    pub parameters: usize,
    pub n: usize,
}

pub fn information_criteria_from(log_likelihood: f64, parameters: usize, n: usize) -> InformationCriteria {
    let neg2ll = -2.0 * log_likelihood;
    let p = parameters as f64;
    InformationCriteria {
        neg2ll,
        aic: neg2ll + 2.0 * p,
        bic: neg2ll + p * (n as f64).ln(),
        parameters,
        n,
    }
}

pub fn information_criteria(fitted: &FittedModel) -> InformationCriteria {
    information_criteria_from(fitted.log_likelihood, fitted.free_parameters, fitted.n)
}

/// Which natural coordinates are estimated under `freeze`.
pub(crate) fn natural_free_mask(spec: &MixtureSpec, freeze: &Freeze) -> Vec<bool> {
    natural_roles(spec)
        .into_iter()
        .map(|(_, role)| match role {
            NaturalRole::GateIntercept | NaturalRole::Proportion => true,
            NaturalRole::GateSlope => !freeze.gating_slopes,
            _ if freeze.class_params => false,
            NaturalRole::Path => !freeze.paths,
            NaturalRole::CovMean | NaturalRole::CovCov => !freeze.covariate_moments,
            _ => true,
        })
        .collect()
}

/// Analytic gradient of the marginal log-likelihood in natural coordinates
/// (knot by central difference).
pub(crate) fn natural_gradient(spec: &MixtureSpec, params: &MixtureParams, design: &Design) -> Result<Vec<f64>> {
    let joint = likelihood::log_joint_matrix(spec, params, design)?;
    let k = spec.classes;
    let (_, resp) = likelihood::normalize_rows(&joint, k);
    let c = spec.n_expert();
    let covd = spec.covariate_density();
    let mut out = Vec::with_capacity(joint.len());
    let mut w = vec![0.0; design.n()];
    for (ci, cp) in params.classes.iter().enumerate() {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = resp[i * k + ci];
        }
        let ker = ClassKernel::new(cp, params.frame, covd)?;
        let (_, g, dg) = weighted_class_pass(&ker, design, &w, true)?;
        out.extend(g.beta0.iter());
        for (a, b) in PSI_INDEX {
            out.push(if a == b { g.psi[(a, a)] } else { 2.0 * g.psi[(a, b)] });
        }
        out.push(dg);
        out.extend_from_slice(&g.paths);
        if covd {
            out.extend(g.xmean.iter());
            for a in 0..c {
                for b in a..c {
                    out.push(if a == b { g.phi[(a, a)] } else { 2.0 * g.phi[(a, b)] });
                }
            }
        }
        out.push(g.theta);
    }
    match &params.gating {
        Gating::Proportions(p) => {
            for ci in 1..k {
                let s: f64 = (0..design.n())
                    .map(|i| resp[i * k + ci] / p[ci] - resp[i * k] / p[0])
                    .sum();
                out.push(s);
            }
        }
        Gating::Logistic(g) => {
            let cg = design.n_gating();
            let start = out.len();
            out.resize(start + (k - 1) * (1 + cg), 0.0);
            let mut lg = vec![0.0; k];
            for i in 0..design.n() {
                let x = design.gating_covariates(i);
                log_gating_into(x, g, &mut lg);
                for ci in 1..k {
                    let d = resp[i * k + ci] - lg[ci].exp();
                    let o = start + (ci - 1) * (1 + cg);
                    out[o] += d;
                    for (j, xj) in x.iter().enumerate() {
                        out[o + 1 + j] += d * xj;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn fd_step(v: f64) -> f64 {
    1e-4 * v.abs().max(1.0)
}

/// Observed information over the free natural coordinates, with the
/// relative asymmetry of the raw difference Hessian.
pub(crate) fn observed_information(
    spec: &MixtureSpec,
    params: &MixtureParams,
    design: &Design,
    free: &[usize],
    step_scale: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let theta = natural_vector(params, spec);
    let m = free.len();
    let mut h = DMatrix::zeros(m, m);
    let mut buf = theta.clone();
    for (col, &j) in free.iter().enumerate() {
        let s = fd_step(theta[j]) * step_scale;
        buf[j] = theta[j] + s;
        let gp = natural_gradient(spec, &from_natural(&buf, spec, params.frame)?, design)?;
        buf[j] = theta[j] - s;
        let gm = natural_gradient(spec, &from_natural(&buf, spec, params.frame)?, design)?;
        buf[j] = theta[j];
        for (row, &i) in free.iter().enumerate() {
            h[(row, col)] = (gp[i] - gm[i]) / (2.0 * s);
        }
    }
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let asym = (&h - h.transpose()).amax() / scale;
    let h = (&h + h.transpose()) * 0.5;
    Ok((-h, asym))
}

/// Numerical Jacobian of the map between natural vectors in two frames.
fn frame_jacobian(spec: &MixtureSpec, params: &MixtureParams, target: Frame) -> Result<DMatrix<f64>> {
    let theta = natural_vector(params, spec);
    let p = theta.len();
    let mut j = DMatrix::zeros(p, p);
    let mut buf = theta.clone();
    for col in 0..p {
        let s = 1e-6 * theta[col].abs().max(1.0);
        buf[col] = theta[col] + s;
        let up = natural_vector(&from_natural(&buf, spec, params.frame)?.to_frame(target), spec);
        buf[col] = theta[col] - s;
        let dn = natural_vector(&from_natural(&buf, spec, params.frame)?.to_frame(target), spec);
        buf[col] = theta[col];
        for row in 0..p {
            j[(row, col)] = (up[row] - dn[row]) / (2.0 * s);
        }
    }
    Ok(j)
}

fn table(names: &[String], est: &[f64], cov: Option<&DMatrix<f64>>, free: &[bool]) -> Vec<ParamEstimate> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = cov.filter(|_| free[i]).map(|c| c[(i, i)].max(0.0).sqrt());
            ParamEstimate {
                name: name.clone(),
                estimate: est[i],
                se,
                lower: se.map(|s| est[i] - WALD_Z * s),
                upper: se.map(|s| est[i] + WALD_Z * s),
                free: free[i],
            }
        })
        .collect()
}

pub(crate) fn standard_errors_design(
    spec: &MixtureSpec,
    params: &MixtureParams,
    design: &Design,
    freeze: &Freeze,
) -> Result<StandardErrors> {
    standard_errors_scaled(spec, params, design, freeze, 1.0)
}

pub(crate) fn standard_errors_scaled(
    spec: &MixtureSpec,
    params: &MixtureParams,
    design: &Design,
    freeze: &Freeze,
    step_scale: f64,
) -> Result<StandardErrors> {
    let mask = natural_free_mask(spec, freeze);
    let free: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let (info, asym) = observed_information(spec, params, design, &free, step_scale)?;
    let p = mask.len();
    let cov_free = info.clone().cholesky().map(|c| c.inverse());
    let singular = cov_free.is_none();
    let cov = cov_free.map(|cf| {
        let mut full = DMatrix::zeros(p, p);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                full[(i, j)] = cf[(a, b)];
            }
        }
        full
    });
    let names = natural_names(spec);
    let here = params.frame;
    let there = here.other();
    let est_here = natural_vector(params, spec);
    let est_there = natural_vector(&params.to_frame(there), spec);
    let cov_there = match &cov {
        Some(c) => {
            let j = frame_jacobian(spec, params, there)?;
            Some(&j * c * j.transpose())
        }
        None => None,
    };
    let t_here = table(&names, &est_here, cov.as_ref(), &mask);
    let t_there = table(&names, &est_there, cov_there.as_ref(), &mask);
    let (original, reparameterized) = match here {
        Frame::Original => (t_here, t_there),
        Frame::Reparameterized => (t_there, t_here),
    };
    Ok(StandardErrors {
        original,
        reparameterized,
        singular,
        hessian_asymmetry: asym,
    })
}

/// Standard errors and 95% Wald intervals at a fitted model's estimates.
pub fn standard_errors(fitted: &FittedModel, data: &LongitudinalDataset) -> Result<StandardErrors> {
    let design = Design::new(data, &fitted.spec)?.with_knot_bounds(fitted.knot_bounds);
    standard_errors_design(&fitted.spec, &fitted.estimates, &design, &fitted.freeze)
}

/// Estimates in `frame`, with standard errors and intervals when the fit
/// produced a nonsingular information matrix.
pub fn parameter_table(fitted: &FittedModel, frame: Frame) -> Vec<ParamEstimate> {
    if let Some(se) = fitted.standard_errors.as_ref() {
        return se.in_frame(frame).to_vec();
    }
    let names = natural_names(&fitted.spec);
    let mask = natural_free_mask(&fitted.spec, &fitted.freeze);
    table(&names, &natural_vector(fitted.params_in(frame), &fitted.spec), None, &mask)
}
