//! Maximum-likelihood estimation with perturbed restarts.
//!
//! Two optimizers share one driver: EM whose M-step runs BFGS on each
//! class's packed block (covariate moments and mixing proportions in closed
//! form, logistic gating by Newton), and BFGS on the marginal likelihood
//! over the whole packed vector.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{invalid, Error, Result};
use crate::growth::{ClassParams, Frame};
use crate::inference::{self, InformationCriteria, StandardErrors};
use crate::likelihood::{self, weighted_class_pass, ClassGrad, ClassKernel, Design};
use crate::logistic::{fit_multinomial, LogisticOptions};
use crate::mixture::{
    log_gating_into, pack, pack_class, parameter_count, read_chol, read_chol3, unpack, unpack_class, Gating,
    GatingParams, MixtureParams, MixtureSpec, ParamLayout, OFF_BETA0, OFF_CHOL, OFF_GAMMA, OFF_PATHS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Em,
    DirectQuasiNewton,
}

/// Parameter groups held at their start values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct Freeze {
    pub gating_slopes: bool,
    pub paths: bool,
    pub covariate_moments: bool,
    /// Every within-class parameter (growth block, knot, residual, paths and
    /// covariate moments).
    pub class_params: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative log-likelihood change that counts as converged when seen on
    /// two successive iterations.
    pub tolerance: f64,
    pub max_attempts: usize,
    /// Retries multiply start values by draws from U[1 - p, 1 + p].
    pub perturbation: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Attempts where a class's responsibility mass drops below this are
    /// abandoned.
    pub min_class_mass: f64,
    /// Knot search interval; defaults to the second through second-to-last
    /// occasion.
    pub knot_bounds: Option<(f64, f64)>,
    pub freeze: Freeze,
    /// Compute standard errors. A fit only counts as converged when the
    /// observed information is positive definite, so this also gates
    /// convergence.
    pub standard_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-8,
            max_attempts: 10,
            perturbation: 0.25,
            optimizer: Optimizer::Em,
            seed: 0,
            min_class_mass: 2.0,
            knot_bounds: None,
            freeze: Freeze::default(),
            standard_errors: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return invalid("tolerance must be positive");
        }
        if self.max_attempts == 0 || self.max_iterations == 0 {
            return invalid("attempts and iterations must be at least 1");
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return invalid("perturbation must lie in [0, 1)");
        }
        if let Some((lo, hi)) = self.knot_bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return invalid("knot bounds must be a finite increasing pair");
            }
        }
        Ok(())
    }
}

/// Start values for [`fit`], in any frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StartValues {
    pub params: MixtureParams,
}

impl StartValues {
    /// Data-driven defaults: growth means from a two-piece least-squares fit
    /// to the pooled data at each class's knot, knots spread evenly over the
    /// bounds, identity growth covariance, unit residual variance, paths
    /// 0.5, logistic slopes 1.0 with zero intercepts, equal proportions, and
    /// pooled covariate moments.
    pub fn heuristic(spec: &MixtureSpec, data: &LongitudinalDataset, knot_bounds: Option<(f64, f64)>) -> Result<Self> {
        let mut design = Design::new(data, spec)?;
        if let Some(b) = knot_bounds {
            design = design.with_knot_bounds(b);
        }
        Ok(Self {
            params: heuristic_start(spec, &design)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum FitStatus {
    Converged,
    NotConverged(String),
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: MixtureSpec,
    pub knot_bounds: (f64, f64),
    /// Estimates in the estimation frame, classes sorted by ascending knot.
    pub estimates: MixtureParams,
    pub original: MixtureParams,
    pub reparameterized: MixtureParams,
    pub log_likelihood: f64,
    /// n×K posterior class probabilities at the estimates.
    pub responsibilities: DMatrix<f64>,
    pub status: FitStatus,
    pub attempts: usize,
    pub iterations: usize,
    /// Log-likelihood after each iteration of the reported attempt.
    pub trace: Vec<f64>,
    pub standard_errors: Option<StandardErrors>,
    pub n: usize,
    /// Free parameters, as used by information criteria.
    pub free_parameters: usize,
    pub freeze: Freeze,
}

impl FittedModel {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }

    pub fn params_in(&self, frame: Frame) -> &MixtureParams {
        match frame {
            Frame::Original => &self.original,
            Frame::Reparameterized => &self.reparameterized,
        }
    }

    pub fn information_criteria(&self) -> InformationCriteria {
        inference::information_criteria(self)
    }
}

pub fn fit(
    spec: &MixtureSpec,
    data: &LongitudinalDataset,
    start: Option<&StartValues>,
    opts: &FitOptions,
) -> Result<FittedModel> {
    let design = Design::new(data, spec)?;
    fit_design(spec, &design, start.map(|s| &s.params), opts)
}

pub(crate) fn fit_design(
    spec: &MixtureSpec,
    design: &Design,
    start: Option<&MixtureParams>,
    opts: &FitOptions,
) -> Result<FittedModel> {
    opts.validate()?;
    spec.validate()?;
    let bounds = opts.knot_bounds.unwrap_or(design.knot_bounds);
    if !(bounds.0 < bounds.1) {
        return invalid(format!("degenerate knot bounds ({}, {})", bounds.0, bounds.1));
    }
    let design_b;
    let design = if design.knot_bounds != bounds {
        design_b = design.clone().with_knot_bounds(bounds);
        &design_b
    } else {
        design
    };
    let start = match start {
        Some(p) => {
            p.validate(spec)?;
            let mut p = p.to_frame(spec.frame);
            for (k, c) in p.classes.iter_mut().enumerate() {
                if !(c.gamma > bounds.0 && c.gamma < bounds.1) {
                    let clamped = clamp_knot(c.gamma, bounds);
                    log::info!("start knot of class {} moved inside the bounds: {} -> {}", k + 1, c.gamma, clamped);
                    c.gamma = clamped;
                }
            }
            p
        }
        None => heuristic_start(spec, design)?,
    };
    let layout = ParamLayout::new(spec, bounds);
    let free_parameters = free_mask(&layout, &opts.freeze).iter().filter(|f| **f).count();
    if design.n() <= free_parameters {
        log::warn!(
            "{} individuals for {} free parameters; estimates may be unstable",
            design.n(),
            free_parameters
        );
    }
    let engine = Engine {
        spec,
        design,
        layout,
        freeze: &opts.freeze,
        min_mass: opts.min_class_mass,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<FittedModel> = None;
    let mut last_err = None;
    for attempt in 1..=opts.max_attempts {
        let init = if attempt == 1 {
            start.clone()
        } else {
            perturb(&start, &mut rng, opts.perturbation, bounds, &opts.freeze)
        };
        let run = match opts.optimizer {
            Optimizer::Em => engine.run_em(init, &start, opts),
            Optimizer::DirectQuasiNewton => engine.run_direct(init, &start, opts),
        };
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                log::debug!("attempt {attempt} failed: {e}");
                last_err = Some(e);
                continue;
            }
        };
        let model = match engine.finish(run, attempt, opts) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("attempt {attempt} could not be finalized: {e}");
                last_err = Some(e);
                continue;
            }
        };
        if model.converged() {
            return Ok(model);
        }
        if best.as_ref().is_none_or(|b| model.log_likelihood > b.log_likelihood) {
            best = Some(model);
        }
    }
    match best {
        Some(mut m) => {
            m.attempts = opts.max_attempts;
            Ok(m)
        }
        None => Err(last_err.unwrap_or_else(|| Error::Numeric("no attempt produced an estimate".into()))),
    }
}

fn clamp_knot(g: f64, (lo, hi): (f64, f64)) -> f64 {
    let eps = 1e-3 * (hi - lo);
    g.clamp(lo + eps, hi - eps)
}

/// Two-piece least squares of all pooled observations at knot `gamma`:
/// (intercept, slope before, slope after, SSE).
fn two_piece_ls(design: &Design, gamma: f64) -> Option<(Vector3<f64>, f64)> {
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    let mut yy = 0.0;
    for i in 0..design.n() {
        for (&t, &y) in design.times(i).iter().zip(design.outcomes(i)) {
            let z = Vector3::new(1.0, t.min(gamma), (t - gamma).max(0.0));
            xtx += z * z.transpose();
            xty += z * y;
            yy += y * y;
        }
    }
    let ch = xtx.cholesky()?;
    let b = ch.solve(&xty);
    Some((b, yy - b.dot(&xty)))
}

pub(crate) fn heuristic_start(spec: &MixtureSpec, design: &Design) -> Result<MixtureParams> {
    let (lo, hi) = design.knot_bounds;
    let k = spec.classes;
    let knots: Vec<f64> = if k == 1 {
        let mut best = ((lo + hi) / 2.0, f64::INFINITY);
        for s in 1..60 {
            let g = lo + (hi - lo) * s as f64 / 60.0;
            if let Some((_, sse)) = two_piece_ls(design, g) {
                if sse < best.1 {
                    best = (g, sse);
                }
            }
        }
        vec![best.0]
    } else {
        (1..=k).map(|j| lo + (hi - lo) * j as f64 / (k + 1) as f64).collect()
    };
    let c = spec.n_expert();
    let n = design.n() as f64;
    let mut xmean = DVector::zeros(c);
    for i in 0..design.n() {
        xmean += DVector::from_column_slice(design.expert_covariates(i));
    }
    xmean /= n;
    let mut xcov = DMatrix::zeros(c, c);
    for i in 0..design.n() {
        let d = DVector::from_column_slice(design.expert_covariates(i)) - &xmean;
        xcov += &d * d.transpose();
    }
    xcov /= n;
    if c > 0 && xcov.clone().cholesky().is_none() {
        xcov = DMatrix::identity(c, c);
    }
    let mut classes = Vec::with_capacity(k);
    for &g in &knots {
        let (b, _) = two_piece_ls(design, g)
            .ok_or_else(|| Error::InvalidInput("observation times cannot identify a two-piece mean curve".into()))?;
        let cp = ClassParams {
            beta0: b,
            psi: Matrix3::identity(),
            gamma: g,
            paths: DMatrix::from_element(3, c, 0.5),
            cov_mean: xmean.clone(),
            cov_cov: xcov.clone(),
            residual: 1.0,
        };
        let mut cp = cp.to_frame(Frame::Original, spec.frame);
        // identity in whichever frame is estimated
        cp.psi = Matrix3::identity();
        classes.push(cp);
    }
    let gating = if spec.logistic_gating() {
        Gating::Logistic(GatingParams {
            intercepts: vec![0.0; k - 1],
            coefficients: vec![vec![1.0; spec.n_gating()]; k - 1],
        })
    } else {
        Gating::Proportions(vec![1.0 / k as f64; k])
    };
    Ok(MixtureParams {
        frame: spec.frame,
        classes,
        gating,
    })
}

/// `D M D` with `D = diag(sqrt(u))`: scales each variance by its draw and
/// keeps the matrix positive definite.
fn scale_cov<R: Rng>(m: &DMatrix<f64>, rng: &mut R, p: f64) -> DMatrix<f64> {
    let d: Vec<f64> = (0..m.nrows()).map(|_| rng.random_range(1.0 - p..=1.0 + p).sqrt()).collect();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j])
}

fn perturb<R: Rng>(start: &MixtureParams, rng: &mut R, p: f64, bounds: (f64, f64), freeze: &Freeze) -> MixtureParams {
    let mut out = start.clone();
    let u = |rng: &mut R| rng.random_range(1.0 - p..=1.0 + p);
    if !freeze.class_params {
        for cp in &mut out.classes {
            for v in cp.beta0.iter_mut() {
                *v *= u(rng);
            }
            let psi = DMatrix::from_iterator(3, 3, cp.psi.iter().copied());
            cp.psi = Matrix3::from_iterator(scale_cov(&psi, rng, p).iter().copied());
            cp.gamma = clamp_knot(cp.gamma * u(rng), bounds);
            if !freeze.paths {
                for v in cp.paths.iter_mut() {
                    *v *= u(rng);
                }
            }
            if !freeze.covariate_moments {
                for v in cp.cov_mean.iter_mut() {
                    *v *= u(rng);
                }
                cp.cov_cov = scale_cov(&cp.cov_cov, rng, p);
            }
            cp.residual *= u(rng);
        }
    }
    match &mut out.gating {
        Gating::Proportions(pr) => {
            for v in pr.iter_mut() {
                *v *= u(rng);
            }
            let s: f64 = pr.iter().sum();
            for v in pr.iter_mut() {
                *v /= s;
            }
        }
        Gating::Logistic(g) => {
            for v in g.intercepts.iter_mut() {
                *v *= u(rng);
            }
            if !freeze.gating_slopes {
                for v in g.coefficients.iter_mut().flatten() {
                    *v *= u(rng);
                }
            }
        }
    }
    out
}

/// Which packed coordinates are optimized.
pub(crate) fn free_mask(layout: &ParamLayout, freeze: &Freeze) -> Vec<bool> {
    let mut mask = vec![true; layout.len()];
    let c = layout.n_expert;
    for k in 0..layout.classes {
        let o = layout.class_offset(k);
        if freeze.class_params {
            mask[o..layout.class_offset(k + 1)].fill(false);
            continue;
        }
        if freeze.paths {
            mask[o + OFF_PATHS..o + OFF_PATHS + 3 * c].fill(false);
        }
        if freeze.covariate_moments {
            mask[o + layout.off_xmean()..o + layout.off_theta()].fill(false);
        }
    }
    if freeze.gating_slopes && layout.logistic() {
        let w = 1 + layout.n_gating;
        let g = layout.gating_offset();
        for k in 0..layout.classes - 1 {
            mask[g + k * w + 1..g + (k + 1) * w].fill(false);
        }
    }
    mask
}

/// Copies frozen groups from `reference` so they match it bit for bit.
pub(crate) fn restore_frozen(params: &mut MixtureParams, reference: &MixtureParams, freeze: &Freeze) {
    for (cp, rp) in params.classes.iter_mut().zip(&reference.classes) {
        if freeze.class_params {
            *cp = rp.clone();
            continue;
        }
        if freeze.paths {
            cp.paths = rp.paths.clone();
        }
        if freeze.covariate_moments {
            cp.cov_mean = rp.cov_mean.clone();
            cp.cov_cov = rp.cov_cov.clone();
        }
    }
    if freeze.gating_slopes {
        if let (Gating::Logistic(g), Gating::Logistic(r)) = (&mut params.gating, &reference.gating) {
            g.coefficients = r.coefficients.clone();
        }
    }
}

/// Adds a class gradient to its packed block.
pub(crate) fn class_grad_to_packed(g: &ClassGrad, dgamma: f64, block: &[f64], layout: &ParamLayout, out: &mut [f64]) {
    let c = layout.n_expert;
    for r in 0..3 {
        out[OFF_BETA0 + r] += g.beta0[r];
    }
    let l = read_chol3(&block[OFF_CHOL..OFF_CHOL + 6]);
    let gl = g.psi * l * 2.0;
    let mut idx = OFF_CHOL;
    for i in 0..3 {
        for j in 0..=i {
            out[idx] += if i == j { gl[(i, i)] * l[(i, i)] } else { gl[(i, j)] };
            idx += 1;
        }
    }
    out[OFF_GAMMA] += dgamma * layout.knot_jacobian(block[OFF_GAMMA]);
    for (o, v) in out[OFF_PATHS..OFF_PATHS + 3 * c].iter_mut().zip(&g.paths) {
        *o += v;
    }
    if layout.covariate_moments && c > 0 {
        let om = layout.off_xmean();
        for a in 0..c {
            out[om + a] += g.xmean[a];
        }
        let lx = read_chol(&block[layout.off_xchol()..layout.off_theta()], c);
        let glx = &g.phi * &lx * 2.0;
        let mut idx = layout.off_xchol();
        for i in 0..c {
            for j in 0..=i {
                out[idx] += if i == j { glx[(i, i)] * lx[(i, i)] } else { glx[(i, j)] };
                idx += 1;
            }
        }
    }
    let t = layout.off_theta();
    out[t] += g.theta * block[t].exp();
}

struct Run {
    params: MixtureParams,
    iterations: usize,
    trace: Vec<f64>,
    converged: bool,
    reason: String,
}

struct Engine<'a> {
    spec: &'a MixtureSpec,
    design: &'a Design,
    layout: ParamLayout,
    freeze: &'a Freeze,
    min_mass: f64,
}

impl Engine<'_> {
    fn check_mass(&self, resp: &[f64]) -> Result<()> {
        let k = self.spec.classes;
        for c in 0..k {
            let mass: f64 = resp.iter().skip(c).step_by(k).sum();
            if mass < self.min_mass {
                return Err(Error::DegenerateClass { class: c + 1, mass });
            }
        }
        Ok(())
    }

    fn run_em(&self, init: MixtureParams, reference: &MixtureParams, opts: &FitOptions) -> Result<Run> {
        let k = self.spec.classes;
        let n = self.design.n();
        let mut params = init;
        restore_frozen(&mut params, reference, self.freeze);
        let (mut ll, mut resp) = likelihood::e_step(self.spec, &params, self.design)?;
        let mut trace = vec![ll];
        let mut hinv: Vec<Option<DMatrix<f64>>> = vec![None; k];
        let mut small = 0;
        let mut w = vec![0.0; n];
        for it in 1..=opts.max_iterations {
            self.check_mass(&resp)?;
            if !self.freeze.class_params {
                for c in 0..k {
                    for (i, wi) in w.iter_mut().enumerate() {
                        *wi = resp[i * k + c];
                    }
                    params.classes[c] = self.m_step_class(&params.classes[c], &reference.classes[c], &w, &mut hinv[c])?;
                }
            }
            self.m_step_gating(&mut params, &resp)?;
            let (ll_new, r_new) = likelihood::e_step(self.spec, &params, self.design)?;
            if ll_new < ll - 1e-8 * ll.abs() {
                log::warn!("EM log-likelihood decreased at iteration {it}: {ll} -> {ll_new}");
            }
            trace.push(ll_new);
            let rel = (ll_new - ll).abs() / ll_new.abs().max(1e-300);
            ll = ll_new;
            resp = r_new;
            if rel < opts.tolerance {
                small += 1;
                if small >= 2 {
                    self.check_mass(&resp)?;
                    return Ok(Run {
                        params,
                        iterations: it,
                        trace,
                        converged: true,
                        reason: String::new(),
                    });
                }
            } else {
                small = 0;
            }
        }
        Ok(Run {
            params,
            iterations: opts.max_iterations,
            trace,
            converged: false,
            reason: format!("iteration limit {} reached", opts.max_iterations),
        })
    }

    fn m_step_class(
        &self,
        cp: &ClassParams,
        reference: &ClassParams,
        w: &[f64],
        hinv: &mut Option<DMatrix<f64>>,
    ) -> Result<ClassParams> {
        let layout = &self.layout;
        let c = layout.n_expert;
        let mass: f64 = w.iter().sum();
        let mut block = vec![0.0; layout.class_block_len()];
        pack_class(cp, layout, &mut block)?;
        let mut idx: Vec<usize> = (0..OFF_PATHS).collect();
        if !self.freeze.paths {
            idx.extend(OFF_PATHS..OFF_PATHS + 3 * c);
        }
        idx.push(layout.off_theta());
        let n = self.design.n() as f64;
        let frame = self.spec.frame;
        let design = self.design;
        let mut full = block.clone();
        let mut gfull = vec![0.0; block.len()];
        let objective = |x: &[f64], g: &mut [f64]| -> Option<f64> {
            for (&i, &v) in idx.iter().zip(x) {
                full[i] = v;
            }
            let cand = unpack_class(&full, layout);
            let ker = ClassKernel::with_factor(&cand, read_chol3(&full[OFF_CHOL..OFF_CHOL + 6]), frame, false).ok()?;
            let (v, cg, dg) = weighted_class_pass(&ker, design, w, true).ok()?;
            gfull.fill(0.0);
            class_grad_to_packed(&cg, dg, &full, layout, &mut gfull);
            for (o, &i) in g.iter_mut().zip(&idx) {
                *o = -gfull[i] / n;
            }
            Some(-v / n)
        };
        let x0: Vec<f64> = idx.iter().map(|&i| block[i]).collect();
        let bopts = crate::optim::BfgsOptions {
            max_iterations: 200,
            rel_tolerance: 1e-13,
            grad_tolerance: 1e-8,
            max_step: 5.0,
        };
        let res = crate::optim::minimize(objective, &x0, hinv.take(), &bopts)
            .ok_or_else(|| Error::Numeric("class objective undefined at the current estimates".into()))?;
        for (&i, &v) in idx.iter().zip(&res.x) {
            block[i] = v;
        }
        *hinv = Some(res.inverse_hessian);
        let mut out = unpack_class(&block, layout);
        if self.freeze.paths {
            out.paths = reference.paths.clone();
        }
        if self.spec.covariate_density() && !self.freeze.covariate_moments {
            let mut m = DVector::zeros(c);
            for (i, &wi) in w.iter().enumerate() {
                m += DVector::from_column_slice(design.expert_covariates(i)) * wi;
            }
            m /= mass;
            let mut s = DMatrix::zeros(c, c);
            for (i, &wi) in w.iter().enumerate() {
                let d = DVector::from_column_slice(design.expert_covariates(i)) - &m;
                s += &d * d.transpose() * wi;
            }
            s /= mass;
            if s.clone().cholesky().is_none() {
                s += DMatrix::identity(c, c) * 1e-8;
            }
            out.cov_mean = m;
            out.cov_cov = s;
        } else {
            out.cov_mean = cp.cov_mean.clone();
            out.cov_cov = cp.cov_cov.clone();
        }
        Ok(out)
    }

    fn m_step_gating(&self, params: &mut MixtureParams, resp: &[f64]) -> Result<()> {
        let k = self.spec.classes;
        if k == 1 {
            return Ok(());
        }
        let n = self.design.n() as f64;
        match &mut params.gating {
            Gating::Proportions(p) => {
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc = resp.iter().skip(c).step_by(k).sum::<f64>() / n;
                }
            }
            Gating::Logistic(g) => {
                let cg = self.design.n_gating();
                let x: Vec<f64> = (0..self.design.n())
                    .flat_map(|i| self.design.gating_covariates(i).iter().copied())
                    .collect();
                let lo = LogisticOptions {
                    max_iterations: 50,
                    tolerance: 1e-14,
                    cap: None,
                    slopes_free: !self.freeze.gating_slopes,
                };
                let fitted = fit_multinomial(&x, cg, resp, g, &lo)?;
                let slopes = g.coefficients.clone();
                *g = fitted.params;
                if self.freeze.gating_slopes {
                    g.coefficients = slopes;
                }
            }
        }
        Ok(())
    }

    /// Marginal log-likelihood and its gradient in packed coordinates.
    fn packed_loglik_grad(&self, values: &[f64], reference: &MixtureParams, grad: &mut [f64]) -> Result<f64> {
        let layout = &self.layout;
        let pv = crate::mixture::ParamVector {
            values: values.to_vec(),
            layout: layout.clone(),
        };
        let mut params = unpack(&pv)?;
        restore_frozen(&mut params, reference, self.freeze);
        let joint = likelihood::log_joint_matrix(self.spec, &params, self.design)?;
        let k = self.spec.classes;
        let (ll, resp) = likelihood::normalize_rows(&joint, k);
        grad.fill(0.0);
        let covd = self.spec.covariate_density();
        let mut w = vec![0.0; self.design.n()];
        if !self.freeze.class_params {
            for c in 0..k {
                for (i, wi) in w.iter_mut().enumerate() {
                    *wi = resp[i * k + c];
                }
                let block = &values[layout.class_offset(c)..layout.class_offset(c + 1)];
                let cp = &params.classes[c];
                let ker = ClassKernel::with_factor(cp, read_chol3(&block[OFF_CHOL..OFF_CHOL + 6]), self.spec.frame, covd)?;
                let (_, cg, dg) = weighted_class_pass(&ker, self.design, &w, true)?;
                class_grad_to_packed(&cg, dg, block, layout, &mut grad[layout.class_offset(c)..layout.class_offset(c + 1)]);
            }
        }
        let go = layout.gating_offset();
        match &params.gating {
            Gating::Proportions(p) => {
                for c in 1..k {
                    grad[go + c - 1] = resp.iter().skip(c).step_by(k).map(|r| r - p[c]).sum();
                }
            }
            Gating::Logistic(g) => {
                let cg = layout.n_gating;
                let wdt = 1 + cg;
                let mut lg = vec![0.0; k];
                for i in 0..self.design.n() {
                    let x = self.design.gating_covariates(i);
                    log_gating_into(x, g, &mut lg);
                    for c in 1..k {
                        let d = resp[i * k + c] - lg[c].exp();
                        let o = go + (c - 1) * wdt;
                        grad[o] += d;
                        for (j, xj) in x.iter().enumerate() {
                            grad[o + 1 + j] += d * xj;
                        }
                    }
                }
            }
        }
        Ok(ll)
    }

    fn run_direct(&self, init: MixtureParams, reference: &MixtureParams, opts: &FitOptions) -> Result<Run> {
        let mut init = init;
        restore_frozen(&mut init, reference, self.freeze);
        let base = pack(&init, &self.layout)?.values;
        let mask = free_mask(&self.layout, self.freeze);
        let idx: Vec<usize> = (0..base.len()).filter(|&i| mask[i]).collect();
        let n = self.design.n() as f64;
        let mut full = base.clone();
        let mut gfull = vec![0.0; base.len()];
        let objective = |x: &[f64], g: &mut [f64]| -> Option<f64> {
            for (&i, &v) in idx.iter().zip(x) {
                full[i] = v;
            }
            let ll = self.packed_loglik_grad(&full, reference, &mut gfull).ok()?;
            for (o, &i) in g.iter_mut().zip(&idx) {
                *o = -gfull[i] / n;
            }
            Some(-ll / n)
        };
        let x0: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
        let bopts = crate::optim::BfgsOptions {
            max_iterations: opts.max_iterations,
            rel_tolerance: opts.tolerance * 1e-4,
            grad_tolerance: 1e-7,
            max_step: 5.0,
        };
        let ll0 = likelihood::log_likelihood(self.spec, &init, self.design)?;
        let res = crate::optim::minimize(objective, &x0, None, &bopts)
            .ok_or_else(|| Error::Numeric("log-likelihood undefined at the start values".into()))?;
        let mut values = base;
        for (&i, &v) in idx.iter().zip(&res.x) {
            values[i] = v;
        }
        let mut params = unpack(&crate::mixture::ParamVector {
            values,
            layout: self.layout.clone(),
        })?;
        restore_frozen(&mut params, reference, self.freeze);
        let (ll, resp) = likelihood::e_step(self.spec, &params, self.design)?;
        self.check_mass(&resp)?;
        Ok(Run {
            params,
            iterations: res.iterations,
            trace: vec![ll0, ll],
            converged: res.converged,
            reason: if res.converged {
                String::new()
            } else {
                "quasi-Newton iteration did not converge".into()
            },
        })
    }

    fn finish(&self, run: Run, attempt: usize, opts: &FitOptions) -> Result<FittedModel> {
        let (estimates, _) = run.params.canonicalized();
        let (ll, resp) = likelihood::e_step(self.spec, &estimates, self.design)?;
        let mut status = if run.converged {
            FitStatus::Converged
        } else {
            FitStatus::NotConverged(run.reason)
        };
        let standard_errors = if opts.standard_errors {
            match inference::standard_errors_design(self.spec, &estimates, self.design, &opts.freeze) {
                Ok(se) => {
                    if se.singular && status == FitStatus::Converged {
                        status = FitStatus::NotConverged("observed information is not positive definite".into());
                    }
                    Some(se)
                }
                // e.g. a covariance on the boundary leaves no room for difference steps
                Err(e) => {
                    if status == FitStatus::Converged {
                        status = FitStatus::NotConverged(format!("standard errors unavailable: {e}"));
                    }
                    None
                }
            }
        } else {
            None
        };
        let free_parameters = free_mask(&self.layout, &opts.freeze).iter().filter(|f| **f).count();
        debug_assert!(free_parameters <= parameter_count(self.spec));
        Ok(FittedModel {
            spec: self.spec.clone(),
            knot_bounds: self.layout.knot_bounds,
            original: estimates.to_frame(Frame::Original),
            reparameterized: estimates.to_frame(Frame::Reparameterized),
            estimates,
            log_likelihood: ll,
            responsibilities: DMatrix::from_row_slice(self.design.n(), self.spec.classes, &resp),
            status,
            attempts: attempt,
            iterations: run.iterations,
            trace: run.trace,
            standard_errors,
            n: self.design.n(),
            free_parameters,
            freeze: opts.freeze.clone(),
        })
    }
}

/// Per-K result of [`enumerate_classes`].
#[derive(Debug, Clone)]
pub struct EnumerationEntry {
    pub classes: usize,
    pub fit: Option<FittedModel>,
    pub criteria: Option<InformationCriteria>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Enumeration {
    pub entries: Vec<EnumerationEntry>,
    /// Class count with the smallest BIC among converged fits.
    pub chosen: usize,
}

/// Fits covariate-free mixtures with K = 1..=k_max and picks the BIC
/// minimizer among converged fits.
pub fn enumerate_classes(data: &LongitudinalDataset, k_max: usize, opts: &FitOptions) -> Result<Enumeration> {
    if k_max == 0 {
        return invalid("k_max must be at least 1");
    }
    let mut entries = Vec::new();
    let mut chosen: Option<(usize, f64)> = None;
    for k in 1..=k_max {
        let spec = MixtureSpec::new(crate::mixture::ModelKind::Fmm, k);
        match fit(&spec, data, None, opts) {
            Ok(f) => {
                let ic = f.information_criteria();
                if f.converged() {
                    if chosen.is_none_or(|(_, b)| ic.bic < b) {
                        chosen = Some((k, ic.bic));
                    }
                } else {
                    log::warn!("K={k} did not converge and is excluded from the comparison");
                }
                entries.push(EnumerationEntry {
                    classes: k,
                    criteria: Some(ic),
                    fit: Some(f),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("K={k} failed: {e}");
                entries.push(EnumerationEntry {
                    classes: k,
                    fit: None,
                    criteria: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let chosen = chosen
        .ok_or_else(|| Error::Numeric("no class count produced a converged fit".into()))?
        .0;
    Ok(Enumeration { entries, chosen })
}
