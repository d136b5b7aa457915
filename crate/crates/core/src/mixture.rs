//! Mixture variants, gating functions and parameter-vector layouts.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::growth::{ClassParams, Frame};

/// Which covariate paths a mixture carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// No covariates.
    Fmm,
    /// Cluster predictors only: covariates in the gating function.
    Cp,
    /// Growth predictors only: covariates on the growth factors.
    Gp,
    /// Both.
    Full,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Fmm, ModelKind::Cp, ModelKind::Gp, ModelKind::Full];

    pub fn has_gating_covariates(self) -> bool {
        matches!(self, ModelKind::Cp | ModelKind::Full)
    }

    pub fn has_expert_covariates(self) -> bool {
        matches!(self, ModelKind::Gp | ModelKind::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fmm => "fmm",
            ModelKind::Cp => "cp",
            ModelKind::Gp => "gp",
            ModelKind::Full => "full",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fmm" => Ok(ModelKind::Fmm),
            "cp" => Ok(ModelKind::Cp),
            "gp" => Ok(ModelKind::Gp),
            "full" => Ok(ModelKind::Full),
            other => invalid(format!("unknown model kind '{other}'")),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MixtureSpec {
    pub kind: ModelKind,
    pub classes: usize,
    #[serde(default)]
    pub gating_covariates: Vec<String>,
    #[serde(default)]
    pub expert_covariates: Vec<String>,
    #[serde(default)]
    pub frame: Frame,
    /// Multiply each class's outcome density by a class-specific Gaussian
    /// density of the expert covariates. When false the expert covariates
    /// are treated as fixed regressors.
    #[serde(default = "default_true")]
    pub joint_covariate_density: bool,
}

impl MixtureSpec {
    pub fn new(kind: ModelKind, classes: usize) -> Self {
        Self {
            kind,
            classes,
            gating_covariates: Vec::new(),
            expert_covariates: Vec::new(),
            frame: Frame::Original,
            joint_covariate_density: true,
        }
    }

    pub fn with_gating<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.gating_covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_expert<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.expert_covariates = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn n_gating(&self) -> usize {
        self.gating_covariates.len()
    }

    pub fn n_expert(&self) -> usize {
        self.expert_covariates.len()
    }

    /// Whether the gating function is multinomial-logistic (as opposed to
    /// free mixing proportions).
    pub fn logistic_gating(&self) -> bool {
        self.kind.has_gating_covariates()
    }

    /// Whether class densities carry the covariate term.
    pub fn covariate_density(&self) -> bool {
        self.joint_covariate_density && self.n_expert() > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return invalid("the number of classes must be at least 1");
        }
        if !self.kind.has_gating_covariates() && !self.gating_covariates.is_empty() {
            return invalid(format!("{} models cannot have gating covariates", self.kind));
        }
        if !self.kind.has_expert_covariates() && !self.expert_covariates.is_empty() {
            return invalid(format!("{} models cannot have expert covariates", self.kind));
        }
        let mut seen = std::collections::HashSet::new();
        for name in self.gating_covariates.iter().chain(&self.expert_covariates) {
            if !seen.insert(name.as_str()) {
                return invalid(format!(
                    "covariate '{name}' is listed twice; a covariate holds exactly one role"
                ));
            }
        }
        Ok(())
    }
}

/// Multinomial-logistic gating with class 1 as the reference: one intercept
/// and one coefficient vector for each of classes 2..K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl GatingParams {
    pub fn zeros(classes: usize, covariates: usize) -> Self {
        let m = classes.saturating_sub(1);
        Self {
            intercepts: vec![0.0; m],
            coefficients: vec![vec![0.0; covariates]; m],
        }
    }

    pub fn classes(&self) -> usize {
        self.intercepts.len() + 1
    }

    pub fn n_covariates(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    fn validate(&self, classes: usize, covariates: usize) -> Result<()> {
        if self.intercepts.len() + 1 != classes || self.coefficients.len() + 1 != classes {
            return invalid(format!("gating needs exactly {} coefficient sets", classes - 1));
        }
        if self.coefficients.iter().any(|c| c.len() != covariates) {
            return invalid(format!("gating coefficient vectors must have length {covariates}"));
        }
        if self.intercepts.iter().chain(self.coefficients.iter().flatten()).any(|v| !v.is_finite()) {
            return invalid("gating coefficients must be finite");
        }
        Ok(())
    }

    /// Linear predictor of class `k` (0-based; class 0 is the reference).
    #[inline]
    pub fn predictor(&self, k: usize, x: &[f64]) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let b = &self.coefficients[k - 1];
        self.intercepts[k - 1] + b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Log-probabilities of the gating function written into `out` (length K).
pub(crate) fn log_gating_into(x: &[f64], gp: &GatingParams, out: &mut [f64]) {
    let mut max = 0.0f64;
    for (k, o) in out.iter_mut().enumerate() {
        *o = gp.predictor(k, x);
        max = max.max(*o);
    }
    let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

/// Class-membership probabilities for covariate vector `x_g`.
pub fn gating_probabilities(x_g: &[f64], gp: &GatingParams) -> Result<Vec<f64>> {
    if x_g.iter().any(|v| !v.is_finite()) {
        return invalid("gating covariates must be finite");
    }
    gp.validate(gp.classes(), x_g.len())?;
    let mut out = vec![0.0; gp.classes()];
    log_gating_into(x_g, gp, &mut out);
    for v in &mut out {
        *v = v.exp();
    }
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    Ok(out)
}

/// Mixing weights: free proportions (FMM, GP) or a logistic gating function
/// (CP, Full).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    Proportions(Vec<f64>),
    Logistic(GatingParams),
}

/// All parameters of a fitted or generating mixture, in `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub frame: Frame,
    pub classes: Vec<ClassParams>,
    pub gating: Gating,
}

impl MixtureParams {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self, spec: &MixtureSpec) -> Result<()> {
        spec.validate()?;
        if self.classes.len() != spec.classes {
            return invalid(format!(
                "spec declares {} classes but parameters carry {}",
                spec.classes,
                self.classes.len()
            ));
        }
        for (k, c) in self.classes.iter().enumerate() {
            c.validate()?;
            if c.n_covariates() != spec.n_expert() {
                return invalid(format!(
                    "class {} has {} path columns, spec has {} expert covariates",
                    k + 1,
                    c.n_covariates(),
                    spec.n_expert()
                ));
            }
        }
        match (&self.gating, spec.logistic_gating()) {
            (Gating::Proportions(p), false) => {
                if p.len() != spec.classes {
                    return invalid("mixing proportions must have one entry per class");
                }
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return invalid("mixing proportions must lie on the simplex");
                }
            }
            (Gating::Logistic(g), true) => g.validate(spec.classes, spec.n_gating())?,
            _ => return invalid(format!("gating form does not match model kind {}", spec.kind)),
        }
        Ok(())
    }

    pub fn to_frame(&self, target: Frame) -> MixtureParams {
        MixtureParams {
            frame: target,
            classes: self.classes.iter().map(|c| c.to_frame(self.frame, target)).collect(),
            gating: self.gating.clone(),
        }
    }

    /// Relabels classes so that new class `j` is old class `order[j]`.
    /// Logistic gating is re-expressed against the new reference class.
    pub fn permuted(&self, order: &[usize]) -> MixtureParams {
        let classes = order.iter().map(|&o| self.classes[o].clone()).collect();
        let gating = match &self.gating {
            Gating::Proportions(p) => Gating::Proportions(order.iter().map(|&o| p[o]).collect()),
            Gating::Logistic(g) => {
                let c = g.n_covariates();
                let coef = |k: usize| -> (f64, Vec<f64>) {
                    if k == 0 {
                        (0.0, vec![0.0; c])
                    } else {
                        (g.intercepts[k - 1], g.coefficients[k - 1].clone())
                    }
                };
                let (ref_int, ref_coef) = coef(order[0]);
                let mut intercepts = Vec::new();
                let mut coefficients = Vec::new();
                for &o in &order[1..] {
                    let (i, b) = coef(o);
                    intercepts.push(i - ref_int);
                    coefficients.push(b.iter().zip(&ref_coef).map(|(a, r)| a - r).collect());
                }
                Gating::Logistic(GatingParams {
                    intercepts,
                    coefficients,
                })
            }
        };
        MixtureParams {
            frame: self.frame,
            classes,
            gating,
        }
    }

    /// Relabels classes by ascending knot.
    pub fn canonicalized(&self) -> (MixtureParams, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.sort_by(|&a, &b| self.classes[a].gamma.total_cmp(&self.classes[b].gamma));
        (self.permuted(&order), order)
    }
}

/// Number of free parameters, as used by information criteria.
pub fn parameter_count(spec: &MixtureSpec) -> usize {
    let layout = ParamLayout::new(spec, (0.0, 1.0));
    layout.len()
}

/// Segment map of the packed, unconstrained parameter vector.
///
/// Per class: `beta0` (3), Cholesky factor of Psi with log diagonal (6),
/// logit-scaled knot (1), paths (3c, row-major), covariate mean (c),
/// Cholesky factor of Phi with log diagonal (c(c+1)/2), log residual
/// variance (1). Covariate moments are absent when the spec does not carry
/// the covariate density. Then the gating block: K-1 log-odds against class
/// 1 for proportions, or (K-1)(1 + c_g) intercepts and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub kind: ModelKind,
    pub classes: usize,
    pub n_gating: usize,
    pub n_expert: usize,
    pub covariate_moments: bool,
    pub frame: Frame,
    pub knot_bounds: (f64, f64),
}

pub(crate) const OFF_BETA0: usize = 0;
pub(crate) const OFF_CHOL: usize = 3;
pub(crate) const OFF_GAMMA: usize = 9;
pub(crate) const OFF_PATHS: usize = 10;

impl ParamLayout {
    pub fn new(spec: &MixtureSpec, knot_bounds: (f64, f64)) -> Self {
        Self {
            kind: spec.kind,
            classes: spec.classes,
            n_gating: spec.n_gating(),
            n_expert: spec.n_expert(),
            covariate_moments: spec.covariate_density(),
            frame: spec.frame,
            knot_bounds,
        }
    }

    pub fn logistic(&self) -> bool {
        self.kind.has_gating_covariates()
    }

    pub(crate) fn off_xmean(&self) -> usize {
        OFF_PATHS + 3 * self.n_expert
    }

    pub(crate) fn off_xchol(&self) -> usize {
        self.off_xmean() + if self.covariate_moments { self.n_expert } else { 0 }
    }

    pub(crate) fn off_theta(&self) -> usize {
        let c = self.n_expert;
        self.off_xchol() + if self.covariate_moments { c * (c + 1) / 2 } else { 0 }
    }

    pub fn class_block_len(&self) -> usize {
        self.off_theta() + 1
    }

    pub fn class_offset(&self, k: usize) -> usize {
        k * self.class_block_len()
    }

    pub fn gating_offset(&self) -> usize {
        self.classes * self.class_block_len()
    }

    pub fn gating_len(&self) -> usize {
        let m = self.classes - 1;
        if self.logistic() {
            m * (1 + self.n_gating)
        } else {
            m
        }
    }

    pub fn len(&self) -> usize {
        self.gating_offset() + self.gating_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn knot_from_raw(&self, u: f64) -> f64 {
        let (lo, hi) = self.knot_bounds;
        lo + (hi - lo) / (1.0 + (-u).exp())
    }

    /// d(knot)/d(raw).
    pub(crate) fn knot_jacobian(&self, u: f64) -> f64 {
        let (lo, hi) = self.knot_bounds;
        let s = 1.0 / (1.0 + (-u).exp());
        (hi - lo) * s * (1.0 - s)
    }

    pub(crate) fn knot_to_raw(&self, gamma: f64) -> Result<f64> {
        let (lo, hi) = self.knot_bounds;
        if !(gamma > lo && gamma < hi) {
            return invalid(format!("knot {gamma} is outside the open interval ({lo}, {hi})"));
        }
        let p = (gamma - lo) / (hi - lo);
        Ok((p / (1.0 - p)).ln())
    }
}

/// Flat unconstrained parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

/// Lower-triangular Cholesky factor written row-major with log diagonal.
pub(crate) fn write_chol(l: &DMatrix<f64>, out: &mut [f64]) {
    let mut idx = 0;
    for i in 0..l.nrows() {
        for j in 0..=i {
            out[idx] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            idx += 1;
        }
    }
}

pub(crate) fn read_chol(raw: &[f64], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { raw[idx].exp() } else { raw[idx] };
            idx += 1;
        }
    }
    l
}

pub(crate) fn read_chol3(raw: &[f64]) -> Matrix3<f64> {
    Matrix3::new(
        raw[0].exp(),
        0.0,
        0.0,
        raw[1],
        raw[2].exp(),
        0.0,
        raw[3],
        raw[4],
        raw[5].exp(),
    )
}

fn cholesky_of(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| crate::error::Error::InvalidInput(format!("{name} must be positive definite to pack")))
}

pub(crate) fn pack_class(cp: &ClassParams, layout: &ParamLayout, b: &mut [f64]) -> Result<()> {
    let c = layout.n_expert;
    if cp.n_covariates() != c {
        return invalid("path columns do not match layout");
    }
    b[OFF_BETA0..OFF_BETA0 + 3].copy_from_slice(cp.beta0.as_slice());
    let psi = DMatrix::from_iterator(3, 3, cp.psi.iter().copied());
    write_chol(&cholesky_of(&psi, "Psi")?, &mut b[OFF_CHOL..OFF_CHOL + 6]);
    b[OFF_GAMMA] = layout.knot_to_raw(cp.gamma)?;
    for r in 0..3 {
        for j in 0..c {
            b[OFF_PATHS + r * c + j] = cp.paths[(r, j)];
        }
    }
    if layout.covariate_moments {
        let om = layout.off_xmean();
        b[om..om + c].copy_from_slice(cp.cov_mean.as_slice());
        let oc = layout.off_xchol();
        write_chol(&cholesky_of(&cp.cov_cov, "Phi")?, &mut b[oc..oc + c * (c + 1) / 2]);
    }
    if !(cp.residual > 0.0) {
        return invalid("residual variance must be positive to pack");
    }
    b[layout.off_theta()] = cp.residual.ln();
    Ok(())
}

pub fn pack(params: &MixtureParams, layout: &ParamLayout) -> Result<ParamVector> {
    if params.classes.len() != layout.classes {
        return invalid("class count does not match layout");
    }
    if params.frame != layout.frame {
        return invalid("parameter frame does not match layout frame");
    }
    let mut v = vec![0.0; layout.len()];
    for (k, cp) in params.classes.iter().enumerate() {
        pack_class(cp, layout, &mut v[layout.class_offset(k)..layout.class_offset(k + 1)])?;
    }
    let g = &mut v[layout.gating_offset()..];
    match (&params.gating, layout.logistic()) {
        (Gating::Proportions(p), false) => {
            if p.len() != layout.classes || p.iter().any(|&x| !(x > 0.0)) {
                return invalid("proportions must be strictly positive to pack");
            }
            for k in 1..layout.classes {
                g[k - 1] = (p[k] / p[0]).ln();
            }
        }
        (Gating::Logistic(gp), true) => {
            gp.validate(layout.classes, layout.n_gating)?;
            let w = 1 + layout.n_gating;
            for k in 1..layout.classes {
                g[(k - 1) * w] = gp.intercepts[k - 1];
                g[(k - 1) * w + 1..k * w].copy_from_slice(&gp.coefficients[k - 1]);
            }
        }
        _ => return invalid("gating form does not match layout"),
    }
    Ok(ParamVector {
        values: v,
        layout: layout.clone(),
    })
}

pub(crate) fn unpack_class(b: &[f64], layout: &ParamLayout) -> ClassParams {
    let c = layout.n_expert;
    let l = read_chol3(&b[OFF_CHOL..OFF_CHOL + 6]);
    let psi = l * l.transpose();
    let mut paths = DMatrix::zeros(3, c);
    for r in 0..3 {
        for j in 0..c {
            paths[(r, j)] = b[OFF_PATHS + r * c + j];
        }
    }
    let (cov_mean, cov_cov) = if layout.covariate_moments {
        let om = layout.off_xmean();
        let lc = read_chol(&b[layout.off_xchol()..layout.off_theta()], c);
        (DVector::from_column_slice(&b[om..om + c]), &lc * lc.transpose())
    } else {
        (DVector::zeros(c), DMatrix::identity(c, c))
    };
    ClassParams {
        beta0: Vector3::new(b[0], b[1], b[2]),
        psi,
        gamma: layout.knot_from_raw(b[OFF_GAMMA]),
        paths,
        cov_mean,
        cov_cov,
        residual: b[layout.off_theta()].exp(),
    }
}

pub(crate) fn unpack_gating(g: &[f64], layout: &ParamLayout) -> Gating {
    let k = layout.classes;
    if layout.logistic() {
        let w = 1 + layout.n_gating;
        Gating::Logistic(GatingParams {
            intercepts: (1..k).map(|j| g[(j - 1) * w]).collect(),
            coefficients: (1..k).map(|j| g[(j - 1) * w + 1..j * w].to_vec()).collect(),
        })
    } else {
        let mut logits = vec![0.0];
        logits.extend_from_slice(&g[..k - 1]);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Gating::Proportions(e.iter().map(|v| v / s).collect())
    }
}

pub fn unpack(v: &ParamVector) -> Result<MixtureParams> {
    let layout = &v.layout;
    if v.values.len() != layout.len() {
        return invalid(format!(
            "parameter vector has length {} but layout expects {}",
            v.values.len(),
            layout.len()
        ));
    }
    let classes = (0..layout.classes)
        .map(|k| unpack_class(&v.values[layout.class_offset(k)..layout.class_offset(k + 1)], layout))
        .collect();
    Ok(MixtureParams {
        frame: layout.frame,
        classes,
        gating: unpack_gating(&v.values[layout.gating_offset()..], layout),
    })
}

const PSI_NAMES: [&str; 6] = ["psi00", "psi01", "psi02", "psi11", "psi12", "psi22"];
pub(crate) const PSI_INDEX: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Names of the natural-scale parameters, aligned with [`natural_vector`].
pub fn natural_names(spec: &MixtureSpec) -> Vec<String> {
    let mut names = Vec::new();
    let ce = &spec.expert_covariates;
    for k in 1..=spec.classes {
        let p = format!("class{k}.");
        for f in 0..3 {
            names.push(format!("{p}eta{f}"));
        }
        for n in PSI_NAMES {
            names.push(format!("{p}{n}"));
        }
        names.push(format!("{p}knot"));
        for f in 0..3 {
            for x in ce {
                names.push(format!("{p}path_eta{f}_{x}"));
            }
        }
        if spec.covariate_density() {
            for x in ce {
                names.push(format!("{p}xmean_{x}"));
            }
            for a in 0..ce.len() {
                for b in a..ce.len() {
                    names.push(format!("{p}xcov_{}_{}", ce[a], ce[b]));
                }
            }
        }
        names.push(format!("{p}theta"));
    }
    for k in 2..=spec.classes {
        let p = format!("class{k}.");
        if spec.logistic_gating() {
            names.push(format!("{p}gate_intercept"));
            for x in &spec.gating_covariates {
                names.push(format!("{p}gate_{x}"));
            }
        } else {
            names.push(format!("{p}proportion"));
        }
    }
    names
}

/// What a natural-scale parameter is, for masks and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NaturalRole {
    Mean,
    Psi,
    Knot,
    Path,
    CovMean,
    CovCov,
    Residual,
    GateIntercept,
    GateSlope,
    Proportion,
}

/// (0-based class, role) for each entry of [`natural_vector`].
pub(crate) fn natural_roles(spec: &MixtureSpec) -> Vec<(usize, NaturalRole)> {
    use NaturalRole::*;
    let c = spec.n_expert();
    let mut out = Vec::new();
    for k in 0..spec.classes {
        out.extend(std::iter::repeat_n((k, Mean), 3));
        out.extend(std::iter::repeat_n((k, Psi), 6));
        out.push((k, Knot));
        out.extend(std::iter::repeat_n((k, Path), 3 * c));
        if spec.covariate_density() {
            out.extend(std::iter::repeat_n((k, CovMean), c));
            out.extend(std::iter::repeat_n((k, CovCov), c * (c + 1) / 2));
        }
        out.push((k, Residual));
    }
    for k in 1..spec.classes {
        if spec.logistic_gating() {
            out.push((k, GateIntercept));
            out.extend(std::iter::repeat_n((k, GateSlope), spec.n_gating()));
        } else {
            out.push((k, Proportion));
        }
    }
    out
}

/// Natural-scale parameters (means, unique covariance entries, knot,
/// residual variance, proportions of classes 2..K or gating coefficients).
/// Length equals [`parameter_count`].
pub fn natural_vector(params: &MixtureParams, spec: &MixtureSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(parameter_count(spec));
    let c = spec.n_expert();
    for cp in &params.classes {
        out.extend_from_slice(cp.beta0.as_slice());
        for (i, j) in PSI_INDEX {
            out.push(cp.psi[(i, j)]);
        }
        out.push(cp.gamma);
        for r in 0..3 {
            for j in 0..c {
                out.push(cp.paths[(r, j)]);
            }
        }
        if spec.covariate_density() {
            out.extend_from_slice(cp.cov_mean.as_slice());
            for a in 0..c {
                for b in a..c {
                    out.push(cp.cov_cov[(a, b)]);
                }
            }
        }
        out.push(cp.residual);
    }
    match &params.gating {
        Gating::Proportions(p) => out.extend_from_slice(&p[1..]),
        Gating::Logistic(g) => {
            for k in 0..g.intercepts.len() {
                out.push(g.intercepts[k]);
                out.extend_from_slice(&g.coefficients[k]);
            }
        }
    }
    out
}

/// Inverse of [`natural_vector`]. Performs no validity checks.
pub fn from_natural(values: &[f64], spec: &MixtureSpec, frame: Frame) -> Result<MixtureParams> {
    if values.len() != parameter_count(spec) {
        return invalid(format!(
            "natural vector has length {} but the spec has {} parameters",
            values.len(),
            parameter_count(spec)
        ));
    }
    let c = spec.n_expert();
    let mut it = values.iter().copied();
    let mut next = || it.next().unwrap();
    let mut classes = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let beta0 = Vector3::new(next(), next(), next());
        let mut psi = Matrix3::zeros();
        for (i, j) in PSI_INDEX {
            let v = next();
            psi[(i, j)] = v;
            psi[(j, i)] = v;
        }
        let gamma = next();
        let mut paths = DMatrix::zeros(3, c);
        for r in 0..3 {
            for j in 0..c {
                paths[(r, j)] = next();
            }
        }
        let (cov_mean, cov_cov) = if spec.covariate_density() {
            let m = DVector::from_iterator(c, (0..c).map(|_| next()));
            let mut s = DMatrix::zeros(c, c);
            for a in 0..c {
                for b in a..c {
                    let v = next();
                    s[(a, b)] = v;
                    s[(b, a)] = v;
                }
            }
            (m, s)
        } else {
            (DVector::zeros(c), DMatrix::identity(c, c))
        };
        let residual = next();
        classes.push(ClassParams {
            beta0,
            psi,
            gamma,
            paths,
            cov_mean,
            cov_cov,
            residual,
        });
    }
    let gating = if spec.logistic_gating() {
        let mut g = GatingParams::zeros(spec.classes, spec.n_gating());
        for k in 0..spec.classes - 1 {
            g.intercepts[k] = next();
            for j in 0..spec.n_gating() {
                g.coefficients[k][j] = next();
            }
        }
        Gating::Logistic(g)
    } else {
        let tail: Vec<f64> = (1..spec.classes).map(|_| next()).collect();
        let mut p = vec![1.0 - tail.iter().sum::<f64>()];
        p.extend(tail);
        Gating::Proportions(p)
    };
    Ok(MixtureParams { frame, classes, gating })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn symmetric_gating() {
        let p = gating_probabilities(&[0.3], &GatingParams::zeros(2, 1)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = gating_probabilities(&[], &GatingParams::zeros(3, 0)).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn unbalanced_intercept() {
        let g = GatingParams {
            intercepts: vec![0.775],
            coefficients: vec![vec![0.0, 0.0]],
        };
        let p = gating_probabilities(&[1.2, -0.4], &g).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / (1.0 + 0.775f64.exp()), epsilon = 1e-15);
        assert!((p[0] - 0.3154).abs() < 5e-5 && (p[1] - 0.6846).abs() < 5e-5);
    }

    #[test]
    fn gating_rejects_bad_input() {
        assert!(gating_probabilities(&[f64::NAN], &GatingParams::zeros(2, 1)).is_err());
        assert!(gating_probabilities(&[1.0, 2.0], &GatingParams::zeros(2, 1)).is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(parameter_count(&MixtureSpec::new(ModelKind::Fmm, 1)), 11);
        assert_eq!(parameter_count(&MixtureSpec::new(ModelKind::Fmm, 2)), 23);
        let full = MixtureSpec::new(ModelKind::Full, 2)
            .with_gating(["g1", "g2"])
            .with_expert(["e1", "e2"]);
        assert_eq!(parameter_count(&full), 47);
        let cp = MixtureSpec::new(ModelKind::Cp, 2).with_gating(["g1", "g2"]);
        let gp = MixtureSpec::new(ModelKind::Gp, 2).with_expert(["e1", "e2"]);
        // additive increments over FMM: gating slopes (K-1)c_g, per-class
        // expert blocks 3c + c + c(c+1)/2
        let fmm = parameter_count(&MixtureSpec::new(ModelKind::Fmm, 2));
        assert_eq!(parameter_count(&cp), fmm + 2);
        assert_eq!(parameter_count(&gp), fmm + 2 * (6 + 2 + 3));
        assert_eq!(parameter_count(&full), fmm + 2 + 2 * (6 + 2 + 3));
        let mut cond = full.clone();
        cond.joint_covariate_density = false;
        assert_eq!(parameter_count(&cond), 47 - 2 * 5);
    }

    #[test]
    fn spec_validation() {
        assert!(MixtureSpec::new(ModelKind::Fmm, 0).validate().is_err());
        assert!(MixtureSpec::new(ModelKind::Fmm, 2).with_gating(["a"]).validate().is_err());
        assert!(MixtureSpec::new(ModelKind::Cp, 2).with_expert(["a"]).validate().is_err());
        assert!(MixtureSpec::new(ModelKind::Gp, 2).with_gating(["a"]).validate().is_err());
        let dual = MixtureSpec::new(ModelKind::Full, 2).with_gating(["a"]).with_expert(["a"]);
        let err = dual.validate().unwrap_err().to_string();
        assert!(err.contains("one role"), "{err}");
    }

    #[test]
    fn zero_vector_unpacks_to_identity_factors() {
        let spec = MixtureSpec::new(ModelKind::Gp, 2).with_expert(["e"]);
        let layout = ParamLayout::new(&spec, (1.0, 8.0));
        let v = ParamVector {
            values: vec![0.0; layout.len()],
            layout: layout.clone(),
        };
        let p = unpack(&v).unwrap();
        for c in &p.classes {
            assert_eq!(c.beta0, Vector3::zeros());
            assert_eq!(c.psi, Matrix3::identity());
            assert_eq!(c.cov_cov, DMatrix::identity(1, 1));
            assert_eq!(c.residual, 1.0);
            assert_abs_diff_eq!(c.gamma, 4.5, epsilon = 1e-15);
        }
        assert_eq!(p.gating, Gating::Proportions(vec![0.5, 0.5]));
        assert!(unpack(&ParamVector {
            values: vec![0.0; 3],
            layout
        })
        .is_err());
    }

    #[test]
    fn permutation_reexpresses_gating() {
        let spec = MixtureSpec::new(ModelKind::Cp, 3).with_gating(["a"]);
        let gp = GatingParams {
            intercepts: vec![0.4, -1.0],
            coefficients: vec![vec![0.7], vec![0.2]],
        };
        let class = ClassParams::without_covariates(Vector3::zeros(), Matrix3::identity(), 4.0, 1.0);
        let params = MixtureParams {
            frame: Frame::Original,
            classes: vec![class.clone(), class.clone(), class],
            gating: Gating::Logistic(gp.clone()),
        };
        params.validate(&spec).unwrap();
        let order = [2, 0, 1];
        let perm = params.permuted(&order);
        let Gating::Logistic(g2) = &perm.gating else { panic!() };
        let x = [0.37];
        let before = gating_probabilities(&x, &gp).unwrap();
        let after = gating_probabilities(&x, g2).unwrap();
        for (j, &o) in order.iter().enumerate() {
            assert_abs_diff_eq!(after[j], before[o], epsilon = 1e-14);
        }
    }
}
