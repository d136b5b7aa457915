//! Relating covariates to latent classes after the classes are fixed:
//! modal-assignment regression (three-step) and the full likelihood with
//! every within-class parameter frozen (two-step).

use serde::{Deserialize, Serialize};

use crate::classification::{modal_assignment, posterior_matrix};
use crate::data::LongitudinalDataset;
use crate::error::{invalid, Error, Result};
use crate::fit::{fit, FitOptions, FittedModel, StartValues};
use crate::inference::WALD_Z;
use crate::logistic::{fit_multinomial, LogisticOptions};
use crate::mixture::{Gating, GatingParams, MixtureSpec, ModelKind};

/// Coefficient cap for the modal-assignment regression.
pub const SEPARATION_CAP: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepwiseMethod {
    TwoStep,
    ThreeStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingCoefficient {
    /// 1-based class, compared against class 1.
    pub class: usize,
    /// Covariate name, or `intercept`.
    pub term: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseResult {
    pub method: StepwiseMethod,
    pub covariates: Vec<String>,
    pub gating: GatingParams,
    pub coefficients: Vec<GatingCoefficient>,
    pub converged: bool,
    pub separated: bool,
    /// Log-likelihood of the final stage.
    pub log_likelihood: f64,
}

impl StepwiseResult {
    pub fn coefficient(&self, class: usize, term: &str) -> Option<&GatingCoefficient> {
        self.coefficients.iter().find(|c| c.class == class && c.term == term)
    }
}

fn coefficient(class: usize, term: &str, estimate: f64, se: Option<f64>) -> GatingCoefficient {
    GatingCoefficient {
        class,
        term: term.to_string(),
        estimate,
        se,
        lower: se.map(|s| estimate - WALD_Z * s),
        upper: se.map(|s| estimate + WALD_Z * s),
    }
}

fn design_matrix(data: &LongitudinalDataset, covariates: &[String]) -> Result<Vec<f64>> {
    if covariates.is_empty() {
        return invalid("stepwise fits need at least one gating covariate");
    }
    let idx: Vec<usize> = covariates.iter().map(|n| data.covariate_index(n)).collect::<Result<_>>()?;
    Ok(data
        .individuals
        .iter()
        .flat_map(|ind| idx.iter().map(|&j| ind.covariates[j]).collect::<Vec<_>>())
        .collect())
}

/// Modal class assignment from `fitted`, then a multinomial logistic
/// regression of the assigned class on `covariates` (class 1 reference).
/// Exact posterior ties are broken from a stream seeded by `seed`.
pub fn three_step_fit(
    data: &LongitudinalDataset,
    fitted: &FittedModel,
    covariates: &[String],
    seed: u64,
) -> Result<StepwiseResult> {
    let k = fitted.spec.classes;
    if k < 2 {
        return invalid("stepwise fits need at least two classes");
    }
    if data.len() != fitted.n {
        return invalid("data and fitted model have different sample sizes");
    }
    let assigned = modal_assignment(&posterior_matrix(fitted), seed);
    if let Some(empty) = assigned.counts().iter().position(|c| *c == 0) {
        return Err(Error::EmptyClass(empty + 1));
    }
    let x = design_matrix(data, covariates)?;
    let c = covariates.len();
    let mut targets = vec![0.0; data.len() * k];
    for (i, l) in assigned.labels.iter().enumerate() {
        targets[i * k + l - 1] = 1.0;
    }
    let opts = LogisticOptions {
        cap: Some(SEPARATION_CAP),
        ..Default::default()
    };
    let lf = fit_multinomial(&x, c, &targets, &GatingParams::zeros(k, c), &opts)?;
    let se = |idx: usize| {
        lf.covariance
            .as_ref()
            .filter(|_| !lf.separated)
            .map(|m| m[(idx, idx)].max(0.0).sqrt())
    };
    let mut coefficients = Vec::new();
    for class in 2..=k {
        let base = (class - 2) * (1 + c);
        coefficients.push(coefficient(class, "intercept", lf.params.intercepts[class - 2], se(base)));
        for (j, name) in covariates.iter().enumerate() {
            coefficients.push(coefficient(class, name, lf.params.coefficients[class - 2][j], se(base + 1 + j)));
        }
    }
    Ok(StepwiseResult {
        method: StepwiseMethod::ThreeStep,
        covariates: covariates.to_vec(),
        gating: lf.params,
        coefficients,
        converged: lf.converged,
        separated: lf.separated,
        log_likelihood: lf.log_likelihood,
    })
}

/// Maximizes the mixture likelihood with logistic gating on `covariates`
/// over the gating coefficients only, holding every within-class parameter
/// of `fitted` fixed.
pub fn two_step_fit(
    data: &LongitudinalDataset,
    fitted: &FittedModel,
    covariates: &[String],
    opts: &FitOptions,
) -> Result<(StepwiseResult, FittedModel)> {
    let k = fitted.spec.classes;
    if k < 2 {
        return invalid("stepwise fits need at least two classes");
    }
    if covariates.is_empty() {
        return invalid("stepwise fits need at least one gating covariate");
    }
    for name in covariates {
        let col = data.column(name)?;
        if col.iter().all(|v| *v == col[0]) {
            return invalid(format!("gating covariate {name} has zero variance; its coefficient is undefined"));
        }
    }
    let kind = if fitted.spec.kind.has_expert_covariates() { ModelKind::Full } else { ModelKind::Cp };
    let spec = MixtureSpec {
        kind,
        gating_covariates: covariates.to_vec(),
        ..fitted.spec.clone()
    };
    let mut start = fitted.estimates.clone();
    let intercepts = match &fitted.estimates.gating {
        Gating::Proportions(p) => p[1..].iter().map(|pk| (pk / p[0]).ln()).collect(),
        Gating::Logistic(g) => g.intercepts.clone(),
    };
    start.gating = Gating::Logistic(GatingParams {
        intercepts,
        coefficients: vec![vec![0.0; covariates.len()]; k - 1],
    });
    let mut o = opts.clone();
    o.freeze.class_params = true;
    o.knot_bounds = Some(fitted.knot_bounds);
    let fm = fit(&spec, data, Some(&StartValues { params: start }), &o)?;
    let Gating::Logistic(g) = &fm.estimates.gating else {
        return Err(Error::Numeric("two-step fit returned proportions".into()));
    };
    let frame = fm.spec.frame;
    let se = |class: usize, term: &str| {
        let name = if term == "intercept" {
            format!("class{class}.gate_intercept")
        } else {
            format!("class{class}.gate_{term}")
        };
        fm.standard_errors
            .as_ref()
            .filter(|s| !s.singular)
            .and_then(|s| s.get(frame, &name))
            .and_then(|p| p.se)
    };
    let mut coefficients = Vec::new();
    for class in 2..=k {
        coefficients.push(coefficient(class, "intercept", g.intercepts[class - 2], se(class, "intercept")));
        for (j, name) in covariates.iter().enumerate() {
            coefficients.push(coefficient(class, name, g.coefficients[class - 2][j], se(class, name)));
        }
    }
    let result = StepwiseResult {
        method: StepwiseMethod::TwoStep,
        covariates: covariates.to_vec(),
        gating: g.clone(),
        coefficients,
        converged: fm.converged(),
        separated: false,
        log_likelihood: fm.log_likelihood,
    };
    Ok((result, fm))
}
