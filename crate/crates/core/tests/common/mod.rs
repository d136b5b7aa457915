#![allow(dead_code)]

use growthmix::data::LongitudinalDataset;
use growthmix::growth::ClassParams;
use growthmix::mixture::{Gating, GatingParams, MixtureParams};
use growthmix::simulate::{
    forest_scenario, gating_slopes, generate_from, scenario_means, table2_psi, GeneratedDataset, GenerativeModel,
    MembershipRule, EXPERT_NAMES,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Loading row written out from the model definition, independent of the
/// library: intercept, slope before the knot, slope after it.
pub fn oracle_row(t: f64, gamma: f64) -> [f64; 3] {
    if t <= gamma {
        [1.0, t, 0.0]
    } else {
        [1.0, gamma, t - gamma]
    }
}

/// Single-class Gaussian log-likelihood with explicit inverse and
/// determinant, ignoring covariates.
pub fn oracle_loglik(data: &LongitudinalDataset, mean: &Vector3<f64>, psi: &Matrix3<f64>, gamma: f64, theta: f64) -> f64 {
    let mut total = 0.0;
    for ind in &data.individuals {
        let j = ind.times.len();
        let lam = DMatrix::from_fn(j, 3, |r, c| oracle_row(ind.times[r], gamma)[c]);
        let psi_d = DMatrix::from_fn(3, 3, |r, c| psi[(r, c)]);
        let m = &lam * DVector::from_column_slice(mean.as_slice());
        let sigma = &lam * psi_d * lam.transpose() + DMatrix::identity(j, j) * theta;
        let inv = sigma.clone().try_inverse().expect("invertible covariance");
        let det = sigma.determinant();
        let r = DVector::from_column_slice(&ind.outcomes) - m;
        let q = (r.transpose() * inv * &r)[(0, 0)];
        total += -0.5 * (j as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + q);
    }
    total
}

/// Scenario 1 classes with the intercept gap widened to `gap` SDs and no
/// expert effects, gated by the design slopes.
pub fn separated_model(n: usize, gap: f64) -> GenerativeModel {
    let psi = table2_psi();
    let m = scenario_means(1).unwrap();
    let mut b1 = m[0];
    b1[0] = m[0][0] + gap * psi[(0, 0)].sqrt();
    let classes = vec![
        plain_class(m[0], psi, 3.5, 1.0),
        plain_class(b1, psi, 5.5, 1.0),
    ];
    GenerativeModel {
        classes,
        gating: Some(GatingParams {
            intercepts: vec![0.0],
            coefficients: vec![gating_slopes().to_vec()],
        }),
        n,
        waves: 10,
        delta: 0.25,
        membership: MembershipRule::Multinomial,
        noise_covariates: 0,
    }
}

/// One-class data where no covariate matters.
pub fn null_data(n: usize, seed: u64) -> GeneratedDataset {
    let mut model = forest_scenario(1, n).unwrap();
    for c in &mut model.classes {
        c.paths = DMatrix::zeros(3, 2);
        c.psi = table2_psi();
    }
    generate_from(&model, seed).unwrap()
}

/// Class with two expert covariates on zero paths, as the generator expects.
pub fn plain_class(beta0: Vector3<f64>, psi: Matrix3<f64>, gamma: f64, residual: f64) -> ClassParams {
    ClassParams {
        beta0,
        psi,
        gamma,
        paths: DMatrix::zeros(3, 2),
        cov_mean: DVector::zeros(2),
        cov_cov: DMatrix::identity(2, 2),
        residual,
    }
}

/// FMM estimates re-expressed as a full model whose covariates carry no
/// information about class membership.
pub fn full_from_fmm(fmm: &MixtureParams, data: &LongitudinalDataset) -> MixtureParams {
    let n = data.len() as f64;
    let cols: Vec<Vec<f64>> = EXPERT_NAMES.iter().map(|x| data.column(x).unwrap()).collect();
    let mean = DVector::from_iterator(2, cols.iter().map(|c| c.iter().sum::<f64>() / n));
    let cov = DMatrix::from_fn(2, 2, |a, b| {
        cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - mean[a]) * (y - mean[b])).sum::<f64>() / n
    });
    let Gating::Proportions(p) = &fmm.gating else { panic!("fmm has proportions") };
    let mut out = fmm.clone();
    for c in &mut out.classes {
        c.paths = DMatrix::zeros(3, 2);
        c.cov_mean = mean.clone();
        c.cov_cov = cov.clone();
    }
    out.gating = Gating::Logistic(GatingParams {
        intercepts: p[1..].iter().map(|pk| (pk / p[0]).ln()).collect(),
        coefficients: vec![vec![0.0; 2]; p.len() - 1],
    });
    out
}
