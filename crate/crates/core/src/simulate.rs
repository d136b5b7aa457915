//! Synthetic two-class growth data on the simulation grid, and one-class
//! screening scenarios for covariate importance.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Individual, LongitudinalDataset};
use crate::error::{invalid, Result};
use crate::growth::{loading_row, mahalanobis_distance, ClassParams, Frame};
use crate::mixture::{gating_probabilities, Gating, GatingParams, MixtureParams};

pub const GATING_NAMES: [&str; 2] = ["xg1", "xg2"];
pub const EXPERT_NAMES: [&str; 2] = ["xe1", "xe2"];
pub const TARGET_DISTANCE: f64 = 0.86;
pub const UNBALANCED_INTERCEPT: f64 = 0.775;

/// Growth-factor covariance shared by every class on the grid.
pub fn table2_psi() -> Matrix3<f64> {
    Matrix3::new(25.0, 1.5, 1.5, 1.5, 1.0, 0.3, 1.5, 0.3, 1.0)
}

pub fn gating_slopes() -> [f64; 2] {
    [1.5f64.ln(), 1.7f64.ln()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Balanced,
    /// Roughly 1:2.
    Unbalanced,
}

impl Allocation {
    pub fn intercept(self) -> f64 {
        match self {
            Allocation::Balanced => 0.0,
            Allocation::Unbalanced => UNBALANCED_INTERCEPT,
        }
    }
}

/// How class labels are drawn from the gating probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MembershipRule {
    /// Sample from the multinomial probabilities.
    #[default]
    Multinomial,
    /// Assign the most probable class.
    MaxProbability,
}

/// What the tabulated growth-factor variances denote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum VarianceBase {
    /// Unexplained variance; covariates add variance on top.
    #[default]
    Unexplained,
    /// Total variance; covariates explain a share of it.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCondition {
    /// 1-based position on the grid.
    pub id: usize,
    pub scenario: u8,
    pub knots: [f64; 2],
    pub allocation: Allocation,
    /// Share of growth-factor variance explained by the expert covariates,
    /// per class.
    pub r2: [f64; 2],
    pub residual: f64,
    pub n: usize,
    pub waves: usize,
    pub delta: f64,
    #[serde(default)]
    pub membership: MembershipRule,
    #[serde(default)]
    pub variance_base: VarianceBase,
}

pub const KNOT_PAIRS: [[f64; 2]; 3] = [[4.0, 5.0], [3.75, 5.25], [3.5, 5.5]];
pub const R2_PAIRS: [[f64; 2]; 3] = [[0.13, 0.13], [0.13, 0.26], [0.26, 0.26]];
pub const RESIDUALS: [f64; 2] = [1.0, 2.0];

/// Growth-factor means (intercept, slope 1, slope 2) of the two classes.
pub fn scenario_means(scenario: u8) -> Result<[Vector3<f64>; 2]> {
    Ok(match scenario {
        1 => [Vector3::new(98.0, -5.0, -2.6), Vector3::new(102.0, -5.0, -2.6)],
        2 => [Vector3::new(100.0, -4.4, -2.0), Vector3::new(100.0, -3.6, -2.0)],
        3 => [Vector3::new(100.0, -5.0, -2.6), Vector3::new(100.0, -5.0, -3.4)],
        s => return invalid(format!("unknown scenario {s}")),
    })
}

/// All 108 grid cells: scenario × knot pair × allocation × R² pair ×
/// residual variance, in that nesting order.
pub fn condition_grid() -> Vec<SimCondition> {
    let mut out = Vec::with_capacity(108);
    for scenario in 1..=3u8 {
        for knots in KNOT_PAIRS {
            for allocation in [Allocation::Balanced, Allocation::Unbalanced] {
                for r2 in R2_PAIRS {
                    for residual in RESIDUALS {
                        out.push(SimCondition {
                            id: out.len() + 1,
                            scenario,
                            knots,
                            allocation,
                            r2,
                            residual,
                            n: 500,
                            waves: 10,
                            delta: 0.25,
                            membership: MembershipRule::default(),
                            variance_base: VarianceBase::default(),
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn condition(id: usize) -> Result<SimCondition> {
    condition_grid()
        .into_iter()
        .find(|c| c.id == id)
        .ok_or_else(|| crate::error::Error::InvalidInput(format!("condition id {id} is not in 1..=108")))
}

/// Grid cell matching the given axis values.
pub fn find_condition(scenario: u8, separation: f64, allocation: Allocation, r2: [f64; 2], residual: f64) -> Result<SimCondition> {
    condition_grid()
        .into_iter()
        .find(|c| {
            c.scenario == scenario
                && (c.knot_separation() - separation).abs() < 1e-9
                && c.allocation == allocation
                && c.r2 == r2
                && c.residual == residual
        })
        .ok_or_else(|| crate::error::Error::InvalidInput("no grid cell matches the requested axes".into()))
}

/// Path coefficients `(b1, 1.5 b1)` for two independent standardized
/// covariates explaining share `r2` of a growth factor whose unexplained
/// variance is `psi`.
pub fn calibrate_path_coefficients(psi: f64, r2: f64) -> Result<(f64, f64)> {
    calibrate_with_base(psi, r2, VarianceBase::Unexplained)
}

pub fn calibrate_with_base(psi: f64, r2: f64, base: VarianceBase) -> Result<(f64, f64)> {
    if !(r2 > 0.0 && r2 < 1.0) {
        return invalid(format!("explained share must lie in (0, 1), got {r2}"));
    }
    if !(psi > 0.0) {
        return invalid(format!("variance must be positive, got {psi}"));
    }
    let explained = match base {
        VarianceBase::Unexplained => r2 / (1.0 - r2) * psi,
        VarianceBase::Total => r2 * psi,
    };
    let b1 = (explained / (1.0 + 1.5 * 1.5)).sqrt();
    Ok((b1, 1.5 * b1))
}

/// 3×2 path matrix calibrated factor by factor against the diagonal of
/// `psi`, and the unexplained covariance that goes with it.
fn calibrated_block(psi: &Matrix3<f64>, r2: f64, base: VarianceBase) -> Result<(DMatrix<f64>, Matrix3<f64>)> {
    let mut b = DMatrix::zeros(3, 2);
    for f in 0..3 {
        let (b1, b2) = calibrate_with_base(psi[(f, f)], r2, base)?;
        b[(f, 0)] = b1;
        b[(f, 1)] = b2;
    }
    let unexplained = match base {
        VarianceBase::Unexplained => *psi,
        VarianceBase::Total => {
            let bbt = &b * b.transpose();
            let u = psi - Matrix3::from_iterator(bbt.iter().copied());
            if u.cholesky().is_none() {
                return invalid("explained share leaves a non-positive-definite unexplained covariance");
            }
            u
        }
    };
    Ok((b, unexplained))
}

impl SimCondition {
    pub fn knot_separation(&self) -> f64 {
        self.knots[1] - self.knots[0]
    }

    pub fn label(&self) -> String {
        format!(
            "c{:03}_s{}_k{:.2}-{:.2}_{}_r{:.0}-{:.0}_t{}",
            self.id,
            self.scenario,
            self.knots[0],
            self.knots[1],
            match self.allocation {
                Allocation::Balanced => "bal",
                Allocation::Unbalanced => "unbal",
            },
            self.r2[0] * 100.0,
            self.r2[1] * 100.0,
            self.residual
        )
    }

    pub fn gating(&self) -> GatingParams {
        GatingParams {
            intercepts: vec![self.allocation.intercept()],
            coefficients: vec![gating_slopes().to_vec()],
        }
    }

    /// Generating parameters as a full mixture in the original frame.
    pub fn truth(&self) -> Result<MixtureParams> {
        let means = scenario_means(self.scenario)?;
        let psi = table2_psi();
        let mut classes = Vec::with_capacity(2);
        for k in 0..2 {
            let (paths, unexplained) = calibrated_block(&psi, self.r2[k], self.variance_base)?;
            classes.push(ClassParams {
                beta0: means[k],
                psi: unexplained,
                gamma: self.knots[k],
                paths,
                cov_mean: DVector::zeros(2),
                cov_cov: DMatrix::identity(2, 2),
                residual: self.residual,
            });
        }
        Ok(MixtureParams {
            frame: Frame::Original,
            classes,
            gating: Gating::Logistic(self.gating()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        scenario_means(self.scenario)?;
        if !(self.knots[0] < self.knots[1]) {
            return invalid("knots must be increasing");
        }
        if self.n == 0 || self.waves < 4 || !(self.delta >= 0.0 && self.delta < 0.5) || !(self.residual > 0.0) {
            return invalid("condition has an invalid sample size, wave count, window or residual variance");
        }
        self.truth().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDiagnostics {
    pub condition: usize,
    pub mahalanobis: f64,
    pub target: f64,
    pub within_tolerance: bool,
    pub knot_separation: f64,
}

/// Mahalanobis distance of the class means under the shared covariance,
/// flagged when it strays from the design value by more than 0.01.
pub fn verify_condition(cond: &SimCondition) -> Result<ConditionDiagnostics> {
    let m = scenario_means(cond.scenario)?;
    let d = mahalanobis_distance(&m[0], &m[1], &table2_psi())?;
    Ok(ConditionDiagnostics {
        condition: cond.id,
        mahalanobis: d,
        target: TARGET_DISTANCE,
        within_tolerance: (d - TARGET_DISTANCE).abs() <= 0.01,
        knot_separation: cond.knot_separation(),
    })
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub data: LongitudinalDataset,
    /// 0-based true class of each individual.
    pub memberships: Vec<usize>,
    pub truth: MixtureParams,
    /// Latent growth factors (original frame) of each individual.
    pub growth_factors: Vec<Vector3<f64>>,
    pub seed: u64,
}

/// Generator input: classes with two standardized expert covariates each
/// and an optional logistic gating on two standard-normal covariates.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub classes: Vec<ClassParams>,
    pub gating: Option<GatingParams>,
    pub n: usize,
    pub waves: usize,
    pub delta: f64,
    pub membership: MembershipRule,
    /// Extra independent standard-normal covariates appended as noise1..
    pub noise_covariates: usize,
}

/// Mixes a master seed with stream indices (splitmix64 finalizer).
pub fn stream_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_from(model: &GenerativeModel, seed: u64) -> Result<GeneratedDataset> {
    let k = model.classes.len();
    if k == 0 || model.n == 0 {
        return invalid("generator needs at least one class and one individual");
    }
    if k > 1 && model.gating.as_ref().is_none_or(|g| g.classes() != k) {
        return invalid("multi-class generation needs gating coefficients for every class");
    }
    let mut factors = Vec::with_capacity(k);
    for c in &model.classes {
        c.validate()?;
        if c.n_covariates() != 2 {
            return invalid("generator expects two expert covariates per class");
        }
        let l = c.psi.cholesky().map(|ch| ch.l()).unwrap_or_else(|| crate::growth::psd_factor3(&c.psi).unwrap_or_default());
        let lx = crate::growth::psd_factor(&c.cov_cov)?;
        factors.push((l, lx));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<String> = GATING_NAMES.iter().chain(EXPERT_NAMES.iter()).map(|s| s.to_string()).collect();
    names.extend((1..=model.noise_covariates).map(|j| format!("noise{j}")));
    let mut individuals = Vec::with_capacity(model.n);
    let mut memberships = Vec::with_capacity(model.n);
    let mut growth_factors = Vec::with_capacity(model.n);
    let z = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for i in 0..model.n {
        let xg = [z(&mut rng), z(&mut rng)];
        let class = match &model.gating {
            Some(g) if k > 1 => {
                let p = gating_probabilities(&xg, g)?;
                match model.membership {
                    MembershipRule::MaxProbability => {
                        let mut best = 0;
                        for (j, v) in p.iter().enumerate() {
                            if *v > p[best] {
                                best = j;
                            }
                        }
                        best
                    }
                    MembershipRule::Multinomial => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = k - 1;
                        for (j, v) in p.iter().enumerate() {
                            acc += v;
                            if u < acc {
                                pick = j;
                                break;
                            }
                        }
                        pick
                    }
                }
            }
            _ => 0,
        };
        let cp = &model.classes[class];
        let (l, lx) = &factors[class];
        let ux = DVector::from_fn(2, |_, _| z(&mut rng));
        let xe = &cp.cov_mean + lx * ux;
        let zeta = Vector3::new(z(&mut rng), z(&mut rng), z(&mut rng));
        let shift = &cp.paths * &xe;
        let eta = cp.beta0 + Vector3::new(shift[0], shift[1], shift[2]) + l * zeta;
        let sd = cp.residual.sqrt();
        let mut times = Vec::with_capacity(model.waves);
        let mut outcomes = Vec::with_capacity(model.waves);
        for j in 0..model.waves {
            let t = j as f64 + rng.random_range(-model.delta..=model.delta);
            let row = loading_row(t, cp.gamma, Frame::Original);
            let mean = row[0] * eta[0] + row[1] * eta[1] + row[2] * eta[2];
            times.push(t);
            outcomes.push(mean + sd * z(&mut rng));
        }
        let mut covariates = vec![xg[0], xg[1], xe[0], xe[1]];
        for _ in 0..model.noise_covariates {
            covariates.push(z(&mut rng));
        }
        individuals.push(Individual {
            id: format!("{}", i + 1),
            times,
            outcomes,
            covariates,
        });
        memberships.push(class);
        growth_factors.push(eta);
    }
    let truth = MixtureParams {
        frame: Frame::Original,
        classes: model.classes.clone(),
        gating: match &model.gating {
            Some(g) if k > 1 => Gating::Logistic(g.clone()),
            _ => Gating::Proportions(vec![1.0]),
        },
    };
    Ok(GeneratedDataset {
        data: LongitudinalDataset::new(names, individuals)?,
        memberships,
        truth,
        growth_factors,
        seed,
    })
}

/// Draws one dataset for a grid cell.
pub fn generate(cond: &SimCondition, seed: u64) -> Result<GeneratedDataset> {
    cond.validate()?;
    let truth = cond.truth()?;
    let Gating::Logistic(g) = &truth.gating else { unreachable!() };
    let model = GenerativeModel {
        classes: truth.classes.clone(),
        gating: Some(g.clone()),
        n: cond.n,
        waves: cond.waves,
        delta: cond.delta,
        membership: cond.membership,
        noise_covariates: 0,
    };
    generate_from(&model, seed)
}

/// Class labels implied by the max-probability rule for stored gating
/// covariates.
pub fn rederive_memberships(data: &LongitudinalDataset, gating: &GatingParams) -> Result<Vec<usize>> {
    let idx: Vec<usize> = GATING_NAMES.iter().map(|n| data.covariate_index(n)).collect::<Result<_>>()?;
    data.individuals
        .iter()
        .map(|ind| {
            let x: Vec<f64> = idx.iter().map(|&j| ind.covariates[j]).collect();
            let p = gating_probabilities(&x, gating)?;
            let mut best = 0;
            for (j, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Population share of each class under the gating function with
/// standard-normal covariates, by quadrature over the linear predictor.
pub fn population_shares(gating: &GatingParams, rule: MembershipRule) -> Vec<f64> {
    assert_eq!(gating.classes(), 2, "shares are implemented for two classes");
    let b = &gating.coefficients[0];
    let s = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a = gating.intercepts[0];
    if s == 0.0 {
        let p2 = match rule {
            MembershipRule::Multinomial => 1.0 / (1.0 + (-a).exp()),
            MembershipRule::MaxProbability => f64::from(u8::from(a > 0.0)),
        };
        return vec![1.0 - p2, p2];
    }
    let p2 = match rule {
        MembershipRule::MaxProbability => {
            // P(a + s Z > 0) = Phi(a / s)
            use statrs::distribution::{ContinuousCDF, Normal};
            Normal::standard().cdf(a / s)
        }
        MembershipRule::Multinomial => {
            let m = 4001;
            let (lo, hi) = (-9.0, 9.0);
            let h = (hi - lo) / (m - 1) as f64;
            let mut acc = 0.0;
            for j in 0..m {
                let zz = lo + h * j as f64;
                let w = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
                let dens = (-0.5 * zz * zz).exp() / (2.0 * std::f64::consts::PI).sqrt();
                acc += w * dens / (1.0 + (-(a + s * zz)).exp());
            }
            acc * h
        }
    };
    vec![1.0 - p2, p2]
}

/// One-class screening scenarios (1: 2%, 2: 13%, 3: 26% explained) and
/// two-class ones (4..=8) for covariate importance, with two noise
/// covariates appended.
pub fn forest_scenario(scenario: u8, n: usize) -> Result<GenerativeModel> {
    let r2: &[f64] = match scenario {
        1 => &[0.02],
        2 => &[0.13],
        3 => &[0.26],
        4 => &[0.02, 0.02],
        5 => &[0.02, 0.13],
        6 => &[0.13, 0.13],
        7 => &[0.13, 0.26],
        8 => &[0.26, 0.26],
        s => return invalid(format!("unknown screening scenario {s}")),
    };
    let psi = table2_psi();
    let means = scenario_means(1)?;
    let knots: &[f64] = if r2.len() == 1 { &[4.5] } else { &[3.5, 5.5] };
    let mut classes = Vec::new();
    for (k, &r) in r2.iter().enumerate() {
        let (paths, unexplained) = calibrated_block(&psi, r, VarianceBase::Unexplained)?;
        classes.push(ClassParams {
            beta0: means[k],
            psi: unexplained,
            gamma: knots[k],
            paths,
            cov_mean: DVector::zeros(2),
            cov_cov: DMatrix::identity(2, 2),
            residual: 1.0,
        });
    }
    let gating = (classes.len() > 1).then(|| GatingParams {
        intercepts: vec![0.0],
        coefficients: vec![gating_slopes().to_vec()],
    });
    Ok(GenerativeModel {
        classes,
        gating,
        n,
        waves: 10,
        delta: 0.25,
        membership: MembershipRule::Multinomial,
        noise_covariates: 2,
    })
}
