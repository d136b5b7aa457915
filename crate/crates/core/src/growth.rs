//! Bilinear-spline growth kernel.
//!
//! Factor loadings for a linear-linear trajectory with a class-specific knot,
//! the class-implied outcome moments, and the linear maps between the
//! original growth-factor frame (value at t = 0, slope 1, slope 2) and the
//! reparameterized frame (value at the knot, mean slope, half slope
//! difference) in which the knot is estimable.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Eigenvalues down to this (negative) value are treated as round-off and
/// clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    Original,
    Reparameterized,
}

impl Frame {
    pub fn other(self) -> Frame {
        match self {
            Frame::Original => Frame::Reparameterized,
            Frame::Reparameterized => Frame::Original,
        }
    }
}

/// A growth-factor triple tagged with the frame it is expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthFactors {
    pub eta: Vector3<f64>,
    pub frame: Frame,
}

impl GrowthFactors {
    pub fn new(eta0: f64, eta1: f64, eta2: f64, frame: Frame) -> Self {
        Self {
            eta: Vector3::new(eta0, eta1, eta2),
            frame,
        }
    }

    /// Maps original-frame factors to the reparameterized frame at knot `gamma`.
    pub fn reparameterize(&self, gamma: f64) -> Result<GrowthFactors> {
        if self.frame != Frame::Original {
            return invalid("reparameterize expects original-frame growth factors");
        }
        Ok(GrowthFactors {
            eta: reparam_jacobian(gamma) * self.eta,
            frame: Frame::Reparameterized,
        })
    }

    pub fn inverse_reparameterize(&self, gamma: f64) -> Result<GrowthFactors> {
        if self.frame != Frame::Reparameterized {
            return invalid("inverse_reparameterize expects reparameterized growth factors");
        }
        Ok(GrowthFactors {
            eta: inverse_reparam_jacobian(gamma) * self.eta,
            frame: Frame::Original,
        })
    }
}

/// Parameters of one latent class.
///
/// `paths` is 3×c, `cov_mean` has length c and `cov_cov` is c×c, where c is
/// the number of expert covariates (zero for kinds without them).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassParams {
    pub beta0: Vector3<f64>,
    pub psi: Matrix3<f64>,
    pub gamma: f64,
    pub paths: DMatrix<f64>,
    pub cov_mean: DVector<f64>,
    pub cov_cov: DMatrix<f64>,
    pub residual: f64,
}

impl ClassParams {
    /// A class without expert covariates.
    pub fn without_covariates(beta0: Vector3<f64>, psi: Matrix3<f64>, gamma: f64, residual: f64) -> Self {
        Self {
            beta0,
            psi,
            gamma,
            paths: DMatrix::zeros(3, 0),
            cov_mean: DVector::zeros(0),
            cov_cov: DMatrix::zeros(0, 0),
            residual,
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.paths.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.paths.ncols();
        if self.paths.nrows() != 3 {
            return invalid(format!("path matrix must have 3 rows, got {}", self.paths.nrows()));
        }
        if self.cov_mean.len() != c || self.cov_cov.nrows() != c || self.cov_cov.ncols() != c {
            return invalid(format!(
                "covariate moments do not match {c} path columns (mean {}, cov {}x{})",
                self.cov_mean.len(),
                self.cov_cov.nrows(),
                self.cov_cov.ncols()
            ));
        }
        if !(self.residual > 0.0) || !self.residual.is_finite() {
            return invalid(format!("residual variance must be positive, got {}", self.residual));
        }
        if !self.gamma.is_finite() {
            return invalid("knot must be finite");
        }
        let finite = self.beta0.iter().all(|v| v.is_finite())
            && self.psi.iter().all(|v| v.is_finite())
            && self.paths.iter().all(|v| v.is_finite())
            && self.cov_mean.iter().all(|v| v.is_finite())
            && self.cov_cov.iter().all(|v| v.is_finite());
        if !finite {
            return invalid("class parameters contain non-finite values");
        }
        check_psd(&DMatrix::from_iterator(3, 3, self.psi.iter().copied()), "Psi")?;
        if c > 0 {
            check_psd(&self.cov_cov, "Phi")?;
        }
        Ok(())
    }

    /// Growth-factor mean implied at the covariate mean, `beta0 + B mu_x`.
    pub fn growth_mean(&self) -> Vector3<f64> {
        if self.n_covariates() == 0 {
            return self.beta0;
        }
        let shift = &self.paths * &self.cov_mean;
        self.beta0 + Vector3::new(shift[0], shift[1], shift[2])
    }

    /// Re-expresses the growth block (beta0, Psi, B) in the `to` frame.
    /// Covariate moments, knot and residual variance are frame-free.
    pub fn to_frame(&self, from: Frame, to: Frame) -> ClassParams {
        if from == to {
            return self.clone();
        }
        let block = match to {
            Frame::Reparameterized => reparameterize(&self.beta0, &self.psi, &self.paths, self.gamma),
            Frame::Original => inverse_reparameterize(&self.beta0, &self.psi, &self.paths, self.gamma),
        };
        ClassParams {
            beta0: block.mean,
            psi: block.cov,
            paths: block.paths,
            ..self.clone()
        }
    }
}

/// J×3 loading matrix for one individual's measurement occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingMatrix {
    pub frame: Frame,
    pub entries: DMatrix<f64>,
}

impl LoadingMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }
}

/// One row of the loading matrix.
#[inline]
pub fn loading_row(t: f64, gamma: f64, frame: Frame) -> [f64; 3] {
    match frame {
        Frame::Original => {
            if t <= gamma {
                [1.0, t, 0.0]
            } else {
                [1.0, gamma, t - gamma]
            }
        }
        Frame::Reparameterized => {
            let d = t - gamma;
            [1.0, d, d.abs()]
        }
    }
}

pub fn loading_matrix(times: &[f64], gamma: f64, frame: Frame) -> Result<LoadingMatrix> {
    if times.is_empty() {
        return invalid("loading matrix needs at least one time point");
    }
    if !gamma.is_finite() || times.iter().any(|t| !t.is_finite()) {
        return invalid("times and knot must be finite");
    }
    let mut entries = DMatrix::zeros(times.len(), 3);
    for (j, &t) in times.iter().enumerate() {
        let row = loading_row(t, gamma, frame);
        for (c, v) in row.into_iter().enumerate() {
            entries[(j, c)] = v;
        }
    }
    Ok(LoadingMatrix { frame, entries })
}

fn check_dims(params: &ClassParams, loadings: &LoadingMatrix) -> Result<()> {
    if loadings.entries.ncols() != 3 {
        return invalid("loading matrix must have 3 columns");
    }
    let c = params.paths.ncols();
    if params.paths.nrows() != 3 || params.cov_mean.len() != c {
        return invalid(format!(
            "path matrix is {}x{} but covariate mean has length {}",
            params.paths.nrows(),
            c,
            params.cov_mean.len()
        ));
    }
    Ok(())
}

/// `Lambda (beta0 + B mu_x)`.
pub fn implied_mean(params: &ClassParams, loadings: &LoadingMatrix) -> Result<DVector<f64>> {
    check_dims(params, loadings)?;
    let m = params.growth_mean();
    Ok(&loadings.entries * DVector::from_column_slice(m.as_slice()))
}

/// `Lambda Psi Lambda' + Lambda B Phi B' Lambda' + theta I`.
pub fn implied_covariance(params: &ClassParams, loadings: &LoadingMatrix) -> Result<DMatrix<f64>> {
    check_dims(params, loadings)?;
    let c = params.paths.ncols();
    if params.cov_cov.nrows() != c || params.cov_cov.ncols() != c {
        return invalid("covariate covariance does not match the path matrix");
    }
    let psi = DMatrix::from_iterator(3, 3, params.psi.iter().copied());
    check_psd(&psi, "Psi")?;
    let mut growth_cov = psi;
    if c > 0 {
        check_psd(&params.cov_cov, "Phi")?;
        growth_cov += &params.paths * &params.cov_cov * params.paths.transpose();
    }
    let lam = &loadings.entries;
    let mut sigma = lam * growth_cov * lam.transpose();
    for j in 0..sigma.nrows() {
        sigma[(j, j)] += params.residual;
    }
    // exact symmetry
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(sigma)
}

/// Jacobian of the original→reparameterized map at knot `gamma`.
pub fn reparam_jacobian(gamma: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, gamma, 0.0, 0.0, 0.5, 0.5, 0.0, -0.5, 0.5)
}

/// Jacobian of the reparameterized→original map at knot `gamma`.
pub fn inverse_reparam_jacobian(gamma: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, -gamma, gamma, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0)
}

/// Growth-factor mean, covariance and path coefficients in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthBlock {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub paths: DMatrix<f64>,
}

fn transform_block(jac: Matrix3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>, paths: &DMatrix<f64>) -> GrowthBlock {
    let cov = jac * cov * jac.transpose();
    let jac_dyn = DMatrix::from_iterator(3, 3, jac.iter().copied());
    GrowthBlock {
        mean: jac * mean,
        cov: (cov + cov.transpose()) * 0.5,
        paths: if paths.ncols() == 0 {
            DMatrix::zeros(3, 0)
        } else {
            jac_dyn * paths
        },
    }
}

pub fn reparameterize(mean: &Vector3<f64>, cov: &Matrix3<f64>, paths: &DMatrix<f64>, gamma: f64) -> GrowthBlock {
    transform_block(reparam_jacobian(gamma), mean, cov, paths)
}

pub fn inverse_reparameterize(mean: &Vector3<f64>, cov: &Matrix3<f64>, paths: &DMatrix<f64>, gamma: f64) -> GrowthBlock {
    transform_block(inverse_reparam_jacobian(gamma), mean, cov, paths)
}

/// `sqrt((mu1 - mu2)' Psi^{-1} (mu1 - mu2))`.
pub fn mahalanobis_distance(mu1: &Vector3<f64>, mu2: &Vector3<f64>, psi: &Matrix3<f64>) -> Result<f64> {
    let chol = psi
        .cholesky()
        .ok_or_else(|| Error::Numeric("Mahalanobis distance needs a positive-definite Psi".into()))?;
    let d = mu1 - mu2;
    let z = chol.solve(&d);
    Ok(d.dot(&z).max(0.0).sqrt())
}

/// Errors if `m` is not symmetric positive semi-definite within tolerance.
pub fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return invalid(format!("{name} must be square"));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return invalid(format!("{name} is not symmetric"));
            }
        }
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return invalid(format!("{name} is not positive semi-definite (min eigenvalue {min:.3e})"));
    }
    Ok(())
}

/// A factor `F` with `F F' = m` (eigenvalues clipped at zero). Uses a
/// Cholesky factor when `m` is positive definite.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    check_psd(m, "matrix")?;
    let eig = m.clone().symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (c, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for r in 0..f.nrows() {
            f[(r, c)] *= s;
        }
    }
    Ok(f)
}

/// 3×3 version of [`psd_factor`].
pub fn psd_factor3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if let Some(ch) = m.cholesky() {
        return Ok(ch.l());
    }
    let d = DMatrix::from_iterator(3, 3, m.iter().copied());
    let f = psd_factor(&d)?;
    Ok(Matrix3::from_iterator(f.iter().copied()))
}
