//! Unconstrained BFGS minimization with backtracking line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when the relative decrease stays below this for two iterations.
    pub rel_tolerance: f64,
    /// Stop when the largest gradient component falls below this.
    pub grad_tolerance: f64,
    /// Largest Euclidean norm of a single trial step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rel_tolerance: 1e-12,
            grad_tolerance: 1e-6,
            max_step: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final inverse-Hessian approximation, reusable as a warm start.
    pub inverse_hessian: DMatrix<f64>,
}

/// Minimizes `f`, which returns the objective and writes the gradient, or
/// returns `None` where the objective is undefined.
///
/// `h0` is an optional initial inverse-Hessian approximation.
pub fn minimize<F>(mut f: F, x0: &[f64], h0: Option<DMatrix<f64>>, opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut g = DVector::zeros(n);
    let mut fx = f(x.as_slice(), g.as_mut_slice())?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut h = match h0 {
        Some(h) if h.nrows() == n && h.ncols() == n => h,
        _ => DMatrix::identity(n, n),
    };
    let mut scaled = false;
    let mut small = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut xn = DVector::zeros(n);
    let mut gn = DVector::zeros(n);
    while iterations < opts.max_iterations {
        if g.amax() < opts.grad_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = d.dot(&g);
        if !(slope < 0.0) {
            // not a descent direction: restart from steepest descent
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = d.dot(&g);
        }
        let norm = d.norm();
        if norm > opts.max_step {
            d *= opts.max_step / norm;
            slope *= opts.max_step / norm;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            xn.copy_from(&x);
            xn.axpy(step, &d, 1.0);
            if let Some(v) = f(xn.as_slice(), gn.as_mut_slice()) {
                if v.is_finite() && gn.iter().all(|g| g.is_finite()) && v <= fx + 1e-4 * step * slope {
                    accepted = Some(v);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(fnew) = accepted else {
            // no decrease along the search direction
            converged = g.amax() < opts.grad_tolerance * 1e3;
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H' = H - rho (s hy' + hy s') + (rho^2 yhy + rho) s s'
            h.ger(-rho, &s, &hy, 1.0);
            h.ger(-rho, &hy, &s, 1.0);
            h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }
        let rel = (fx - fnew).abs() / fx.abs().max(1e-300);
        x.copy_from(&xn);
        g.copy_from(&gn);
        fx = fnew;
        if rel < opts.rel_tolerance {
            small += 1;
            if small >= 2 {
                converged = true;
                break;
            }
        } else {
            small = 0;
        }
    }
    Some(BfgsResult {
        x: x.as_slice().to_vec(),
        value: fx,
        iterations,
        converged,
        inverse_hessian: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Some((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let opts = BfgsOptions {
            max_iterations: 1000,
            grad_tolerance: 1e-10,
            ..Default::default()
        };
        let r = minimize(f, &[-1.2, 1.0], None, &opts).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn quadratic_and_domain() {
        // minimum at 3 on x > 0 only
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                return None;
            }
            g[0] = 1.0 - 3.0 / x[0];
            Some(x[0] - 3.0 * x[0].ln())
        };
        let r = minimize(f, &[0.5], None, &BfgsOptions::default()).unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-5);
        assert!(minimize(|_, _| None, &[0.0], None, &BfgsOptions::default()).is_none());
    }
}
