//! Quasi-Newton minimization with finite-difference gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    /// Stop when the gradient ∞-norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Relative central-difference step, scaled by max(1, |x_i|).
    pub fd_step: f64,
    /// A stalled line search still counts as converged when the gradient
    /// ∞-norm is below this.
    pub stall_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            grad_tol: 1e-7,
            max_iter: 500,
            fd_step: 1e-6,
            stall_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

/// Central-difference gradient with steps `rel_step · max(1, |x_i|)`.
/// Falls back to a one-sided difference when one neighbour is infeasible.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut f0 = None;
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            match (up.is_finite(), dn.is_finite()) {
                (true, true) => (up - dn) / (2.0 * h),
                (false, true) => (*f0.get_or_insert_with(|| f(x)) - dn) / h,
                (true, false) => (up - *f0.get_or_insert_with(|| f(x))) / h,
                (false, false) => f64::NAN,
            }
        })
        .collect()
}

/// Central-difference Hessian of a scalar function, step `rel_step · max(1, |x_i|)`.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut xp = x.to_vec();
    let mut eval = |shifts: &[(usize, f64)]| {
        for &(i, s) in shifts {
            xp[i] += s;
        }
        let v = f(&xp);
        for &(i, s) in shifts {
            xp[i] -= s;
        }
        v
    };
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let up = eval(&[(i, h[i])]);
        let dn = eval(&[(i, -h[i])]);
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in 0..i {
            let pp = eval(&[(i, h[i]), (j, h[j])]);
            let pm = eval(&[(i, h[i]), (j, -h[j])]);
            let mp = eval(&[(i, -h[i]), (j, h[j])]);
            let mm = eval(&[(i, -h[i]), (j, -h[j])]);
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` from `x0` by BFGS with an Armijo backtracking line search.
/// Non-finite objective values are treated as infeasible points.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &BfgsOptions) -> OptimResult {
    minimize_with_metric(f, x0, None, opts)
}

/// As [`minimize`], with an initial inverse-Hessian approximation.
pub fn minimize_with_metric<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    hinv0: Option<&DMatrix<f64>>,
    opts: &BfgsOptions,
) -> OptimResult {
    let k = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    if !fx.is_finite() {
        return OptimResult {
            x: x0.to_vec(),
            f: fx,
            grad_inf: f64::INFINITY,
            iterations: 0,
            converged: false,
            message: "objective is not finite at the starting point".into(),
        };
    }
    let mut g = DVector::from_vec(fd_gradient(&f, x.as_slice(), opts.fd_step));
    let mut hinv = match hinv0 {
        Some(h) if h.nrows() == k && h.ncols() == k => h.clone(),
        _ => DMatrix::<f64>::identity(k, k),
    };
    let mut first = hinv0.is_none();
    for iter in 0..opts.max_iter {
        let gi = inf_norm(g.as_slice());
        if gi < opts.grad_tol {
            return done(x, fx, gi, iter, true, "gradient tolerance reached");
        }
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(k, k);
            d = -g.clone();
            slope = -g.norm_squared();
        }
        if first {
            // keep the first trial step modest in the unconstrained space
            let len = d.amax();
            if len > 1.0 {
                d /= len;
                slope /= len;
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + t * &d;
            let fnew = f(xn.as_slice());
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= if fnew.is_finite() { 0.5 } else { 0.25 };
        }
        let Some((xn, fnew)) = accepted else {
            let converged = gi < opts.stall_tol;
            return done(x, fx, gi, iter, converged, "line search stalled");
        };
        let gn = DVector::from_vec(fd_gradient(&f, xn.as_slice(), opts.fd_step));
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv *= sy / y.norm_squared();
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        x = xn;
        fx = fnew;
        g = gn;
    }
    let gi = inf_norm(g.as_slice());
    done(x, fx, gi, opts.max_iter, gi < opts.grad_tol, "iteration limit reached")
}

fn done(x: DVector<f64>, f: f64, grad_inf: f64, iterations: usize, converged: bool, msg: &str) -> OptimResult {
    OptimResult {
        x: x.iter().copied().collect(),
        f,
        grad_inf,
        iterations,
        converged,
        message: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(f, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_with_infeasible_region() {
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::INFINITY
            } else {
                (x[0] - 0.5).powi(2) + x[0].ln().powi(2) + (x[1] + 2.0).powi(2)
            }
        };
        let r = minimize(f, &[3.0, 0.0], &BfgsOptions::default());
        assert!(r.converged);
        assert!((r.x[1] + 2.0).abs() < 1e-6);
        assert!(r.x[0] > 0.0);
    }

    #[test]
    fn derivative_rules() {
        let f = |x: &[f64]| x[0].powi(3) * x[1] + (2.0 * x[1]).sin();
        let x = [1.3, -0.4];
        let g = fd_gradient(&f, &x, 1e-6);
        assert!((g[0] - 3.0 * 1.69 * -0.4).abs() < 1e-8);
        assert!((g[1] - (2.197 + 2.0 * (-0.8f64).cos())).abs() < 1e-8);
        let h = fd_hessian(&f, &x, f64::EPSILON.powf(0.25));
        assert!((h[(0, 0)] - 6.0 * 1.3 * -0.4).abs() < 1e-6);
        assert!((h[(0, 1)] - 3.0 * 1.69).abs() < 1e-6);
        assert!((h[(1, 1)] + 4.0 * (-0.8f64).sin()).abs() < 1e-6);
    }

    #[test]
    fn exact_metric_converges_fast() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + x[0] * x[1] + 0.5 * x[1] * x[1] - x[1];
        let h = DMatrix::from_row_slice(2, 2, &[6.0, 1.0, 1.0, 1.0]);
        let hinv = h.try_inverse().unwrap();
        let r = minimize_with_metric(f, &[4.0, -3.0], Some(&hinv), &BfgsOptions::default());
        assert!(r.converged);
        assert!(r.iterations <= 3, "{}", r.iterations);
        let cold = minimize(f, &[4.0, -3.0], &BfgsOptions::default());
        assert!(cold.iterations >= r.iterations);
    }

    #[test]
    fn one_sided_difference_at_a_wall() {
        let f = |x: &[f64]| if x[0] > 1.0 { f64::INFINITY } else { x[0] * x[0] };
        let g = fd_gradient(&f, &[1.0], 1e-6);
        assert!((g[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn infeasible_start_is_reported() {
        let r = minimize(|_: &[f64]| f64::NAN, &[0.0], &BfgsOptions::default());
        assert!(!r.converged);
    }
}
