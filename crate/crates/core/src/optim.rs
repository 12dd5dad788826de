//! BFGS minimisation with a backtracking Armijo line search, plus a
//! central-difference Hessian for standard errors.

use nalgebra::{DMatrix, DVector};

/// A smooth objective to minimise. `value` may return a non-finite number to
/// mark a point as infeasible; the line search then shrinks the step.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    /// Convergence when the gradient max-norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iter: 500,
            armijo_c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &BfgsOptions) -> Minimum {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut f = obj.value(x.as_slice());
    let mut g = DVector::from_vec(obj.gradient(x.as_slice()));
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = max_norm(&g) <= opts.grad_tol;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            slope = g.dot(&d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &d * step;
            let ft = obj.value(trial.as_slice());
            if ft.is_finite() && ft <= f + opts.armijo_c1 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= opts.backtrack;
        }

        let Some((x_new, f_new)) = accepted else {
            if fresh {
                // Steepest descent failed too: no further progress possible.
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let g_new = DVector::from_vec(obj.gradient(x_new.as_slice()));
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        let progress = (f - f_new).abs();
        x = x_new;
        f = f_new;
        g = g_new;
        converged = max_norm(&g) <= opts.grad_tol;
        if !converged && progress == 0.0 && s.norm() == 0.0 {
            break;
        }
    }

    Minimum {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: g.as_slice().to_vec(),
        iterations,
        converged,
    }
}

/// Central-difference Hessian of `obj` built from its gradient.
pub fn numerical_hessian<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        let h = 1e-5 * x[j].abs().max(1.0);
        probe[j] = x[j] + h;
        let gp = obj.gradient(&probe);
        probe[j] = x[j] - h;
        let gm = obj.gradient(&probe);
        probe[j] = x[j];
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Central-difference gradient from objective values alone.
pub fn numerical_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = rel_step * x[j].abs().max(1.0);
            probe[j] = x[j] + h;
            let fp = f(&probe);
            probe[j] = x[j] - h;
            let fm = f(&probe);
            probe[j] = x[j];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
