//! Dense Newton iteration shared by the implicit schemes.

use crate::error::{Error, Result};
use crate::linalg::{max_abs, solve};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Extra iterations applied after the tolerance is met, so the solution
    /// sits at round-off level (finite-difference Jacobians of implicit maps
    /// are only as good as the solve).
    pub polish: usize,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vector,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `F(x) = 0` with `eval` returning the residual and its Jacobian.
/// Convergence is measured on `‖F‖_∞`.
pub fn solve_newton<F>(x0: Vector, opts: NewtonOptions, context: &str, mut eval: F) -> Result<NewtonOutcome>
where
    F: FnMut(&Vector) -> Result<(Vector, Matrix)>,
{
    let mut x = x0;
    let mut iterations = 0;
    loop {
        let (f, jac) = eval(&x)?;
        let residual = max_abs(&f);
        if !residual.is_finite() {
            return Err(Error::NewtonDiverged { iterations, residual });
        }
        if residual <= opts.tol {
            for _ in 0..opts.polish {
                let (f, jac) = eval(&x)?;
                if max_abs(&f) == 0.0 {
                    break;
                }
                let dx = solve(&jac, &f, context)?;
                let trial = &x - dx;
                let (ft, _) = eval(&trial)?;
                if max_abs(&ft) <= max_abs(&f) {
                    x = trial;
                } else {
                    break;
                }
            }
            let (f, _) = eval(&x)?;
            return Ok(NewtonOutcome { x, iterations, residual: max_abs(&f) });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NewtonDiverged { iterations, residual });
        }
        let dx = solve(&jac, &f, context)?;
        x -= dx;
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_square_root() {
        let opts = NewtonOptions { tol: 1e-14, max_iter: 50, polish: 1 };
        let out = solve_newton(Vector::from_element(1, 1.0), opts, "sqrt", |x| {
            Ok((Vector::from_element(1, x[0] * x[0] - 2.0), Matrix::from_element(1, 1, 2.0 * x[0])))
        })
        .unwrap();
        assert!((out.x[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(out.iterations <= 6);
    }

    #[test]
    fn reports_divergence() {
        let opts = NewtonOptions { tol: 1e-14, max_iter: 5, polish: 0 };
        let err = solve_newton(Vector::from_element(1, 1.0), opts, "no root", |x| {
            Ok((Vector::from_element(1, x[0] * x[0] + 1.0), Matrix::from_element(1, 1, 2.0 * x[0])))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NewtonDiverged { .. } | Error::SingularJacobian { .. }));
    }
}
