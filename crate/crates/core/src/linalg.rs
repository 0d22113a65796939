//! Small dense helpers shared by the integrators and diagnostics.

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Canonical structure matrix `J = [[0, I], [-I, 0]]` of size `2n`.
pub fn canonical_j(n: usize) -> Matrix {
    let mut j = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// `J * v` without forming `J`.
pub fn apply_j(v: &Vector) -> Vector {
    let n = v.len() / 2;
    let mut out = Vector::zeros(v.len());
    for i in 0..n {
        out[i] = v[n + i];
        out[n + i] = -v[i];
    }
    out
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(v: &Vector) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// `‖Dᵀ J D − J‖_∞`; zero for symplectic `D`.
pub fn symplectic_form_defect(d: &Matrix) -> f64 {
    let j = canonical_j(d.nrows() / 2);
    inf_norm(&(d.transpose() * &j * d - j))
}

/// `‖A J Aᵀ − J‖_∞`, the form used to certify canonical maps.
pub fn cosymplectic_defect(a: &Matrix) -> f64 {
    let j = canonical_j(a.nrows() / 2);
    inf_norm(&(a * &j * a.transpose() - j))
}

pub fn stack(top: &Vector, bottom: &Vector) -> Vector {
    let mut out = Vector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(top);
    out.rows_mut(top.len(), bottom.len()).copy_from(bottom);
    out
}

pub fn split(z: &Vector) -> (Vector, Vector) {
    let n = z.len() / 2;
    (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
}

pub fn solve(a: &Matrix, b: &Vector, context: &str) -> Result<Vector> {
    a.clone().lu().solve(b).ok_or_else(|| Error::SingularJacobian { context: context.into() })
}

pub fn inverse(a: &Matrix, context: &str) -> Result<Matrix> {
    a.clone().try_inverse().ok_or_else(|| Error::SingularJacobian { context: context.into() })
}

pub fn ensure_finite(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn ensure_len(v: &Vector, expected: usize) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got: v.len() })
    }
}

/// Central-difference step used for derivative fallbacks.
pub fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &Vector, rel: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<f64>,
{
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = fd_step(x[i], rel);
        let (hi, lo) = (x[i] + h, x[i] - h);
        probe[i] = hi;
        let up = f(&probe)?;
        probe[i] = lo;
        let down = f(&probe)?;
        probe[i] = x[i];
        g[i] = (up - down) / (hi - lo);
    }
    Ok(g)
}

/// Central-difference Jacobian of a vector function; columns are inputs.
pub fn fd_jacobian<F>(f: F, x: &Vector, step: impl Fn(f64) -> f64) -> Result<Matrix>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let mut probe = x.clone();
    let mut cols: Vec<Vector> = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step(x[i]);
        // Divide by the representable spacing, not the nominal 2h.
        let (hi, lo) = (x[i] + h, x[i] - h);
        probe[i] = hi;
        let up = f(&probe)?;
        probe[i] = lo;
        let down = f(&probe)?;
        probe[i] = x[i];
        cols.push((up - down) / (hi - lo));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(Matrix::from_fn(rows, x.len(), |r, c| cols[c][r]))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn j_squares_to_minus_identity() {
        let j = canonical_j(3);
        assert_abs_diff_eq!(&j * &j, -Matrix::identity(6, 6));
        let v = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(apply_j(&v), canonical_j(2) * &v);
    }

    #[test]
    fn identity_has_no_defect() {
        assert_eq!(symplectic_form_defect(&Matrix::identity(4, 4)), 0.0);
        let scale = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(symplectic_form_defect(&scale), 1.0);
        assert_abs_diff_eq!(cosymplectic_defect(&scale), 1.0);
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let x = Vector::from_vec(vec![1.5, -2.0]);
        let g = fd_gradient(|v| Ok(v[0] * v[0] + 3.0 * v[0] * v[1]), &x, 1e-6).unwrap();
        assert_abs_diff_eq!(g[0], 2.0 * 1.5 + 3.0 * -2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 3.0 * 1.5, epsilon = 1e-8);
    }
}
