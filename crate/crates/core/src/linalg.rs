//! Small dense linear-algebra helpers shared by the analysis modules.
//!
//! Everything here works on `nalgebra` dynamic matrices; dimensions in this
//! crate are tiny (2d <= 20 or so) so clarity wins over blocking.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn skew_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_part(m)
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).min()
}

pub fn max_sym_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).max()
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    let v = &eig.eigenvectors;
    symmetrize(&(v * d * v.transpose()))
}

/// S^{-1/2} for a symmetric positive definite S.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let min = min_sym_eig(m);
    if !(min > 0.0) {
        return Err(Error::Singular(format!(
            "inverse square root needs a positive definite matrix (min eigenvalue {min:e})"
        )));
    }
    Ok(sym_fn(m, |x| 1.0 / x.sqrt()))
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(m, |x| x.max(0.0).sqrt())
}

const SCHUR_SWEEPS_PER_DIM: usize = 200;
const SCHUR_RETRIES: usize = 6;

/// Deterministic Householder reflector used to break symmetric structure on
/// which shifted QR can stall.
fn reflector(n: usize, k: usize) -> DMatrix<f64> {
    let v = DVector::from_fn(n, |i, _| ((i + 1) as f64 * 0.754_877_666_246_692_7 * (k + 1) as f64).fract() - 0.5);
    let v = v.normalize();
    DMatrix::identity(n, n) - &v * v.transpose() * 2.0
}

/// Eigenvalues of a real matrix. nalgebra's double-shift QR has no exceptional
/// shifts and stalls on close conjugate pairs, so this goes through faer.
/// NaN if the iteration fails.
pub fn complex_eigenvalues(m: &DMatrix<f64>) -> Vec<C64> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    let f = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    match f.eigenvalues() {
        Ok(ev) => ev.iter().map(|z| C64::new(z.re, z.im)).collect(),
        Err(e) => {
            log::error!("eigenvalue iteration failed on a {n}x{n} matrix: {e:?}");
            vec![C64::new(f64::NAN, f64::NAN); n]
        }
    }
}

/// Complex Schur form `m = Q T Q^H`. When QR iteration stalls, retries on
/// copies conjugated by deterministic Householder reflectors.
pub fn schur_complex(m: &DMatrix<C64>) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    let n = m.nrows();
    let iters = SCHUR_SWEEPS_PER_DIM * n.max(1);
    for k in 0..=SCHUR_RETRIES {
        if k == 0 {
            if let Some(s) = m.clone().try_schur(f64::EPSILON, iters) {
                return Ok(s.unpack());
            }
        } else {
            let p = to_complex(&reflector(n, k));
            let b = &p * m * p.adjoint();
            if let Some(s) = b.try_schur(f64::EPSILON, iters) {
                let (q, t) = s.unpack();
                return Ok((p.adjoint() * q, t));
            }
        }
    }
    Err(Error::Singular(format!("complex Schur iteration failed to converge on a {n}x{n} matrix")))
}

/// max Re over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    complex_eigenvalues(m)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().exp()
}

pub fn is_normal(m: &DMatrix<f64>, tol: f64) -> bool {
    let comm = m * m.transpose() - m.transpose() * m;
    comm.norm() <= tol * (1.0 + m.norm() * m.norm())
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// [[a, b], [c, d]] for square d x d blocks.
pub fn block2(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((0, n), (n, n)).copy_from(b);
    out.view_mut((n, 0), (n, n)).copy_from(c);
    out.view_mut((n, n), (n, n)).copy_from(d);
    out
}

/// The 2d x 2d noise-injection matrix diag(0_d, I_d).
pub fn j_matrix(d: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    for i in d..2 * d {
        j[(i, i)] = 1.0;
    }
    j
}

pub fn require_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{what} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parameter(format!("{what} has non-finite entries")));
    }
    Ok(m.nrows())
}

/// Numerical rank with an absolute singular-value threshold.
pub fn rank_c(m: &DMatrix<C64>, tol: f64) -> (usize, f64) {
    let sv = m.clone().singular_values();
    let rank = sv.iter().filter(|&&s| s > tol).count();
    // distance of the closest singular value to the threshold, on a log scale
    let margin = sv
        .iter()
        .map(|&s| (s.max(1e-300) / tol).ln().abs())
        .fold(f64::INFINITY, f64::min);
    (rank, margin)
}

/// Orthonormal basis of the null space of a complex matrix (columns).
pub fn null_space_c(m: &DMatrix<C64>, tol: f64) -> DMatrix<C64> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^H");
    let mut cols = Vec::new();
    for i in 0..n {
        let s = if i < svd.singular_values.len() {
            svd.singular_values[i]
        } else {
            0.0
        };
        if s <= tol {
            cols.push(v_t.row(i).adjoint());
        }
    }
    // thin SVD only returns min(m, n) rows; square inputs are all we use
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

pub fn lin_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

pub fn vec_norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

pub fn dvec(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = sym_inv_sqrt(&s).unwrap();
        let prod = &r * &s * &r;
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn inv_sqrt_rejects_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(sym_inv_sqrt(&s).is_err());
    }

    #[test]
    fn rotation_is_normal_shear_is_not() {
        let rot = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 2.0, 1.0]);
        let shear = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]);
        assert!(is_normal(&rot, 1e-12));
        assert!(!is_normal(&shear, 1e-12));
    }

    #[test]
    fn null_space_of_jordan_block() {
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let ns = null_space_c(&to_complex(&n), 1e-10);
        assert_eq!(ns.ncols(), 1);
        assert!(ns[(1, 0)].norm() < 1e-12);
    }
}
