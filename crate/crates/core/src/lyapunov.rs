//! Stable Lyapunov equations `U^T X + X U = -W` / `U X + X U^T = -W` with
//! possibly singular `W`, the drift metric `Gamma`, the stationary fluctuation
//! covariance `Sigma`, and the radius on which the metric still contracts.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covflow::drift_matrix;
use crate::error::{Error, Result};
use crate::linalg::{self, j_matrix, max_sym_eig, min_sym_eig, op_norm, spectral_abscissa, sym_part, to_complex, C64};
use crate::model::{ball_samples, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// `U^T X + X U = -W`
    Left,
    /// `U X + X U^T = -W`
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Certification {
    /// `lambda_min(X)` clears the threshold and the structural conditions hold.
    Certified,
    /// `X` is numerically positive definite but `W` is not coercive on the
    /// momentum block or `U_21` is singular, so the structural argument is unavailable.
    Unavailable,
    /// `lambda_min(X)` is below `1e-12 trace(X)/n`.
    NotPositiveDefinite,
}

#[derive(Clone, Debug, Serialize)]
pub struct LyapunovSolution {
    pub x: DMatrix<f64>,
    pub residual_fro: f64,
    pub min_eig: f64,
    pub orientation: Orientation,
    pub certification: Certification,
}

impl LyapunovSolution {
    pub fn residual_scale(u: &DMatrix<f64>, w: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
        u.norm() * x.norm() + w.norm()
    }
}

pub fn residual(u: &DMatrix<f64>, w: &DMatrix<f64>, x: &DMatrix<f64>, orientation: Orientation) -> DMatrix<f64> {
    match orientation {
        Orientation::Left => u.transpose() * x + x * u + w,
        Orientation::Right => u * x + x * u.transpose() + w,
    }
}

fn check_inputs(u: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<usize> {
    let n = linalg::require_square(u, "U")?;
    if w.nrows() != n || w.ncols() != n {
        return Err(Error::Dimension(format!("W must be {n}x{n}, got {}x{}", w.nrows(), w.ncols())));
    }
    let asym = (w - w.transpose()).norm();
    if asym > 1e-12 * w.norm().max(1e-300) {
        return Err(Error::Parameter(format!("W is not symmetric (||W - W^T|| = {asym:.3e})")));
    }
    let abscissa = spectral_abscissa(u);
    let band = 1e-10 * op_norm(u).max(1.0);
    if !(abscissa <= -band) {
        return Err(Error::Unstable {
            abscissa,
            context: "Lyapunov operator needs all eigenvalues of U in the open left half plane".into(),
        });
    }
    Ok(n)
}

/// Solves `T Y + Y T^H = C` for upper-triangular `T` by back substitution.
fn triangular_sylvester(t: &DMatrix<C64>, c: &DMatrix<C64>) -> DMatrix<C64> {
    let n = t.nrows();
    let mut y = DMatrix::<C64>::zeros(n, n);
    for i in (0..n).rev() {
        for j in (0..n).rev() {
            let mut rhs = c[(i, j)];
            for k in i + 1..n {
                rhs -= t[(i, k)] * y[(k, j)];
            }
            for k in j + 1..n {
                rhs -= y[(i, k)] * t[(j, k)].conj();
            }
            y[(i, j)] = rhs / (t[(i, i)] + t[(j, j)].conj());
        }
    }
    y
}

/// Right-oriented complex Schur (Bartels-Stewart) solve of `U X + X U^T = -W`.
fn schur_right(u: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (q, t) = linalg::schur_complex(&to_complex(u))?;
    let c = -(q.adjoint() * to_complex(w) * &q);
    let y = triangular_sylvester(&t, &c);
    let x = &q * y * q.adjoint();
    Ok(sym_part(&x.map(|z| z.re)))
}

fn oriented(u: &DMatrix<f64>, orientation: Orientation) -> DMatrix<f64> {
    match orientation {
        Orientation::Left => u.transpose(),
        Orientation::Right => u.clone(),
    }
}

/// Kronecker-vectorized solve, `O(n^6)`. Used as a fallback and as an oracle.
pub fn solve_lyapunov_kronecker(u: &DMatrix<f64>, w: &DMatrix<f64>, orientation: Orientation) -> Result<DMatrix<f64>> {
    let n = check_inputs(u, w)?;
    let v = oriented(u, orientation);
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&v) + v.kronecker(&eye);
    let rhs = -DVector::from_column_slice(w.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Kronecker Lyapunov operator is singular".into()))?;
    Ok(sym_part(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Unique solution of the stable Lyapunov equation, with a positive
/// definiteness certificate.
///
/// Certification requires `lambda_min(X) > 1e-12 trace(X)/n`, the momentum
/// block of `W` to be positive definite, and the lower-left block `U_21` of
/// `U` (as supplied) to be invertible.
pub fn solve_lyapunov_stable(u: &DMatrix<f64>, w: &DMatrix<f64>, orientation: Orientation) -> Result<LyapunovSolution> {
    let n = check_inputs(u, w)?;
    let v = oriented(u, orientation);
    let (mut x, mut res) = match schur_right(&v, w) {
        Ok(x) => {
            let res = residual(u, w, &x, orientation).norm();
            (x, res)
        }
        Err(e) => {
            log::warn!("{e}");
            (DMatrix::zeros(n, n), f64::INFINITY)
        }
    };
    let scale = LyapunovSolution::residual_scale(u, w, &x);
    if !(res <= 1e-10 * scale) && n <= 30 {
        log::warn!("Schur solve residual {res:.3e} too large; falling back to Kronecker solve");
        x = solve_lyapunov_kronecker(u, w, orientation)?;
        res = residual(u, w, &x, orientation).norm();
    }
    if !res.is_finite() {
        return Err(Error::Singular("Lyapunov solve failed".into()));
    }
    let min_eig = min_sym_eig(&x);
    let certification = certify(u, w, &x, min_eig);
    if certification == Certification::Unavailable {
        log::warn!("positive definiteness of the Lyapunov solution is numerical only (structural conditions fail)");
    }
    Ok(LyapunovSolution {
        x,
        residual_fro: res,
        min_eig,
        orientation,
        certification,
    })
}

fn certify(u: &DMatrix<f64>, w: &DMatrix<f64>, x: &DMatrix<f64>, min_eig: f64) -> Certification {
    let n = x.nrows();
    if !(min_eig > 1e-12 * x.trace() / n as f64) {
        return Certification::NotPositiveDefinite;
    }
    if n % 2 != 0 {
        return Certification::Unavailable;
    }
    let d = n / 2;
    let wpp = w.view((d, d), (d, d)).into_owned();
    let u21 = u.view((d, 0), (d, d)).into_owned();
    let u21_ok = u21.singular_values().min() > 1e-12 * op_norm(u).max(1.0);
    if min_sym_eig(&wpp) > 0.0 && u21_ok {
        Certification::Certified
    } else {
        Certification::Unavailable
    }
}

/// Solves again after conjugating by a coordinate permutation, which changes
/// the Schur ordering. Returns the back-permuted solution.
pub fn solve_permuted(u: &DMatrix<f64>, w: &DMatrix<f64>, orientation: Orientation, perm: &[usize]) -> Result<DMatrix<f64>> {
    let n = check_inputs(u, w)?;
    if perm.len() != n {
        return Err(Error::Dimension("permutation length".into()));
    }
    let mut p = DMatrix::<f64>::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        p[(i, j)] = 1.0;
    }
    let up = &p * u * p.transpose();
    let wp = &p * w * p.transpose();
    let xp = schur_right(&oriented(&up, orientation), &wp)?;
    Ok(p.transpose() * xp * p)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `int_0^t e^{V s} W e^{V^T s} ds` with `V = U` (right) or `U^T` (left):
/// Gauss-Legendre on a short base interval, then doubling
/// `Q(2h) = Q(h) + E(h) Q(h) E(h)^T`.
pub fn lyapunov_quadrature(u: &DMatrix<f64>, w: &DMatrix<f64>, orientation: Orientation, t: f64) -> DMatrix<f64> {
    let v = oriented(u, orientation);
    let norm = op_norm(&v).max(1e-300);
    let mut doublings = 0u32;
    let mut h = t;
    while h * norm > 0.25 {
        h /= 2.0;
        doublings += 1;
    }
    let (nodes, weights) = gauss_legendre(16);
    let mut q = DMatrix::zeros(v.nrows(), v.ncols());
    for (z, wt) in nodes.iter().zip(&weights) {
        let s = 0.5 * h * (z + 1.0);
        let e = linalg::expm(&(&v * s));
        q += &e * w * e.transpose() * (0.5 * h * wt);
    }
    let mut e = linalg::expm(&(&v * h));
    for _ in 0..doublings {
        q = &q + &e * &q * e.transpose();
        e = &e * &e;
    }
    sym_part(&q)
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaMetric {
    pub gamma: DMatrix<f64>,
    /// Largest `xi` with `xi |x|^2 <= <x, Gamma x> <= |x|^2 / xi`.
    pub xi: f64,
    pub residual_fro: f64,
}

/// `Gamma` solving `A^T Gamma + Gamma A = -I`.
pub fn gamma_matrix(a: &DMatrix<f64>) -> Result<GammaMetric> {
    let n = linalg::require_square(a, "A")?;
    let sol = solve_lyapunov_stable(a, &DMatrix::identity(n, n), Orientation::Left)?;
    let xi = (1.0 / max_sym_eig(&sol.x)).min(sol.min_eig);
    Ok(GammaMetric {
        gamma: sol.x,
        xi,
        residual_fro: sol.residual_fro,
    })
}

/// Stationary fluctuation covariance: `A Sigma + Sigma A^T = -J` with `A = A(0)`.
pub fn sigma_solution(spec: &ModelSpec) -> Result<LyapunovSolution> {
    let d = spec.dim();
    let a = drift_matrix(spec, &DVector::zeros(d));
    let sol = solve_lyapunov_stable(&a, &j_matrix(d), Orientation::Right).map_err(|e| match e {
        Error::Unstable { abscissa, .. } => Error::Unstable {
            abscissa,
            context: "A(0) is not stable; run analyze-linear on DF(0) for the full verdict".into(),
        },
        other => other,
    })?;
    Ok(sol)
}

/// Cached `Sigma` for the model.
pub fn sigma_matrix(spec: &ModelSpec) -> Result<DMatrix<f64>> {
    if let Some(s) = spec.cache.sigma.get() {
        return Ok(s.clone());
    }
    let s = sigma_solution(spec)?.x;
    let _ = spec.cache.sigma.set(s.clone());
    Ok(s)
}

/// Cached `(Gamma, xi)` at `A = A(0)`.
pub fn model_gamma(spec: &ModelSpec) -> Result<(DMatrix<f64>, f64)> {
    if let Some(g) = spec.cache.gamma_metric.get() {
        return Ok(g.clone());
    }
    let a = drift_matrix(spec, &DVector::zeros(spec.dim()));
    let g = gamma_matrix(&a)?;
    let out = (g.gamma, g.xi);
    let _ = spec.cache.gamma_metric.set(out.clone());
    Ok(out)
}

pub const DELTA_CAP: f64 = 1.0;
const DELTA_FLOOR: f64 = 1e-8;

fn sphere_directions(d: usize, n: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
    }
    if d > 1 {
        for q in ball_samples(d, 1.0, n) {
            let nq = q.norm();
            if nq > 1e-3 {
                dirs.push(q / nq);
            }
        }
    }
    dirs
}

fn metric_defect(spec: &ModelSpec, gamma: &DMatrix<f64>, a0: &DMatrix<f64>, radius: f64, dirs: &[DVector<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for frac in [0.25, 0.5, 0.75, 1.0] {
        for u in dirs {
            let q = u * (radius * frac);
            let e = drift_matrix(spec, &q) - a0;
            worst = worst.max(op_norm(&(e.transpose() * gamma + gamma * e)));
        }
    }
    worst
}

/// Largest radius `delta <= 1` (bisection) with
/// `||(A(q) - A)^T Gamma + Gamma (A(q) - A)|| <= 1/2` at all sampled `|q| <= delta`.
pub fn drift_metric_delta(spec: &ModelSpec) -> Result<f64> {
    let (gamma, _) = model_gamma(spec)?;
    let d = spec.dim();
    let a0 = drift_matrix(spec, &DVector::zeros(d));
    let dirs = sphere_directions(d, 64);
    let ok = |r: f64| metric_defect(spec, &gamma, &a0, r, &dirs) <= 0.5;
    if ok(DELTA_CAP) {
        return Ok(DELTA_CAP);
    }
    if !ok(DELTA_FLOOR) {
        return Err(Error::Degenerate(format!(
            "drift metric condition fails already at radius {DELTA_FLOOR:e}"
        )));
    }
    let (mut lo, mut hi) = (DELTA_FLOOR, DELTA_CAP);
    while hi - lo > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

impl ModelSpec {
    /// Computes `delta` and stores it on the model.
    pub fn with_delta(mut self) -> Result<Self> {
        self.delta_nbhd = Some(drift_metric_delta(&self)?);
        Ok(self)
    }
}

/// Smallest value of `-(2<y, Gamma A(q) y>) - (xi/2)<y, Gamma y>` over random
/// unit `y` and sampled `|q| <= delta`. Non-negative when the drift inequality holds.
pub fn drift_inequality_margin(spec: &ModelSpec, delta: f64, n: usize) -> Result<f64> {
    let (gamma, xi) = model_gamma(spec)?;
    let d = spec.dim();
    let ys = sphere_directions(2 * d, n);
    let qs = ball_samples(d, delta, n);
    let mut worst = f64::INFINITY;
    for q in &qs {
        let a = drift_matrix(spec, q);
        let ga = &gamma * a;
        for y in &ys {
            let lhs = 2.0 * y.dot(&(&ga * y));
            let rhs = -0.5 * xi * y.dot(&(&gamma * y));
            worst = worst.min(rhs - lhs);
        }
    }
    Ok(worst)
}

/// Complex-valued `x^H M x`, used in tests of definiteness on complex vectors.
pub fn hermitian_form(m: &DMatrix<f64>, x: &DVector<C64>) -> f64 {
    let mc = to_complex(m);
    (x.adjoint() * mc * x)[(0, 0)].re
}
