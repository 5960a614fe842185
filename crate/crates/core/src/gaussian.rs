//! Gaussian distributions and total-variation distances between them.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use libm::{erf, erfc};

use crate::error::{Error, Result};
use crate::linalg::{min_sym_eig, sym_eigenvalues, sym_fn, sym_inv_sqrt, sym_part};
use crate::lyapunov::gauss_legendre;

#[derive(Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    clamped: bool,
    chol: OnceLock<Option<DMatrix<f64>>>,
}

impl Clone for Gaussian {
    fn clone(&self) -> Self {
        Gaussian {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
            clamped: self.clamped,
            chol: OnceLock::new(),
        }
    }
}

impl Gaussian {
    /// Checks symmetry (`1e-12` relative) and clamps eigenvalues down to
    /// `-1e-12 trace/n` at zero, setting a flag.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "covariance must be {n}x{n}, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite Gaussian parameters".into()));
        }
        let asym = (&cov - cov.transpose()).norm();
        if asym > 1e-12 * cov.norm().max(1e-300) {
            return Err(Error::Parameter(format!("covariance not symmetric (asymmetry {asym:.3e})")));
        }
        let cov = sym_part(&cov);
        let floor = -1e-12 * cov.trace().abs() / n.max(1) as f64;
        let min = if n > 0 { min_sym_eig(&cov) } else { 0.0 };
        if min < floor {
            return Err(Error::Parameter(format!("covariance has eigenvalue {min:.3e} < 0")));
        }
        let (cov, clamped) = if min < 0.0 {
            log::debug!("clamping covariance eigenvalue {min:.3e} to zero");
            (sym_fn(&cov, |v| v.max(0.0)), true)
        } else {
            (cov, false)
        };
        Ok(Gaussian {
            mean,
            cov,
            clamped,
            chol: OnceLock::new(),
        })
    }

    pub fn standard(n: usize) -> Self {
        Gaussian::new(DVector::zeros(n), DMatrix::identity(n, n)).expect("identity is a valid covariance")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn was_clamped(&self) -> bool {
        self.clamped
    }

    /// Adds `1e-12 trace/n I` when the covariance is (numerically) singular.
    pub fn regularized(&self) -> (Gaussian, bool) {
        let n = self.dim();
        if self.cov.clone().cholesky().is_some() && min_sym_eig(&self.cov) > 0.0 {
            return (self.clone(), false);
        }
        let bump = 1e-12 * self.cov.trace().max(1e-300) / n as f64;
        log::warn!("regularizing singular covariance by {bump:.3e} I");
        let cov = &self.cov + DMatrix::identity(n, n) * bump;
        (Gaussian::new(self.mean.clone(), cov).expect("regularized covariance is valid"), true)
    }

    /// Lower factor `L` with `L L^T = cov` (symmetric square root when the
    /// Cholesky factorization fails on a semi-definite matrix).
    pub fn factor(&self) -> &DMatrix<f64> {
        self.chol
            .get_or_init(|| {
                Some(match self.cov.clone().cholesky() {
                    Some(c) => c.l(),
                    None => sym_fn(&self.cov, |v| v.max(0.0).sqrt()),
                })
            })
            .as_ref()
            .expect("factor always set")
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.factor() * z
    }

    pub fn samples(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    /// Log density; requires a positive definite covariance.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("log density of a degenerate Gaussian".into()))?;
        let r = x - &self.mean;
        let z = chol.l().solve_lower_triangular(&r).expect("triangular solve");
        let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        Ok(-0.5 * (z.norm_squared() + logdet + self.dim() as f64 * (2.0 * PI).ln()))
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TvUnit {
    pub value: f64,
    /// `|x| / sqrt(2 pi)`.
    pub linear_bound: f64,
}

/// `d_TV(N(x, I), N(0, I)) = erf(|x| / (2 sqrt 2))`.
pub fn tv_unit(x: &DVector<f64>) -> TvUnit {
    tv_unit_norm(x.norm())
}

pub fn tv_unit_norm(r: f64) -> TvUnit {
    TvUnit {
        value: erf(r / (2.0 * SQRT_2)),
        linear_bound: r / (2.0 * PI).sqrt(),
    }
}

/// `(m, C)` with `d_TV(g1, g2) = d_TV(N(m, C), N(0, I))`:
/// `m = T^{-1/2}(x - y)`, `C = T^{-1/2} S T^{-1/2}` for `g1 = N(x, S)`, `g2 = N(y, T)`.
pub fn tv_reduce(g1: &Gaussian, g2: &Gaussian) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if g1.dim() != g2.dim() {
        return Err(Error::Dimension("Gaussians of different dimension".into()));
    }
    if !(min_sym_eig(g1.cov()) > 0.0) {
        return Err(Error::Singular("first covariance is not positive definite; regularize first".into()));
    }
    let w = sym_inv_sqrt(g2.cov()).map_err(|_| Error::Singular("second covariance is not positive definite; regularize first".into()))?;
    let m = &w * (g1.mean() - g2.mean());
    let c = sym_part(&(&w * g1.cov() * &w));
    Ok((m, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum TvMethod {
    /// Closed form; only when the covariances coincide.
    ExactIfReducible,
    /// `(3/2) ||T^{-1/2} S T^{-1/2} - I||_F` for zero-mean pairs.
    FrobeniusBound,
    /// Mixture importance sampling.
    MonteCarlo { n: usize, seed: u64 },
    /// Deterministic quadrature in the whitened frame; dimension at most 2.
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TvKind {
    Exact,
    UpperBound,
    Estimate { stderr: f64 },
    Numeric,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TvValue {
    pub value: f64,
    #[serde(flatten)]
    pub kind: TvKind,
}

const SAME_COV_TOL: f64 = 1e-12;

pub fn tv_gaussian(g1: &Gaussian, g2: &Gaussian, method: TvMethod) -> Result<TvValue> {
    let (m, c) = tv_reduce(g1, g2)?;
    let n = m.len();
    let cov_gap = (&c - DMatrix::<f64>::identity(n, n)).norm();
    match method {
        TvMethod::ExactIfReducible => {
            if cov_gap > SAME_COV_TOL * (n as f64).sqrt() {
                return Err(Error::Method(format!(
                    "exact TV needs equal covariances (whitened gap {cov_gap:.3e})"
                )));
            }
            Ok(TvValue {
                value: tv_unit(&m).value,
                kind: TvKind::Exact,
            })
        }
        TvMethod::FrobeniusBound => {
            let scale = g1.mean().norm().max(g2.mean().norm()).max(1.0);
            if (g1.mean() - g2.mean()).norm() > 1e-14 * scale {
                return Err(Error::Method("Frobenius bound applies to pairs with equal means".into()));
            }
            Ok(TvValue {
                value: 1.5 * cov_gap,
                kind: TvKind::UpperBound,
            })
        }
        TvMethod::MonteCarlo { n: samples, seed } => {
            let (value, stderr) = tv_monte_carlo(&m, &c, samples, seed)?;
            Ok(TvValue {
                value,
                kind: TvKind::Estimate { stderr },
            })
        }
        TvMethod::Quadrature => Ok(TvValue {
            value: tv_quadrature(&m, &c)?,
            kind: TvKind::Numeric,
        }),
    }
}

/// `E_mix[|phi1 - phi2| / (phi1 + phi2)]` with stratified draws from both
/// components. Returns `(estimate, stderr)`.
fn tv_monte_carlo(m: &DVector<f64>, c: &DMatrix<f64>, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples < 4 {
        return Err(Error::Parameter("Monte Carlo TV needs at least 4 samples".into()));
    }
    let n = m.len();
    let g1 = Gaussian::new(m.clone(), c.clone())?;
    let g2 = Gaussian::standard(n);
    let chol = c
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("whitened covariance not positive definite".into()))?;
    let l = chol.l();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    // log phi1 - log phi2 at x
    let llr = |x: &DVector<f64>| {
        let z = l.solve_lower_triangular(&(x - m)).expect("triangular solve");
        -0.5 * (z.norm_squared() + logdet) + 0.5 * x.norm_squared()
    };
    let half = samples / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = [(0.0, 0.0); 2];
    for (k, g) in [&g1, &g2].iter().enumerate() {
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..half {
            let x = g.sample(&mut rng);
            let v = (0.5 * llr(&x)).tanh().abs();
            s += v;
            s2 += v * v;
        }
        let mean = s / half as f64;
        let var = (s2 / half as f64 - mean * mean).max(0.0);
        stats[k] = (mean, var / half as f64);
    }
    let est = 0.5 * (stats[0].0 + stats[1].0);
    let se = 0.5 * (stats[0].1 + stats[1].1).sqrt();
    Ok((est, se))
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Probability that `N(mu, s^2)` puts on `{x : a x^2 + b x + c > 0}`.
fn quad_region_prob(a: f64, b: f64, c: f64, mu: f64, s: f64) -> f64 {
    let p = |lo: f64, hi: f64| {
        let l = if lo == f64::NEG_INFINITY { 0.0 } else { norm_cdf((lo - mu) / s) };
        let h = if hi == f64::INFINITY { 1.0 } else { norm_cdf((hi - mu) / s) };
        (h - l).max(0.0)
    };
    let scale = a.abs().max(b.abs()).max(1e-300);
    if a.abs() <= 1e-14 * scale {
        if b.abs() <= 1e-300 {
            return if c > 0.0 { 1.0 } else { 0.0 };
        }
        let root = -c / b;
        return if b > 0.0 { p(root, f64::INFINITY) } else { p(f64::NEG_INFINITY, root) };
    }
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return if a > 0.0 { 1.0 } else { 0.0 };
    }
    let sd = disc.sqrt();
    // numerically stable roots
    let qv = -0.5 * (b + b.signum() * sd);
    let (mut r1, mut r2) = (qv / a, if qv != 0.0 { c / qv } else { 0.0 });
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    if a > 0.0 {
        p(f64::NEG_INFINITY, r1) + p(r2, f64::INFINITY)
    } else {
        p(r1, r2)
    }
}

/// TV between `N(m, C)` and `N(0, I)` for dimension 1 or 2, via the region
/// `{phi1 > phi2}` in the eigenbasis of `C`: closed form in the last coordinate,
/// composite Gauss-Legendre in the first.
fn tv_quadrature(m: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let n = m.len();
    if n == 0 || n > 2 {
        return Err(Error::Method(format!("quadrature TV supports dimension 1 or 2, got {n}")));
    }
    let eig = nalgebra::SymmetricEigen::new(sym_part(c));
    let cs = eig.eigenvalues.clone();
    if cs.min() <= 0.0 {
        return Err(Error::Singular("whitened covariance not positive definite".into()));
    }
    let mr = eig.eigenvectors.transpose() * m;
    // g_i(x) = (1 - 1/c_i) x^2 + (2 m_i / c_i) x - m_i^2/c_i - ln c_i; region sum g_i > 0
    let coef = |i: usize| {
        let ci = cs[i];
        (1.0 - 1.0 / ci, 2.0 * mr[i] / ci, -mr[i] * mr[i] / ci - ci.ln())
    };
    let last = n - 1;
    let (a, b, c0) = coef(last);
    let inner = |shift: f64| {
        let p1 = quad_region_prob(a, b, c0 + shift, mr[last], cs[last].sqrt());
        let p2 = quad_region_prob(a, b, c0 + shift, 0.0, 1.0);
        (p1, p2)
    };
    if n == 1 {
        let (p1, p2) = inner(0.0);
        return Ok((p1 - p2).clamp(0.0, 1.0));
    }
    let (a1, b1, c1) = coef(0);
    let s1 = cs[0].sqrt();
    let half_width = 12.0 * s1.max(1.0) + mr[0].abs();
    let lo = -half_width;
    let panels = 4000;
    let h = 2.0 * half_width / panels as f64;
    let (nodes, weights) = gauss_legendre(8);
    let phi = |x: f64, mu: f64, s: f64| (-0.5 * ((x - mu) / s).powi(2)).exp() / (s * (2.0 * PI).sqrt());
    let mut total = 0.0;
    for k in 0..panels {
        let x0 = lo + k as f64 * h;
        for (z, w) in nodes.iter().zip(&weights) {
            let x = x0 + 0.5 * h * (z + 1.0);
            let shift = a1 * x * x + b1 * x + c1;
            let (p1, p2) = inner(shift);
            total += 0.5 * h * w * (phi(x, mr[0], s1) * p1 - phi(x, 0.0, 1.0) * p2);
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Sample mean and (unbiased) covariance of a point cloud.
pub fn sample_moments(points: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Parameter("need at least two points for sample moments".into()));
    }
    let d = points[0].len();
    let mut mean = DVector::zeros(d);
    for p in points {
        if p.len() != d {
            return Err(Error::Dimension("point cloud with mixed dimensions".into()));
        }
        mean += p;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let r = p - &mean;
        cov += &r * r.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, sym_part(&cov)))
}

/// `true` when all eigenvalues of the covariance exceed `tol * trace / n`.
pub fn is_well_conditioned(cov: &DMatrix<f64>, tol: f64) -> bool {
    let n = cov.nrows() as f64;
    sym_eigenvalues(cov).min() > tol * cov.trace() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn g(mean: &[f64], cov: &[f64]) -> Gaussian {
        let n = mean.len();
        Gaussian::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(n, n, cov)).unwrap()
    }

    /// Adaptive Simpson on `[a, b]`.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn tv_unit_examples() {
        assert_eq!(tv_unit(&DVector::zeros(3)).value, 0.0);
        let quad = (2.0 / PI).sqrt() * simpson(&|s: f64| (-s * s / 2.0).exp(), 0.0, 1.0, 1e-14);
        let v = tv_unit(&DVector::from_column_slice(&[2.0, 0.0])).value;
        assert_relative_eq!(v, quad, epsilon = 1e-12);
        assert_relative_eq!(v, 0.6826894921, epsilon = 1e-10);
        assert!(tv_unit_norm(40.0).value > 1.0 - 1e-15);
    }

    #[test]
    fn tv_unit_below_linear_bound() {
        for i in 1..100 {
            let t = tv_unit_norm(i as f64 * 0.05);
            assert!(t.value <= t.linear_bound);
        }
    }

    #[test]
    fn equal_covariance_reduces_to_unit_case() {
        let s = [2.0, 0.3, 0.3, 0.5];
        let a = g(&[1.0, -1.0], &s);
        let b = g(&[0.2, 0.4], &s);
        let tv = tv_gaussian(&a, &b, TvMethod::ExactIfReducible).unwrap();
        let w = sym_inv_sqrt(&DMatrix::from_row_slice(2, 2, &s)).unwrap();
        let direct = tv_unit(&(w * DVector::from_column_slice(&[0.8, -1.4]))).value;
        assert_relative_eq!(tv.value, direct, epsilon = 1e-12);
        assert_eq!(tv.kind, TvKind::Exact);
    }

    #[test]
    fn identical_gaussians_are_canonical() {
        let a = g(&[1.0, 2.0], &[1.0, 0.2, 0.2, 3.0]);
        let (m, c) = tv_reduce(&a, &a).unwrap();
        assert!(m.norm() < 1e-15);
        assert!((c - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
        assert!(tv_gaussian(&a, &a, TvMethod::FrobeniusBound).unwrap().value < 1e-11);
    }

    #[test]
    fn reduction_is_idempotent_and_scale_invariant() {
        let a = g(&[1.0, 0.0], &[2.0, 0.5, 0.5, 1.0]);
        let b = g(&[0.0, 1.0], &[1.0, -0.2, -0.2, 0.7]);
        let (m, c) = tv_reduce(&a, &b).unwrap();
        let canon = Gaussian::new(m.clone(), c.clone()).unwrap();
        let (m2, c2) = tv_reduce(&canon, &Gaussian::standard(2)).unwrap();
        assert!((m2 - &m).norm() < 1e-14 && (c2 - &c).norm() < 1e-14);
        let scale = |x: &Gaussian| Gaussian::new(x.mean() * 7.0, x.cov() * 49.0).unwrap();
        let v = tv_gaussian(&a, &b, TvMethod::Quadrature).unwrap().value;
        let vs = tv_gaussian(&scale(&a), &scale(&b), TvMethod::Quadrature).unwrap().value;
        assert_relative_eq!(v, vs, epsilon = 1e-10);
    }

    #[test]
    fn one_dimensional_variance_pair() {
        // oracle: integrate |phi_1 - phi_2| / 2 directly
        let f = |x: f64| {
            let p1 = (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
            let p2 = (-x * x / 4.0).exp() / (4.0 * PI).sqrt();
            0.5 * (p1 - p2).abs()
        };
        // the densities cross at x^2 = 2 ln 2
        let k = (2.0 * 2f64.ln()).sqrt();
        let oracle = 2.0 * (simpson(&f, 0.0, k, 1e-13) + simpson(&f, k, 6.0, 1e-13) + simpson(&f, 6.0, 40.0, 1e-13));
        let crossing_mass = libm::erf(k / SQRT_2) - libm::erf(k / 2.0);
        assert_relative_eq!(oracle, crossing_mass, epsilon = 1e-11);
        assert_relative_eq!(oracle, 0.166064074983513, epsilon = 1e-12);
        let a = g(&[0.0], &[1.0]);
        let b = g(&[0.0], &[2.0]);
        let quad = tv_gaussian(&a, &b, TvMethod::Quadrature).unwrap().value;
        assert_relative_eq!(quad, oracle, epsilon = 1e-10);
        let mc = tv_gaussian(&a, &b, TvMethod::MonteCarlo { n: 1_000_000, seed: 7 }).unwrap();
        let TvKind::Estimate { stderr } = mc.kind else { panic!() };
        assert!(stderr < 1e-3);
        assert!((mc.value - oracle).abs() < 4.0 * stderr, "{} vs {oracle}", mc.value);
    }

    #[test]
    fn two_dimensional_quadrature_matches_monte_carlo() {
        let a = g(&[0.7, -0.3], &[1.5, 0.4, 0.4, 0.6]);
        let b = g(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let q = tv_gaussian(&a, &b, TvMethod::Quadrature).unwrap().value;
        let mc = tv_gaussian(&a, &b, TvMethod::MonteCarlo { n: 400_000, seed: 3 }).unwrap();
        let TvKind::Estimate { stderr } = mc.kind else { panic!() };
        assert!((q - mc.value).abs() < 4.0 * stderr, "{q} vs {}", mc.value);
        // equal covariance: quadrature reproduces the closed form
        let c = g(&[0.5, 1.0], &[1.5, 0.4, 0.4, 0.6]);
        let exact = tv_gaussian(&a, &c, TvMethod::ExactIfReducible).unwrap().value;
        let quad = tv_gaussian(&a, &c, TvMethod::Quadrature).unwrap().value;
        assert_relative_eq!(exact, quad, epsilon = 1e-9);
    }

    #[test]
    fn exact_refuses_unequal_covariances() {
        let a = g(&[0.0], &[1.0]);
        let b = g(&[0.0], &[2.0]);
        assert!(matches!(tv_gaussian(&a, &b, TvMethod::ExactIfReducible), Err(Error::Method(_))));
        let c = g(&[1.0], &[2.0]);
        assert!(matches!(tv_gaussian(&a, &c, TvMethod::FrobeniusBound), Err(Error::Method(_))));
    }

    #[test]
    fn singular_covariance_is_refused_then_regularized() {
        let a = g(&[0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]);
        let b = Gaussian::standard(2);
        assert!(matches!(tv_reduce(&a, &b), Err(Error::Singular(_))));
        let (r, flagged) = a.regularized();
        assert!(flagged);
        assert!(tv_reduce(&r, &b).is_ok());
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let r = Gaussian::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]));
        assert!(r.is_err());
    }

    #[test]
    fn sampling_reproduces_covariance() {
        let a = g(&[1.0, -2.0], &[2.0, 0.5, 0.5, 1.0]);
        let pts = a.samples(200_000, 11);
        let (m, c) = sample_moments(&pts).unwrap();
        assert!((m - a.mean()).norm() < 0.02);
        assert!((c - a.cov()).norm() < 0.03);
    }

    #[test]
    fn log_density_normalizes_in_one_dimension() {
        let a = g(&[0.5], &[0.3]);
        let total = simpson(&|x| a.log_density(&DVector::from_element(1, x)).unwrap().exp(), -10.0, 10.0, 1e-12);
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }
}
