//! Force fields, model parameters, and sampled verification of the standing
//! assumptions on the drift.
//!
//! A force field `F` always carries evaluators for `F` and its Jacobian `DF`.
//! Fields that come with a declared splitting `F = grad U + ell` also carry
//! `U`, `grad U` and `ell`; the coercivity checks need them.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, op_norm, require_square, skew_part, sym_part};
use crate::stability::{self, LyapunovCertificate};

pub type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Default relative tolerance for `F(0) = 0` and splitting consistency.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum ForceKind {
    Linear(DMatrix<f64>),
    Gradient,
    General,
}

#[derive(Clone)]
pub struct ForceField {
    dim: usize,
    kind: ForceKind,
    f: VecFn,
    df: MatFn,
    u: Option<ScalarFn>,
    grad_u: Option<VecFn>,
    ell: Option<VecFn>,
    /// `|U(q)| <= C|q|^2` globally; enables the quadratic variant of the coercivity check.
    quadratic_growth: bool,
    label: String,
}

impl fmt::Debug for ForceField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForceField")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("label", &self.label)
            .field("has_decomposition", &self.has_decomposition())
            .finish()
    }
}

impl ForceField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ForceKind {
        &self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn quadratic_growth(&self) -> bool {
        self.quadratic_growth
    }

    pub fn force(&self, q: &DVector<f64>) -> DVector<f64> {
        (self.f)(q)
    }

    pub fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        (self.df)(q)
    }

    pub fn potential(&self, q: &DVector<f64>) -> Option<f64> {
        self.u.as_ref().map(|u| u(q))
    }

    pub fn grad_potential(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        self.grad_u.as_ref().map(|g| g(q))
    }

    pub fn ell(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        self.ell.as_ref().map(|l| l(q))
    }

    pub fn has_decomposition(&self) -> bool {
        self.u.is_some() && self.ell.is_some()
    }

    pub fn jacobian_at_origin(&self) -> DMatrix<f64> {
        self.jacobian(&DVector::zeros(self.dim))
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ForceKind::Linear(_))
    }

    /// A black-box field with no declared splitting.
    pub fn general(dim: usize, f: VecFn, df: MatFn) -> Self {
        ForceField {
            dim,
            kind: ForceKind::General,
            f,
            df,
            u: None,
            grad_u: None,
            ell: None,
            quadratic_growth: false,
            label: "general".into(),
        }
    }

    /// Declares `F = grad U + ell` for a general field. Consistency is checked
    /// on probe points.
    pub fn with_decomposition(
        mut self,
        u: ScalarFn,
        grad_u: VecFn,
        ell: VecFn,
        quadratic_growth: bool,
    ) -> Result<Self> {
        self.u = Some(u);
        self.grad_u = Some(grad_u);
        self.ell = Some(ell);
        self.quadratic_growth = quadratic_growth;
        self.check_decomposition(2.0, 32, DEFAULT_TOL)?;
        Ok(self)
    }

    /// `F(0) = 0` up to `tol` (absolute, scaled by the Jacobian size).
    pub fn check_origin_equilibrium(&self, tol: f64) -> Result<()> {
        let zero = DVector::zeros(self.dim);
        let f0 = self.force(&zero);
        let scale = 1.0 + op_norm(&self.jacobian(&zero));
        if f0.norm() > tol * scale {
            return Err(Error::Consistency {
                point: vec![0.0; self.dim],
                detail: format!("F(0) = {:?} is not zero", f0.as_slice()),
            });
        }
        Ok(())
    }

    /// `F = grad U + ell` at quasi-random probe points in the ball of `radius`.
    pub fn check_decomposition(&self, radius: f64, n: usize, tol: f64) -> Result<()> {
        let (Some(g), Some(l)) = (&self.grad_u, &self.ell) else {
            return Err(Error::DecompositionMissing);
        };
        let mut worst = (0.0, DVector::zeros(self.dim));
        for q in ball_samples(self.dim, radius, n) {
            let f = self.force(&q);
            let err = (&f - g(&q) - l(&q)).norm() / (1.0 + f.norm());
            if err > worst.0 {
                worst = (err, q);
            }
        }
        if worst.0 > tol {
            return Err(Error::Consistency {
                point: worst.1.as_slice().to_vec(),
                detail: format!("F - grad U - ell has relative size {:.3e}", worst.0),
            });
        }
        Ok(())
    }

    /// Max over the probe set of the centered finite-difference Jacobian error.
    pub fn jacobian_fd_error(&self, points: &[DVector<f64>], h: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for q in points {
            let fd = fd_jacobian(&*self.f, q, h);
            worst = worst.max((fd - self.jacobian(q)).amax());
        }
        worst
    }
}

fn fd_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, q: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = q.len();
    let m = f(q).len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        let col = (f(&qp) - f(&qm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn fd_gradient(u: &dyn Fn(&DVector<f64>) -> f64, q: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(q.len(), |j, _| {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        (u(&qp) - u(&qm)) / (2.0 * h)
    })
}

/// `F(q) = M q`. The linear splitting `U = <M^s q, q>/2`, `ell = M^a q` is
/// always attached; it is a valid (non-negative `U`) splitting only when `M^s`
/// is positive semi-definite, which the coercivity check will reveal.
pub fn make_linear_force(m: &DMatrix<f64>) -> Result<ForceField> {
    let d = require_square(m, "force matrix")?;
    let m = m.clone();
    let ms = sym_part(&m);
    let ma = skew_part(&m);
    let symmetric = ma.amax() == 0.0;
    let f = {
        let m = m.clone();
        Arc::new(move |q: &DVector<f64>| &m * q) as VecFn
    };
    let df = {
        let m = m.clone();
        Arc::new(move |_: &DVector<f64>| m.clone()) as MatFn
    };
    let u = {
        let ms = ms.clone();
        Arc::new(move |q: &DVector<f64>| 0.5 * q.dot(&(&ms * q))) as ScalarFn
    };
    let grad_u = Arc::new(move |q: &DVector<f64>| &ms * q) as VecFn;
    let ell = Arc::new(move |q: &DVector<f64>| &ma * q) as VecFn;
    Ok(ForceField {
        dim: d,
        kind: ForceKind::Linear(m),
        f,
        df,
        u: Some(u),
        grad_u: Some(grad_u),
        ell: Some(ell),
        quadratic_growth: true,
        label: if symmetric { "linear-symmetric" } else { "linear" }.into(),
    })
}

/// `F = grad U` with `ell = 0`. The supplied gradient and Hessian are checked
/// against centered finite differences of `U` and `grad U` at probe points.
pub fn make_gradient_force(dim: usize, u: ScalarFn, grad_u: VecFn, hess_u: MatFn) -> Result<ForceField> {
    make_gradient_force_with(dim, u, grad_u, hess_u, false)
}

pub fn make_gradient_force_with(
    dim: usize,
    u: ScalarFn,
    grad_u: VecFn,
    hess_u: MatFn,
    quadratic_growth: bool,
) -> Result<ForceField> {
    if dim == 0 {
        return Err(Error::Dimension("dimension must be positive".into()));
    }
    let h = 1e-5;
    let tol = 1e-6;
    let mut probes = ball_samples(dim, 2.0, 24);
    probes.push(DVector::zeros(dim));
    let mut worst: (f64, Option<DVector<f64>>, &str) = (0.0, None, "");
    for q in &probes {
        let g = grad_u(q);
        if g.len() != dim {
            return Err(Error::Dimension(format!("grad U returned length {}, expected {dim}", g.len())));
        }
        let e_grad = (fd_gradient(&*u, q, h) - &g).amax() / (1.0 + g.amax());
        let hq = hess_u(q);
        if hq.nrows() != dim || hq.ncols() != dim {
            return Err(Error::Dimension("Hessian has wrong shape".into()));
        }
        let e_hess = (fd_jacobian(&*grad_u, q, h) - &hq).amax() / (1.0 + hq.amax());
        if e_grad > worst.0 {
            worst = (e_grad, Some(q.clone()), "grad U vs finite differences of U");
        }
        if e_hess > worst.0 {
            worst = (e_hess, Some(q.clone()), "Hessian vs finite differences of grad U");
        }
    }
    if worst.0 > tol {
        return Err(Error::Consistency {
            point: worst.1.map(|q| q.as_slice().to_vec()).unwrap_or_default(),
            detail: format!("{} off by {:.3e}", worst.2, worst.0),
        });
    }
    let zero = Arc::new(move |_: &DVector<f64>| DVector::zeros(dim)) as VecFn;
    Ok(ForceField {
        dim,
        kind: ForceKind::Gradient,
        f: grad_u.clone(),
        df: hess_u,
        u: Some(u),
        grad_u: Some(grad_u),
        ell: Some(zero),
        quadratic_growth,
        label: "gradient".into(),
    })
}

/// Separable polynomial potential `U(q) = sum_i sum_k c_k q_i^{p_k}` given as
/// `(power, coefficient)` pairs. Powers must be at least 2 so that `U(0) = 0`
/// and `grad U(0) = 0`.
pub fn polynomial_gradient_force(dim: usize, terms: &[(u32, f64)]) -> Result<ForceField> {
    if terms.iter().any(|&(p, _)| p < 2) {
        return Err(Error::Parameter("polynomial powers must be >= 2".into()));
    }
    let terms: Arc<Vec<(u32, f64)>> = Arc::new(terms.to_vec());
    let max_power = terms.iter().map(|t| t.0).max().unwrap_or(2);
    let t1 = terms.clone();
    let u = Arc::new(move |q: &DVector<f64>| {
        q.iter()
            .map(|&x| t1.iter().map(|&(p, c)| c * x.powi(p as i32)).sum::<f64>())
            .sum()
    }) as ScalarFn;
    let t2 = terms.clone();
    let g = Arc::new(move |q: &DVector<f64>| {
        q.map(|x| t2.iter().map(|&(p, c)| c * p as f64 * x.powi(p as i32 - 1)).sum())
    }) as VecFn;
    let t3 = terms;
    let h = Arc::new(move |q: &DVector<f64>| {
        DMatrix::from_diagonal(&q.map(|x| {
            t3.iter()
                .map(|&(p, c)| c * (p * (p - 1)) as f64 * x.powi(p as i32 - 2))
                .sum()
        }))
    }) as MatFn;
    Ok(make_gradient_force_with(dim, u, g, h, max_power <= 2)?.with_label("polynomial-gradient"))
}

fn rotating_quartic() -> Result<ForceField> {
    let rot = |q: &DVector<f64>| DVector::from_column_slice(&[-q[1], q[0]]);
    let grad = Arc::new(|q: &DVector<f64>| q * (1.0 + q.norm_squared())) as VecFn;
    let g2 = grad.clone();
    let f = Arc::new(move |q: &DVector<f64>| g2(q) + rot(q)) as VecFn;
    let df = Arc::new(|q: &DVector<f64>| {
        let r = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        DMatrix::identity(2, 2) * (1.0 + q.norm_squared()) + q * q.transpose() * 2.0 + r
    }) as MatFn;
    let u = Arc::new(|q: &DVector<f64>| {
        let r2 = q.norm_squared();
        r2 / 2.0 + r2 * r2 / 4.0
    }) as ScalarFn;
    let ell = Arc::new(move |q: &DVector<f64>| rot(q)) as VecFn;
    ForceField::general(2, f, df).with_decomposition(u, grad, ell, false)
}

pub const BUILTIN_FORCES: &[&str] = &[
    "harmonic",
    "quartic",
    "rotation-stable",
    "rotation-mild",
    "rotation-unstable",
    "quartic-2d",
    "skewed-quartic",
    "rotating-quartic",
];

/// Named test fields used by the CLI and the verification corpus.
pub fn builtin_force(name: &str) -> Result<ForceField> {
    let lin = |rows: usize, data: &[f64]| make_linear_force(&DMatrix::from_row_slice(rows, rows, data));
    let f = match name {
        // F(q) = q
        "harmonic" => lin(1, &[1.0])?,
        // F(q) = q^3 + q, U = q^4/4 + q^2/2
        "quartic" => polynomial_gradient_force(1, &[(2, 0.5), (4, 0.25)])?,
        "rotation-stable" => lin(2, &[1.0, -2.0, 2.0, 1.0])?,
        "rotation-mild" => lin(2, &[1.0, -1.0, 1.0, 1.0])?,
        "rotation-unstable" => lin(2, &[1.0, -5.0, 5.0, 1.0])?,
        "quartic-2d" => polynomial_gradient_force(2, &[(2, 0.5), (4, 0.25)])?,
        // F(q) = q + q^2 + q^3, U = q^2/2 + q^3/3 + q^4/4; asymmetric stationary law
        "skewed-quartic" => polynomial_gradient_force(1, &[(2, 0.5), (3, 1.0 / 3.0), (4, 0.25)])?,
        // F(q) = (1 + |q|^2) q + R q with R the quarter turn; not a gradient
        "rotating-quartic" => rotating_quartic()?,
        _ => return Err(Error::Config(format!("unknown builtin force field '{name}'"))),
    };
    Ok(f.with_label(name))
}

/// Full set of model parameters.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub force: ForceField,
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub certificate: Option<LyapunovCertificate>,
    pub delta_nbhd: Option<f64>,
    pub theta_exp: f64,
    pub(crate) cache: Arc<MatrixCache>,
}

/// Memo table for the solves that only depend on `(DF(0), gamma)`.
#[derive(Debug, Default)]
pub(crate) struct MatrixCache {
    pub sigma: OnceLock<DMatrix<f64>>,
    pub gamma_metric: OnceLock<(DMatrix<f64>, f64)>,
}

impl ModelSpec {
    pub fn new(force: ForceField, gamma: f64, epsilon: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("friction gamma must be positive, got {gamma}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Parameter(format!("noise level must be non-negative, got {epsilon}")));
        }
        force.check_origin_equilibrium(DEFAULT_TOL)?;
        Ok(ModelSpec {
            force,
            gamma,
            epsilon,
            alpha: None,
            beta: None,
            certificate: None,
            delta_nbhd: None,
            theta_exp: 0.25,
            cache: Arc::default(),
        })
    }

    /// Attaches coercivity constants and derives the Lyapunov certificate
    /// (rate, norm-equivalence constant, stability constant).
    pub fn with_assumption(mut self, alpha: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < self.gamma) {
            return Err(Error::Parameter(format!(
                "beta must lie in (0, gamma) = (0, {}), got {beta}",
                self.gamma
            )));
        }
        let lambda = stability::select_lambda(alpha, beta, self.gamma)?;
        self.alpha = Some(alpha);
        self.beta = Some(beta);
        self.certificate = Some(LyapunovCertificate::new(lambda, self.gamma));
        Ok(self)
    }

    /// Uses the best constants found by [`assumption_constants`].
    pub fn with_derived_assumption(self) -> Result<Self> {
        let (alpha, beta) = assumption_constants(&self.force, self.gamma)?;
        self.with_assumption(alpha, beta)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut s = self.clone();
        s.epsilon = epsilon;
        s
    }

    pub fn with_theta_exp(mut self, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0 / 3.0) {
            return Err(Error::Parameter(format!("time-horizon exponent must lie in (0, 1/3), got {theta}")));
        }
        self.theta_exp = theta;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.force.dim()
    }

    pub fn certificate(&self) -> Result<&LyapunovCertificate> {
        self.certificate
            .as_ref()
            .ok_or_else(|| Error::Dependency("coercivity constants (alpha, beta) not set".into()))
    }

    pub fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        (x.rows(0, d).into_owned(), x.rows(d, d).into_owned())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub holds_on_samples: bool,
    pub worst_margin: f64,
    pub worst_point: Vec<f64>,
    /// Same check with the quadratic-growth form `<F,q> >= alpha|q|^2 + |ell|^2/beta^2`,
    /// only evaluated when `U` is flagged quadratically bounded.
    pub quadratic_variant: Option<(bool, f64)>,
    pub n_samples: usize,
}

fn coercivity_margin(force: &ForceField, q: &DVector<f64>, alpha: f64, beta: f64, with_u: bool) -> Result<(f64, f64)> {
    let u = force.potential(q).ok_or(Error::DecompositionMissing)?;
    let l = force.ell(q).ok_or(Error::DecompositionMissing)?;
    let fq = force.force(q).dot(q);
    let growth = if with_u { q.norm_squared() + u } else { q.norm_squared() };
    let margin = fq - alpha * growth - l.norm_squared() / (beta * beta);
    Ok((margin, fq.abs().max(1.0)))
}

/// Sampled check of `<F(q),q> >= alpha(|q|^2 + U(q)) + |ell(q)|^2 / beta^2` on
/// the ball of `radius`. The origin is always part of the sample.
pub fn check_assumption_main(spec: &ModelSpec, radius: f64, n_samples: usize) -> Result<AssumptionReport> {
    let (alpha, beta) = match (spec.alpha, spec.beta) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Dependency("alpha and beta must be set on the model".into())),
    };
    check_coercivity(&spec.force, alpha, beta, radius, n_samples, DEFAULT_TOL)
}

pub fn check_coercivity(
    force: &ForceField,
    alpha: f64,
    beta: f64,
    radius: f64,
    n_samples: usize,
    tol: f64,
) -> Result<AssumptionReport> {
    if !force.has_decomposition() {
        return Err(Error::DecompositionMissing);
    }
    let d = force.dim();
    let mut pts = vec![DVector::zeros(d)];
    pts.extend(ball_samples(d, radius, n_samples.saturating_sub(1)));
    let mut worst = (f64::INFINITY, DVector::zeros(d));
    let mut ok = true;
    let mut quad = force.quadratic_growth().then_some((true, f64::INFINITY));
    for q in &pts {
        let (m, scale) = coercivity_margin(force, q, alpha, beta, true)?;
        if m < worst.0 {
            worst = (m, q.clone());
        }
        ok &= m >= -tol * scale;
        if let Some((qok, qworst)) = quad.as_mut() {
            let (m2, s2) = coercivity_margin(force, q, alpha, beta, false)?;
            *qworst = qworst.min(m2);
            *qok &= m2 >= -tol * s2;
        }
    }
    Ok(AssumptionReport {
        holds_on_samples: ok,
        worst_margin: worst.0,
        worst_point: worst.1.as_slice().to_vec(),
        quadratic_variant: quad,
        n_samples: pts.len(),
    })
}

/// Admissible `(alpha, beta)` for a field with a declared splitting.
///
/// Linear fields: for each trial `beta` the best `alpha` is the smallest
/// generalized eigenvalue of the pencil `(M^s + (M^a)^2/beta^2, I + M^s/2)`;
/// the pair giving the largest Lyapunov rate wins. Gradient fields (`ell = 0`) use
/// `beta = gamma/2` and the sampled infimum of `<F,q> / (|q|^2 + U)` on a ball
/// of radius 4, shrunk by 1%.
pub fn assumption_constants(force: &ForceField, gamma: f64) -> Result<(f64, f64)> {
    match force.kind() {
        ForceKind::Linear(m) => linear_assumption_constants(m, gamma)
            .ok_or_else(|| Error::Degenerate("no admissible (alpha, beta) for this linear force".into())),
        _ => {
            if !force.has_decomposition() {
                return Err(Error::DecompositionMissing);
            }
            let d = force.dim();
            let mut alpha = f64::INFINITY;
            let mut ell_max: f64 = 0.0;
            for q in ball_samples(d, 4.0, 512) {
                let n2 = q.norm_squared();
                if n2 < 1e-12 {
                    continue;
                }
                let u = force.potential(&q).unwrap_or(0.0);
                let l = force.ell(&q).map(|v| v.norm()).unwrap_or(0.0);
                ell_max = ell_max.max(l);
                alpha = alpha.min(force.force(&q).dot(&q) / (n2 + u));
            }
            if ell_max > 0.0 {
                return Err(Error::Config(
                    "non-gradient nonlinear fields need explicit alpha and beta".into(),
                ));
            }
            if !(alpha > 0.0) {
                return Err(Error::Degenerate(format!("coercivity fails on samples (alpha estimate {alpha})")));
            }
            Ok((0.99 * alpha, 0.5 * gamma))
        }
    }
}

pub fn linear_assumption_constants(m: &DMatrix<f64>, gamma: f64) -> Option<(f64, f64)> {
    let d = m.nrows();
    let ms = sym_part(m);
    let ma = skew_part(m);
    let b = DMatrix::identity(d, d) + &ms * 0.5;
    let chol = b.clone().cholesky()?;
    let l_inv = chol.l().try_inverse()?;
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 1..200 {
        let beta = gamma * i as f64 / 200.0;
        let a = &ms + &ma * &ma / (beta * beta);
        let pencil = &l_inv * a * l_inv.transpose();
        let alpha = 0.999 * linalg::min_sym_eig(&pencil);
        if !(alpha > 0.0) {
            continue;
        }
        let Ok(lambda) = stability::select_lambda(alpha, beta, gamma) else {
            continue;
        };
        if best.is_none_or(|(bl, _, _)| lambda > bl) {
            best = Some((lambda, alpha, beta));
        }
    }
    best.map(|(_, a, b)| (a, b))
}

#[derive(Clone, Debug, Serialize)]
pub struct JacobianGrowthReport {
    pub c_hat: f64,
    pub rho_hat: f64,
    pub n_samples: usize,
}

/// Fits `||DF(q)|| <= C exp(rho |q|^2)` on quasi-random samples. `rho` is the
/// least-squares slope of `log ||DF||` against `|q|^2` (clamped at 0), and `C`
/// is the smallest constant making the bound hold on every sample for that `rho`.
pub fn check_assumption_df(spec: &ModelSpec, radius: f64, n_samples: usize) -> JacobianGrowthReport {
    let force = &spec.force;
    let d = force.dim();
    let mut pts = vec![DVector::zeros(d)];
    if radius > 0.0 {
        pts.extend(ball_samples(d, radius, n_samples.saturating_sub(1)));
    }
    let data: Vec<(f64, f64)> = pts
        .iter()
        .map(|q| (q.norm_squared(), op_norm(&force.jacobian(q)).max(1e-300).ln()))
        .collect();
    let n = data.len() as f64;
    let mx = data.iter().map(|p| p.0).sum::<f64>() / n;
    let my = data.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = data.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = data.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let mut rho = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    if rho.abs() < 1e-12 || rho < 0.0 {
        rho = 0.0;
    }
    let log_c = data.iter().map(|p| p.1 - rho * p.0).fold(f64::NEG_INFINITY, f64::max);
    JacobianGrowthReport {
        c_hat: log_c.exp(),
        rho_hat: rho,
        n_samples: data.len(),
    }
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

/// Deterministic Halton points in `[0,1]^dim`, starting at index `offset + 1`.
pub fn halton(dim: usize, n: usize, offset: u64) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports at most {} dimensions", PRIMES.len());
    (0..n as u64)
        .map(|i| (0..dim).map(|k| radical_inverse(offset + i + 1, PRIMES[k])).collect())
        .collect()
}

/// `n` quasi-random points in the closed ball of `radius` (Halton points in the
/// enclosing cube, rejected outside the ball).
pub fn ball_samples(dim: usize, radius: f64, n: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut offset = 0u64;
    while out.len() < n {
        for p in halton(dim, 4 * n.max(8), offset) {
            let q = DVector::from_iterator(dim, p.iter().map(|u| radius * (2.0 * u - 1.0)));
            if q.norm() <= radius {
                out.push(q);
                if out.len() == n {
                    break;
                }
            }
        }
        offset += 4 * n.max(8) as u64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    #[test]
    fn scalar_linear_force_splits_trivially() {
        let f = make_linear_force(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        let q = DVector::from_element(1, 3.0);
        assert_eq!(f.force(&q)[0], 3.0);
        assert_eq!(f.potential(&q).unwrap(), 4.5);
        assert_eq!(f.ell(&q).unwrap()[0], 0.0);
        assert_eq!(f.jacobian(&q)[(0, 0)], 1.0);
    }

    #[test]
    fn rotation_force_splits_into_identity_and_rotation() {
        let f = make_linear_force(&m2(1.0, -2.0, 2.0, 1.0)).unwrap();
        let q = DVector::from_column_slice(&[0.3, -1.2]);
        assert_relative_eq!(f.potential(&q).unwrap(), 0.5 * q.norm_squared(), epsilon = 1e-15);
        let l = f.ell(&q).unwrap();
        assert_relative_eq!(l[0], -2.0 * q[1], epsilon = 1e-15);
        assert_relative_eq!(l[1], 2.0 * q[0], epsilon = 1e-15);
        f.check_decomposition(3.0, 50, 1e-12).unwrap();
    }

    #[test]
    fn non_square_matrix_is_a_dimension_error() {
        let m = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(matches!(make_linear_force(&m), Err(Error::Dimension(_))));
    }

    #[test]
    fn quadratic_potential_gives_identity_jacobian() {
        let f = polynomial_gradient_force(3, &[(2, 0.5)]).unwrap();
        let q = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        assert_relative_eq!(f.force(&q), q.clone(), epsilon = 1e-15);
        assert_eq!(f.jacobian(&q), DMatrix::identity(3, 3));
        assert!(f.quadratic_growth());
    }

    #[test]
    fn quartic_force_matches_symbolic_derivative() {
        let f = builtin_force("quartic").unwrap();
        for x in [-1.5, 0.0, 0.7, 2.0] {
            let q = DVector::from_element(1, x);
            assert_relative_eq!(f.force(&q)[0], x * x * x + x, epsilon = 1e-13);
            assert_relative_eq!(f.jacobian(&q)[(0, 0)], 3.0 * x * x + 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn inconsistent_gradient_is_rejected() {
        let u = Arc::new(|q: &DVector<f64>| 0.5 * q.norm_squared()) as ScalarFn;
        let g = Arc::new(|q: &DVector<f64>| q * 2.0) as VecFn;
        let h = Arc::new(|q: &DVector<f64>| DMatrix::identity(q.len(), q.len()) * 2.0) as MatFn;
        match make_gradient_force(2, u, g, h) {
            Err(Error::Consistency { point, .. }) => assert_eq!(point.len(), 2),
            other => panic!("expected consistency error, got {other:?}"),
        }
    }

    #[test]
    fn harmonic_field_meets_coercivity_with_zero_margin() {
        let spec = ModelSpec::new(builtin_force("harmonic").unwrap(), 1.0, 0.0)
            .unwrap()
            .with_assumption(2.0 / 3.0, 0.5)
            .unwrap();
        let rep = check_assumption_main(&spec, 3.0, 200).unwrap();
        assert!(rep.holds_on_samples);
        assert!(rep.worst_margin.abs() < 1e-12);
    }

    #[test]
    fn strong_rotation_fails_coercivity_for_every_admissible_pair() {
        let f = builtin_force("rotation-unstable").unwrap();
        for &alpha in &[1e-3, 0.1, 0.5] {
            for &beta in &[0.1, 0.5, 0.99] {
                let rep = check_coercivity(&f, alpha, beta, 2.0, 100, DEFAULT_TOL).unwrap();
                assert!(!rep.holds_on_samples);
                // brute-force minimum over the same samples: (1 - 1.5 alpha - 25/beta^2)|q|^2
                let pts = ball_samples(2, 2.0, 99);
                let brute = pts
                    .iter()
                    .map(|q| (1.0 - 1.5 * alpha - 25.0 / (beta * beta)) * q.norm_squared())
                    .fold(0.0, f64::min);
                assert_relative_eq!(rep.worst_margin, brute, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn missing_decomposition_is_reported() {
        let f = ForceField::general(
            1,
            Arc::new(|q: &DVector<f64>| q.clone()),
            Arc::new(|_: &DVector<f64>| DMatrix::identity(1, 1)),
        );
        assert!(matches!(
            check_coercivity(&f, 0.5, 0.5, 1.0, 10, DEFAULT_TOL),
            Err(Error::DecompositionMissing)
        ));
    }

    #[test]
    fn linear_jacobian_growth_is_flat() {
        let m = m2(2.0, 1.0, 0.0, 1.0);
        let spec = ModelSpec::new(make_linear_force(&m).unwrap(), 1.0, 0.0).unwrap();
        let rep = check_assumption_df(&spec, 3.0, 100);
        assert_eq!(rep.rho_hat, 0.0);
        assert_relative_eq!(rep.c_hat, op_norm(&m), max_relative = 1e-12);
        let at_zero = check_assumption_df(&spec, 0.0, 100);
        assert_eq!(at_zero.rho_hat, 0.0);
        assert_relative_eq!(at_zero.c_hat, op_norm(&m), max_relative = 1e-12);
    }

    #[test]
    fn quartic_jacobian_growth_fit_matches_direct_regression() {
        let spec = ModelSpec::new(builtin_force("quartic").unwrap(), 2.0, 0.0).unwrap();
        let rep = check_assumption_df(&spec, 2.0, 200);
        // independent regression on the same sample set
        let mut pts = vec![0.0];
        pts.extend(ball_samples(1, 2.0, 199).iter().map(|q| q[0]));
        let xs: Vec<f64> = pts.iter().map(|q| q * q).collect();
        let ys: Vec<f64> = pts.iter().map(|q| (3.0 * q * q + 1.0f64).ln()).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert_relative_eq!(rep.rho_hat, slope, max_relative = 1e-10);
        assert!(rep.rho_hat > 0.3 && rep.rho_hat < 1.0);
        for (x, y) in xs.iter().zip(&ys) {
            assert!(*y <= rep.c_hat.ln() + rep.rho_hat * x + 1e-12);
        }
    }

    #[test]
    fn finite_difference_jacobian_error_is_second_order() {
        let f = builtin_force("quartic-2d").unwrap();
        let pts = ball_samples(2, 1.5, 20);
        let e1 = f.jacobian_fd_error(&pts, 1e-2);
        let e2 = f.jacobian_fd_error(&pts, 5e-3);
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn normal_linear_constants_satisfy_coercivity() {
        for m in [m2(1.0, -2.0, 2.0, 1.0), m2(1.0, -1.0, 1.0, 1.0), m2(2.0, 0.0, 0.0, 0.5)] {
            let (alpha, beta) = linear_assumption_constants(&m, 3.0).unwrap();
            assert!(alpha > 0.0 && beta > 0.0 && beta < 3.0);
            let f = make_linear_force(&m).unwrap();
            assert!(check_coercivity(&f, alpha, beta, 5.0, 400, DEFAULT_TOL).unwrap().holds_on_samples);
        }
    }

    #[test]
    fn halton_points_are_in_the_ball() {
        for q in ball_samples(3, 1.5, 100) {
            assert!(q.norm() <= 1.5);
        }
    }

    #[test]
    fn every_builtin_has_a_consistent_jacobian() {
        for name in BUILTIN_FORCES {
            let f = builtin_force(name).unwrap();
            assert_eq!(f.label(), *name);
            let pts = ball_samples(f.dim(), 1.5, 16);
            assert!(f.jacobian_fd_error(&pts, 1e-5) < 1e-7, "{name}");
        }
        let rq = builtin_force("rotating-quartic").unwrap();
        assert!(rq.has_decomposition() && !rq.is_linear());
        assert!(builtin_force("nope").is_err());
    }
}
