//! Linear stability of the zero-noise flow and the Lyapunov certificate
//! `H(x) = |p|^2/2 + (g/2)<q,p> + (g^2/4)|q|^2 + U(q)` with `g = gamma - lambda`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, block2, complex_eigenvalues, is_normal, min_sym_eig, op_norm, require_square, skew_part, sym_part, C64};
use crate::model::ModelSpec;
use crate::ode;

/// Eigenvalues with `|Re| < INDETERMINATE_BAND * ||T_M||` give no verdict.
pub const INDETERMINATE_BAND: f64 = 1e-10;

/// `T_M = [[0, -I], [M, gamma I]]`.
pub fn t_matrix(m: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let d = require_square(m, "M")?;
    let eye = DMatrix::identity(d, d);
    Ok(block2(&DMatrix::zeros(d, d), &(-&eye), m, &(eye * gamma)))
}

/// `K_M = gamma^2 M^s + (M^a)^2 + (M^a M^s - M^s M^a)/2`, symmetrized.
pub fn k_matrix(m: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    require_square(m, "M")?;
    let ms = sym_part(m);
    let ma = skew_part(m);
    let k = &ms * (gamma * gamma) + &ma * &ma + (&ma * &ms - &ms * &ma) * 0.5;
    Ok(sym_part(&k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Unstable,
    Indeterminate,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriterionRecord {
    pub criterion_name: String,
    /// `None` when the criterion does not apply (e.g. normality test on a non-normal M).
    pub satisfied: Option<bool>,
    pub witness: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    pub stable: bool,
    pub criterion_trace: Vec<CriterionRecord>,
    #[serde(serialize_with = "ser_complex")]
    pub spectrum_tm: Vec<C64>,
    #[serde(serialize_with = "ser_complex")]
    pub spectrum_m: Vec<C64>,
    /// Set when the parabola test and the direct eigencheck disagree outside
    /// the indeterminate band. Should never happen.
    pub internal_inconsistency: bool,
}

fn ser_complex<S: serde::Serializer>(v: &[C64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for z in v {
        seq.serialize_element(&[z.re, z.im])?;
    }
    seq.end()
}

fn fmt_c(z: &C64) -> String {
    format!("{:.6}{:+.6}i", z.re, z.im)
}

/// Runs every linear-stability test on `(M, gamma)`. The verdict is the one
/// given by the direct eigenvalues of `T_M`.
pub fn classify_linear(m: &DMatrix<f64>, gamma: f64) -> Result<StabilityVerdict> {
    require_square(m, "M")?;
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let tm = t_matrix(m, gamma)?;
    let band = INDETERMINATE_BAND * op_norm(&tm).max(1.0);
    let spec_tm = complex_eigenvalues(&tm);
    let spec_m = complex_eigenvalues(m);
    let mut trace = Vec::new();

    // (ii) direct check on T_M
    let min_re = spec_tm.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let verdict = if min_re.abs() < band {
        Verdict::Indeterminate
    } else if min_re > 0.0 {
        Verdict::Stable
    } else {
        Verdict::Unstable
    };
    let worst = spec_tm
        .iter()
        .min_by(|a, b| a.re.total_cmp(&b.re))
        .copied()
        .unwrap_or_default();

    // (i) parabola region for Sp(M). The margin is mapped onto the real part
    // of the corresponding root of z^2 - gamma z + mu so that the same band applies.
    let mut parabola_ok = true;
    let mut parabola_band = false;
    let mut parabola_witness = String::new();
    for mu in &spec_m {
        let disc = (C64::new(gamma * gamma, 0.0) - mu * 4.0).sqrt();
        let roots = [(C64::new(gamma, 0.0) - disc) * 0.5, (C64::new(gamma, 0.0) + disc) * 0.5];
        let re = roots.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let inside = mu.re > 0.0 && gamma * gamma * mu.re > mu.im * mu.im;
        if re.abs() < band {
            parabola_band = true;
        }
        if !inside {
            parabola_ok = false;
            parabola_witness = format!(
                "mu = {} violates a > 0 and gamma^2 a > b^2 (gamma^2 a - b^2 = {:.3e})",
                fmt_c(mu),
                gamma * gamma * mu.re - mu.im * mu.im
            );
        }
    }
    if parabola_ok {
        parabola_witness = format!("all {} eigenvalues of M inside the parabola", spec_m.len());
    }
    trace.push(CriterionRecord {
        criterion_name: "parabola_region".into(),
        satisfied: Some(parabola_ok),
        witness: parabola_witness,
    });
    trace.push(CriterionRecord {
        criterion_name: "tm_eigencheck".into(),
        satisfied: match verdict {
            Verdict::Indeterminate => None,
            v => Some(v == Verdict::Stable),
        },
        witness: format!("eigenvalue of T_M with smallest real part: {}", fmt_c(&worst)),
    });

    // (iii) sufficient condition
    let ms = sym_part(m);
    let ma = skew_part(m);
    let suff = &ms * (gamma * gamma) + &ma * &ma;
    let suff_min = min_sym_eig(&suff);
    let suff_ok = suff_min > 0.0;
    trace.push(CriterionRecord {
        criterion_name: "sufficient_pd".into(),
        satisfied: Some(suff_ok),
        witness: format!("min eigenvalue of gamma^2 M^s + (M^a)^2 = {suff_min:.6e}"),
    });

    // (iv) normal case: the sufficient condition is also necessary
    let normal = is_normal(m, 1e-12);
    trace.push(CriterionRecord {
        criterion_name: "normal_equivalence".into(),
        satisfied: normal.then_some(suff_ok == (verdict == Verdict::Stable)),
        witness: if normal {
            format!("M normal; positive definiteness gives {suff_ok}")
        } else {
            "M not normal; equivalence not applicable".into()
        },
    });

    let inconsistency = verdict != Verdict::Indeterminate && !parabola_band && parabola_ok != (verdict == Verdict::Stable);
    if inconsistency {
        log::error!("parabola criterion and T_M eigencheck disagree for gamma = {gamma}");
    }
    Ok(StabilityVerdict {
        verdict,
        stable: verdict == Verdict::Stable,
        criterion_trace: trace,
        spectrum_tm: spec_tm,
        spectrum_m: spec_m,
        internal_inconsistency: inconsistency,
    })
}

/// Largest feasible rate for
/// `lambda (gamma - lambda)/2 <= alpha`, `2 lambda/(gamma - lambda) <= alpha`,
/// `beta^2 <= gamma (gamma - lambda)`, shrunk by 1%.
pub fn select_lambda(alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(gamma > 0.0) || !(beta > 0.0 && beta < gamma) {
        return Err(Error::Parameter(format!(
            "need alpha > 0 and 0 < beta < gamma (alpha = {alpha}, beta = {beta}, gamma = {gamma})"
        )));
    }
    let disc = gamma * gamma - 8.0 * alpha;
    let first = if disc > 0.0 {
        (gamma - disc.sqrt()) / 2.0
    } else {
        f64::INFINITY
    };
    let second = alpha * gamma / (2.0 + alpha);
    let third = gamma - beta * beta / gamma;
    let lam = first.min(second).min(third);
    if !(lam > 0.0 && lam < gamma) {
        return Err(Error::Parameter(format!("no feasible lambda (bound {lam})")));
    }
    Ok(0.99 * lam)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovCertificate {
    pub lambda: f64,
    pub gamma_minus_lambda: f64,
    pub kappa0: f64,
    pub kappa: f64,
}

impl LyapunovCertificate {
    pub fn new(lambda: f64, gamma: f64) -> Self {
        let g = gamma - lambda;
        let kappa0 = [6.0, 16.0 / (g * g), 1.5, 2.0 * gamma * gamma]
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        LyapunovCertificate {
            lambda,
            gamma_minus_lambda: g,
            kappa0,
            kappa: kappa0 * kappa0,
        }
    }

    /// `H - U` for a phase-space point, no potential needed.
    pub fn quadratic_part(&self, q: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let g = self.gamma_minus_lambda;
        0.5 * p.norm_squared() + 0.5 * g * q.dot(p) + 0.25 * g * g * q.norm_squared()
    }
}

pub fn lyapunov_h(spec: &ModelSpec, x: &DVector<f64>) -> Result<f64> {
    let cert = spec.certificate()?;
    check_state(spec, x)?;
    let (q, p) = spec.split(x);
    let u = spec.force.potential(&q).ok_or(Error::DecompositionMissing)?;
    Ok(cert.quadratic_part(&q, &p) + u)
}

fn check_state(spec: &ModelSpec, x: &DVector<f64>) -> Result<()> {
    if x.len() != 2 * spec.dim() {
        return Err(Error::Dimension(format!(
            "state must have length 2d = {}, got {}",
            2 * spec.dim(),
            x.len()
        )));
    }
    Ok(())
}

/// Right-hand side of the zero-noise flow `q' = p`, `p' = -F(q) - gamma p`.
pub fn flow_rhs(spec: &ModelSpec, x: &DVector<f64>) -> DVector<f64> {
    let d = spec.dim();
    let (q, p) = spec.split(x);
    let f = spec.force.force(&q);
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&p);
    out.rows_mut(d, d).copy_from(&(-f - p * spec.gamma));
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl FlowPath {
    pub fn state(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[i])
    }

    pub fn last(&self) -> DVector<f64> {
        self.state(self.states.len() - 1)
    }
}

/// Classical RK4 with fixed step `dt` (the last step is shortened to land on
/// `t_end`). The output grid is the step grid.
pub fn flow_zero_noise(spec: &ModelSpec, x0: &DVector<f64>, t_end: f64, dt: f64) -> Result<FlowPath> {
    check_state(spec, x0)?;
    let grid = ode::uniform_grid(t_end, dt)?;
    flow_at_times(spec, x0, &grid, dt)
}

/// Flow states at arbitrary non-decreasing output times, steps at most `max_dt`.
pub fn flow_at_times(spec: &ModelSpec, x0: &DVector<f64>, times: &[f64], max_dt: f64) -> Result<FlowPath> {
    check_state(spec, x0)?;
    let states = ode::integrate_to_times(|_, y| flow_rhs(spec, y), x0, times, max_dt)?;
    Ok(FlowPath {
        times: times.to_vec(),
        states: states.into_iter().map(|s| s.as_slice().to_vec()).collect(),
    })
}

/// Difference between an RK4 solution with step `dt` and one with `dt/2` at `t_end`.
pub fn flow_halving_error(spec: &ModelSpec, x0: &DVector<f64>, t_end: f64, dt: f64) -> Result<f64> {
    let a = flow_at_times(spec, x0, &[t_end], dt)?.last();
    let b = flow_at_times(spec, x0, &[t_end], dt / 2.0)?.last();
    Ok((a - b).norm())
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub monotone: bool,
    /// `max_t (e^{lambda t} H(X_t) - H(x0)) / H(x0)`, clamped below at 0.
    pub max_violation: f64,
    /// Largest one-step increase of `e^{lambda t} H(X_t)`, relative to `H(x0)`.
    pub max_step_increase: f64,
    pub norm_bound_holds: bool,
    /// `max_t |X_t|^2 / (kappa (|x0|^2 + U(q0)) e^{-lambda t})`.
    pub norm_bound_ratio: f64,
    pub final_state: Vec<f64>,
}

/// Integrates the flow and checks that `t -> e^{lambda t} H(X_t)` is
/// non-increasing (relative tolerance `1e-7`) and that
/// `|X_t|^2 <= kappa (|x0|^2 + U(q0)) e^{-lambda t}`.
pub fn verify_exponential_stability(spec: &ModelSpec, x0: &DVector<f64>, t_end: f64) -> Result<DecayReport> {
    verify_exponential_stability_with(spec, x0, t_end, 1e-3, 1e-7)
}

pub fn verify_exponential_stability_with(
    spec: &ModelSpec,
    x0: &DVector<f64>,
    t_end: f64,
    dt: f64,
    rel_tol: f64,
) -> Result<DecayReport> {
    let cert = spec.certificate()?.clone();
    let h0 = lyapunov_h(spec, x0)?;
    let (q0, _) = spec.split(x0);
    let u0 = spec.force.potential(&q0).ok_or(Error::DecompositionMissing)?;
    let envelope = cert.kappa * (x0.norm_squared() + u0);
    let path = match flow_zero_noise(spec, x0, t_end, dt) {
        Ok(p) => p,
        Err(Error::Divergence { state, .. }) => {
            return Ok(DecayReport {
                monotone: false,
                max_violation: f64::INFINITY,
                max_step_increase: f64::INFINITY,
                norm_bound_holds: false,
                norm_bound_ratio: f64::INFINITY,
                final_state: state,
            })
        }
        Err(e) => return Err(e),
    };
    let scale = if h0 > 0.0 { h0 } else { 1.0 };
    let mut prev = h0;
    let mut max_violation: f64 = 0.0;
    let mut max_step: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    for (i, &t) in path.times.iter().enumerate() {
        let x = path.state(i);
        let weighted = (cert.lambda * t).exp() * lyapunov_h(spec, &x)?;
        max_violation = max_violation.max((weighted - h0) / scale);
        max_step = max_step.max((weighted - prev) / scale);
        prev = weighted;
        if envelope > 0.0 {
            ratio = ratio.max(x.norm_squared() / (envelope * (-cert.lambda * t).exp()));
        } else if x.norm_squared() > 0.0 {
            ratio = f64::INFINITY;
        }
    }
    Ok(DecayReport {
        monotone: max_step <= rel_tol && max_violation <= rel_tol,
        max_violation,
        max_step_increase: max_step,
        norm_bound_holds: ratio <= 1.0 + rel_tol,
        norm_bound_ratio: ratio,
        final_state: path.states.last().cloned().unwrap_or_default(),
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GronwallRoots {
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub threshold: f64,
}

/// Roots of `c u^2 - b u + a` and the admissible starting threshold
/// `(M alpha + beta)/(M + 1)`.
pub fn gronwall_roots(a: f64, b: f64, c: f64, m: f64) -> Result<GronwallRoots> {
    if !(a >= 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Precondition(format!("need a >= 0, b > 0, c > 0 (a = {a}, b = {b}, c = {c})")));
    }
    if !(m > 1.0) {
        return Err(Error::Precondition(format!("need M > 1, got {m}")));
    }
    let delta = b * b - 4.0 * a * c;
    if !(delta > 0.0) {
        return Err(Error::Precondition(format!("b^2 - 4ac = {delta} must be positive")));
    }
    let s = delta.sqrt();
    let alpha = (b - s) / (2.0 * c);
    let beta = (b + s) / (2.0 * c);
    Ok(GronwallRoots {
        delta,
        alpha,
        beta,
        threshold: (m * alpha + beta) / (m + 1.0),
    })
}

/// `alpha + (sqrt(delta)/(M c)) e^{-sqrt(delta) t}`: bound on any `u` with
/// `u' <= a - b u + c u^2` started below the threshold.
pub fn quadratic_gronwall_bound(a: f64, b: f64, c: f64, m: f64, u0: f64, t: f64) -> Result<f64> {
    let r = gronwall_roots(a, b, c, m)?;
    if u0 > r.threshold {
        return Err(Error::Precondition(format!(
            "u0 = {u0} exceeds (M alpha + beta)/(M + 1) = {}",
            r.threshold
        )));
    }
    let s = r.delta.sqrt();
    Ok(r.alpha + s / (m * c) * (-s * t).exp())
}

/// `T(x) = max{ log(kappa (|x|^2 + U(q)) / delta^2) / lambda, 0 }`.
pub fn relaxation_time_t(spec: &ModelSpec, x: &DVector<f64>) -> Result<f64> {
    let cert = spec.certificate()?;
    let delta = spec
        .delta_nbhd
        .ok_or_else(|| Error::Dependency("delta not computed; call matrix_eq::drift_metric_delta first".into()))?;
    check_state(spec, x)?;
    let (q, _) = spec.split(x);
    let u = spec.force.potential(&q).ok_or(Error::DecompositionMissing)?;
    Ok(relaxation_time_from(cert.kappa, cert.lambda, delta, x.norm_squared() + u))
}

pub fn relaxation_time_from(kappa: f64, lambda: f64, delta: f64, size: f64) -> f64 {
    let arg = kappa * size / (delta * delta);
    if arg <= 1.0 {
        0.0
    } else {
        arg.ln() / lambda
    }
}

pub fn spectral_min_re(m: &DMatrix<f64>) -> f64 {
    -linalg::spectral_abscissa(&(-m))
}
