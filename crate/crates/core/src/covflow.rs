//! Covariance of the Gaussian fluctuation along the zero-noise path:
//! `dSigma_t/dt = J + A_t Sigma_t + Sigma_t A_t^T`, `Sigma_0 = 0`, with
//! `A_t = A(q_t)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{block2, j_matrix, sym_eigenvalues, sym_fn, sym_part};
use crate::lyapunov::sigma_matrix;
use crate::model::ModelSpec;
use crate::ode;
use crate::stability::flow_rhs;

/// `A(q) = [[0, I], [-DF(q), -gamma I]]`.
pub fn drift_matrix(spec: &ModelSpec, q: &DVector<f64>) -> DMatrix<f64> {
    let d = spec.dim();
    let eye = DMatrix::identity(d, d);
    block2(&DMatrix::zeros(d, d), &eye, &(-spec.force.jacobian(q)), &(-eye.clone() * spec.gamma))
}

#[derive(Clone, Debug, Serialize)]
pub struct CovariancePath {
    pub grid: Vec<f64>,
    pub covs: Vec<DMatrix<f64>>,
    /// Zero-noise states `X_t` on the same grid.
    pub states: Vec<DVector<f64>>,
    pub base_point: Vec<f64>,
    /// Number of output points where a negative eigenvalue had to be clamped.
    pub clamp_events: usize,
}

fn pack(x: &DVector<f64>, s: &DMatrix<f64>) -> DVector<f64> {
    let n = x.len();
    let mut y = DVector::zeros(n + n * n);
    y.rows_mut(0, n).copy_from(x);
    y.rows_mut(n, n * n).copy_from_slice(s.as_slice());
    y
}

fn unpack(y: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x = y.rows(0, n).into_owned();
    let s = DMatrix::from_column_slice(n, n, y.rows(n, n * n).as_slice());
    (x, s)
}

/// Clamps negative eigenvalues to zero; returns whether anything was clamped
/// beyond roundoff.
fn psd_clamp(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let s = sym_part(s);
    let ev = sym_eigenvalues(&s);
    let min = ev.min();
    let floor = -1e-14 * ev.amax().max(1e-300);
    if min >= 0.0 {
        (s, false)
    } else {
        (sym_fn(&s, |v| v.max(0.0)), min < floor)
    }
}

/// Co-integrates the flow and the covariance ODE on the uniform grid of step `dt`.
pub fn integrate_covariance(spec: &ModelSpec, x0: &DVector<f64>, t_end: f64, dt: f64) -> Result<CovariancePath> {
    let grid = ode::uniform_grid(t_end, dt)?;
    covariance_at_times(spec, x0, &grid, dt)
}

/// Same as [`integrate_covariance`] but reports at arbitrary non-decreasing
/// times, stepping at most `max_dt`.
pub fn covariance_at_times(spec: &ModelSpec, x0: &DVector<f64>, times: &[f64], max_dt: f64) -> Result<CovariancePath> {
    let d = spec.dim();
    let n = 2 * d;
    if x0.len() != n {
        return Err(Error::Dimension(format!("state must have length {n}, got {}", x0.len())));
    }
    let j = j_matrix(d);
    let rhs = |_t: f64, y: &DVector<f64>| {
        let (x, s) = unpack(y, n);
        let (q, _) = spec.split(&x);
        let a = drift_matrix(spec, &q);
        let ds = &j + &a * &s + &s * a.transpose();
        pack(&flow_rhs(spec, &x), &ds)
    };
    let y0 = pack(x0, &DMatrix::zeros(n, n));
    let ys = ode::integrate_to_times(rhs, &y0, times, max_dt)?;
    let mut covs = Vec::with_capacity(ys.len());
    let mut states = Vec::with_capacity(ys.len());
    let mut clamp_events = 0;
    for (y, &t) in ys.iter().zip(times) {
        let (x, s) = unpack(y, n);
        let (s, clamped) = psd_clamp(&s);
        if clamped {
            clamp_events += 1;
            log::debug!("clamped a negative eigenvalue of Sigma_t at t = {t}");
        }
        covs.push(s);
        states.push(x);
    }
    Ok(CovariancePath {
        grid: times.to_vec(),
        covs,
        states,
        base_point: x0.as_slice().to_vec(),
        clamp_events,
    })
}

/// Exact `Sigma_t = Sigma - e^{At} Sigma e^{A^T t}` for a linear force.
pub fn linear_covariance(spec: &ModelSpec, t: f64) -> Result<DMatrix<f64>> {
    if !spec.force.is_linear() {
        return Err(Error::Method("closed-form Sigma_t needs a linear force".into()));
    }
    let a = drift_matrix(spec, &DVector::zeros(spec.dim()));
    let sigma = sigma_matrix(spec)?;
    let e = crate::linalg::expm(&(a * t));
    Ok(sym_part(&(&sigma - &e * &sigma * e.transpose())))
}

/// Third-order expansion of `Sigma_t(x)` at small `t`: blocks
/// `(t^3/3) I`, `(t^2/2 - gamma t^3/2) I`,
/// `(t - gamma t^2 + 2 gamma^2 t^3/3) I - (t^3/6)(DF + DF^T)` at the position of `x`.
pub fn short_time_covariance(spec: &ModelSpec, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
    let d = spec.dim();
    let g = spec.gamma;
    let (q, _) = spec.split(x);
    let df = spec.force.jacobian(&q);
    let eye = DMatrix::<f64>::identity(d, d);
    let t2 = t * t;
    let t3 = t2 * t;
    let qq = &eye * (t3 / 3.0);
    let qp = &eye * (t2 / 2.0 - g * t3 / 2.0);
    let pp = &eye * (t - g * t2 + 2.0 * g * g * t3 / 3.0) - (&df + df.transpose()) * (t3 / 6.0);
    block2(&qq, &qp, &qp, &pp)
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryGapReport {
    pub times: Vec<f64>,
    pub gaps: Vec<f64>,
    /// Exponential decay rate fitted on the tail half of the horizon
    /// (points below the roundoff floor are skipped).
    pub fitted_rate: f64,
    pub decaying: bool,
}

/// `||Sigma_t - Sigma||_F` along the path from `x0`.
pub fn stationary_gap(spec: &ModelSpec, x0: &DVector<f64>, horizon: f64, dt: f64) -> Result<StationaryGapReport> {
    let sigma = sigma_matrix(spec)?;
    let path = integrate_covariance(spec, x0, horizon, dt)?;
    let gaps: Vec<f64> = path.covs.iter().map(|s| (s - &sigma).norm()).collect();
    let floor = 1e-13 * sigma.norm();
    let pts: Vec<(f64, f64)> = path
        .grid
        .iter()
        .zip(&gaps)
        .filter(|(t, g)| **t >= 0.5 * horizon && **g > floor)
        .map(|(t, g)| (*t, g.ln()))
        .collect();
    let rate = if pts.len() >= 2 { -ls_slope(&pts) } else { f64::NAN };
    let decaying = rate > 0.0 || (pts.len() < 2 && gaps.last().is_some_and(|g| *g <= floor));
    if !decaying {
        log::warn!("Sigma_t does not approach Sigma along the path (rate {rate})");
    }
    Ok(StationaryGapReport {
        times: path.grid,
        gaps,
        fitted_rate: rate,
        decaying,
    })
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{lyapunov_quadrature, Orientation};
    use crate::model::builtin_force;
    use approx::assert_relative_eq;

    fn harmonic() -> ModelSpec {
        ModelSpec::new(builtin_force("harmonic").unwrap(), 1.0, 0.01).unwrap()
    }

    #[test]
    fn drift_matrix_examples() {
        let spec = ModelSpec::new(builtin_force("quartic").unwrap(), 0.5, 0.01).unwrap();
        let a = drift_matrix(&spec, &DVector::from_element(1, 2.0));
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -13.0, -0.5]));
        let lin = harmonic();
        assert_eq!(
            drift_matrix(&lin, &DVector::from_element(1, 5.0)),
            drift_matrix(&lin, &DVector::zeros(1))
        );
    }

    #[test]
    fn starts_at_zero_with_slope_j() {
        let spec = harmonic();
        let x0 = DVector::from_column_slice(&[1.0, 0.0]);
        let h = 1e-6;
        let path = covariance_at_times(&spec, &x0, &[0.0, h], h).unwrap();
        assert_eq!(path.covs[0], DMatrix::zeros(2, 2));
        let slope = &path.covs[1] / h;
        assert!((slope - j_matrix(1)).norm() < 1e-5);
    }

    #[test]
    fn converges_to_sigma() {
        let spec = harmonic();
        let path = integrate_covariance(&spec, &DVector::from_column_slice(&[1.0, 0.0]), 30.0, 0.01).unwrap();
        let sigma = sigma_matrix(&spec).unwrap();
        assert_relative_eq!(sigma[(0, 0)], 0.5, epsilon = 1e-12);
        assert!((path.covs.last().unwrap() - sigma).norm() < 1e-6);
        assert_eq!(path.clamp_events, 0);
    }

    #[test]
    fn ode_path_matches_quadrature_and_closed_form() {
        let spec = harmonic();
        let a = drift_matrix(&spec, &DVector::zeros(1));
        let path = covariance_at_times(&spec, &DVector::zeros(2), &[0.5, 2.0], 1e-3).unwrap();
        for (t, s) in path.grid.iter().zip(&path.covs) {
            let quad = lyapunov_quadrature(&a, &j_matrix(1), Orientation::Right, *t);
            assert!((s - &quad).norm() < 1e-8);
            assert!((s - linear_covariance(&spec, *t).unwrap()).norm() < 1e-8);
        }
    }

    #[test]
    fn short_time_top_left_block() {
        let spec = ModelSpec::new(builtin_force("quartic-2d").unwrap(), 1.3, 0.01).unwrap();
        let x = DVector::from_column_slice(&[0.4, -0.2, 1.0, 0.0]);
        let t = 0.05;
        let s = short_time_covariance(&spec, &x, t);
        let tl = s.view((0, 0), (2, 2)).into_owned();
        assert!((tl - DMatrix::<f64>::identity(2, 2) * (t * t * t / 3.0)).norm() < 1e-18);
    }

    #[test]
    fn gap_starts_at_sigma_norm() {
        let spec = harmonic();
        let rep = stationary_gap(&spec, &DVector::zeros(2), 20.0, 0.01).unwrap();
        assert_eq!(rep.gaps[0], sigma_matrix(&spec).unwrap().norm());
        assert!(rep.decaying && rep.fitted_rate > 0.0);
    }
}
