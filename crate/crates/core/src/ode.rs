//! Fixed-step classical Runge-Kutta on flat state vectors.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// States beyond this norm are treated as a blow-up.
pub const BLOWUP_NORM: f64 = 1e150;

pub fn rk4_step<F>(f: &F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates `y' = f(t, y)` from `t = 0` and records the state at every
/// requested output time (which must be non-decreasing and non-negative).
/// Steps never exceed `max_dt`; the step is shortened to land exactly on each
/// output time.
pub fn integrate_to_times<F>(
    f: F,
    y0: &DVector<f64>,
    times: &[f64],
    max_dt: f64,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if !(max_dt > 0.0) {
        return Err(Error::Parameter(format!("step size must be positive, got {max_dt}")));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut y = y0.clone();
    for &target in times {
        if target < t - 1e-12 * (1.0 + t) {
            return Err(Error::Parameter("output times must be non-decreasing and >= 0".into()));
        }
        let span = target - t;
        if span > 0.0 {
            let n = (span / max_dt).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for i in 0..n {
                y = rk4_step(&f, t + i as f64 * h, &y, h);
                if !y.iter().all(|v| v.is_finite()) || y.norm() > BLOWUP_NORM {
                    return Err(Error::Divergence {
                        t: t + (i + 1) as f64 * h,
                        state: y.as_slice().to_vec(),
                    });
                }
            }
            t = target;
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// `0, dt, 2dt, ..., t_end`, with the last interval shortened if needed.
pub fn uniform_grid(t_end: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::Parameter(format!("need dt > 0 and t_end >= 0 (dt = {dt}, t_end = {t_end})")));
    }
    let n = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let mut grid: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    grid.push(t_end);
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_fourth_order() {
        let f = |_t: f64, y: &DVector<f64>| -y;
        let y0 = DVector::from_element(1, 1.0);
        let err = |h: f64| (integrate_to_times(f, &y0, &[1.0], h).unwrap()[0][0] - (-1.0f64).exp()).abs();
        let ratio = err(0.1) / err(0.05);
        assert!((14.0..18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn grid_hits_endpoint() {
        let g = uniform_grid(1.0, 0.3).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(uniform_grid(1.0, 0.25).unwrap().len(), 5);
        assert_eq!(uniform_grid(0.0, 0.1).unwrap(), vec![0.0]);
    }

    #[test]
    fn blowup_is_reported() {
        let f = |_t: f64, y: &DVector<f64>| y.map(|v| v * v);
        let y0 = DVector::from_element(1, 1.0);
        assert!(matches!(
            integrate_to_times(f, &y0, &[2.0], 1e-3),
            Err(Error::Divergence { .. })
        ));
    }
}
