//! Stochastic simulation of `dq = p dt, dp = -F(q) dt - gamma p dt + sqrt(2 eps) dB`,
//! of the Gaussian fluctuation `dY = A(q_t) Y dt + (0, dB)` along the
//! zero-noise path, and of the surrogate `Z = X + sqrt(2 eps) Y`.
//!
//! Every path owns a ChaCha8 stream selected by `(seed, path index)`, so
//! ensembles are bitwise reproducible regardless of the rayon pool size.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::covflow::drift_matrix;
use crate::error::{Error, Result};
use crate::gaussian::{sample_moments, tv_gaussian, Gaussian, TvMethod};
use crate::linalg::{j_matrix, sym_part};
use crate::lyapunov::lyapunov_quadrature;
use crate::lyapunov::Orientation;
use crate::model::ModelSpec;
use crate::ode;
use crate::stability::{flow_rhs, lyapunov_h};

/// Paths whose state exceeds this norm are excluded.
pub const EXPLOSION_NORM: f64 = 1e100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    Baoab,
}

pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

#[derive(Clone, Debug)]
pub struct SdeRequest {
    pub t_end: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Record every `record_every`-th step (the final step is always recorded).
    pub record_every: usize,
    /// Also run `X` (noise-free, same scheme) and `Y` with the same noise.
    pub coupled: bool,
}

impl SdeRequest {
    pub fn new(t_end: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        SdeRequest {
            t_end,
            dt,
            n_paths,
            seed,
            scheme: Scheme::Baoab,
            record_every: 1,
            coupled: false,
        }
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn record_every(mut self, k: usize) -> Self {
        self.record_every = k.max(1);
        self
    }

    pub fn coupled(mut self, on: bool) -> Self {
        self.coupled = on;
        self
    }

    fn steps(&self) -> Result<(usize, f64)> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::Parameter(format!("need dt > 0 and t_end >= 0 (dt = {}, t_end = {})", self.dt, self.t_end)));
        }
        if self.n_paths == 0 {
            return Err(Error::Parameter("need at least one path".into()));
        }
        let n = (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize;
        let h = if n > 0 { self.t_end / n as f64 } else { 0.0 };
        Ok((n, h))
    }

    fn recorded_steps(&self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=n).step_by(self.record_every.max(1)).collect();
        if *v.last().expect("step 0") != n {
            v.push(n);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct CoupledPaths {
    /// Noise-free path from the same scheme, one state per recorded time.
    pub x: Vec<DVector<f64>>,
    /// Fluctuation ensemble, same layout as [`TrajectoryBatch::states`].
    pub y: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub grid: Vec<f64>,
    pub dim2: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Path-major: `states[(path * n_times + time) * dim2 + k]`.
    pub states: Vec<f64>,
    pub valid: Vec<bool>,
    pub coupled: Option<CoupledPaths>,
    pub epsilon: f64,
}

impl TrajectoryBatch {
    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    pub fn n_excluded(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    fn at(data: &[f64], n_times: usize, dim2: usize, path: usize, ti: usize) -> DVector<f64> {
        let o = (path * n_times + ti) * dim2;
        DVector::from_column_slice(&data[o..o + dim2])
    }

    pub fn state(&self, path: usize, ti: usize) -> DVector<f64> {
        Self::at(&self.states, self.n_times(), self.dim2, path, ti)
    }

    /// States of all non-excluded paths at one recorded time.
    pub fn cloud(&self, ti: usize) -> Vec<DVector<f64>> {
        (0..self.n_paths)
            .filter(|&i| self.valid[i])
            .map(|i| self.state(i, ti))
            .collect()
    }

    pub fn y_cloud(&self, ti: usize) -> Option<Vec<DVector<f64>>> {
        let c = self.coupled.as_ref()?;
        Some(
            (0..self.n_paths)
                .filter(|&i| self.valid[i])
                .map(|i| Self::at(&c.y, self.n_times(), self.dim2, i, ti))
                .collect(),
        )
    }

    /// `Z = X + sqrt(2 eps) Y` on the grid.
    pub fn z_cloud(&self, ti: usize) -> Option<Vec<DVector<f64>>> {
        let c = self.coupled.as_ref()?;
        let s = (2.0 * self.epsilon).sqrt();
        Some(self.y_cloud(ti)?.into_iter().map(|y| &c.x[ti] + y * s).collect())
    }
}

struct PathOut {
    states: Vec<f64>,
    y: Option<Vec<f64>>,
    ok: bool,
}

/// One step of the chosen scheme. `xi` is the standard normal vector for the step.
fn step(spec: &ModelSpec, scheme: Scheme, q: &mut DVector<f64>, p: &mut DVector<f64>, h: f64, noise: f64, xi: &DVector<f64>) {
    let g = spec.gamma;
    match scheme {
        Scheme::EulerMaruyama => {
            let f = spec.force.force(q);
            let q_new = &*q + &*p * h;
            *p = &*p + (-f - &*p * g) * h + xi * (noise * (2.0 * h).sqrt());
            *q = q_new;
        }
        Scheme::Baoab => {
            let c1 = (-g * h).exp();
            let c2 = (noise * noise / 2.0 * (1.0 - c1 * c1) / g).sqrt();
            *p -= spec.force.force(q) * (0.5 * h);
            *q += &*p * (0.5 * h);
            *p = &*p * c1 + xi * c2;
            *q += &*p * (0.5 * h);
            *p -= spec.force.force(q) * (0.5 * h);
        }
    }
}

/// Linearization of [`step`] around a deterministic path `(q_n -> q_{n+1})`,
/// driven by the same normals with unit noise amplitude.
fn step_linear(
    spec: &ModelSpec,
    scheme: Scheme,
    yq: &mut DVector<f64>,
    yp: &mut DVector<f64>,
    df_start: &DMatrix<f64>,
    df_end: &DMatrix<f64>,
    h: f64,
    xi: &DVector<f64>,
) {
    let g = spec.gamma;
    match scheme {
        Scheme::EulerMaruyama => {
            let q_new = &*yq + &*yp * h;
            *yp = &*yp + (-(df_start * &*yq) - &*yp * g) * h + xi * h.sqrt();
            *yq = q_new;
        }
        Scheme::Baoab => {
            let c1 = (-g * h).exp();
            let c2 = (0.5 * (1.0 - c1 * c1) / g).sqrt();
            *yp -= df_start * &*yq * (0.5 * h);
            *yq += &*yp * (0.5 * h);
            *yp = &*yp * c1 + xi * c2;
            *yq += &*yp * (0.5 * h);
            *yp -= df_end * &*yq * (0.5 * h);
        }
    }
}

fn deterministic_path(spec: &ModelSpec, scheme: Scheme, x0: &DVector<f64>, n: usize, h: f64) -> Vec<DVector<f64>> {
    let d = spec.dim();
    let (mut q, mut p) = spec.split(x0);
    let zero = DVector::zeros(d);
    let mut out = Vec::with_capacity(n + 1);
    out.push(x0.clone());
    for _ in 0..n {
        step(spec, scheme, &mut q, &mut p, h, 0.0, &zero);
        let mut x = DVector::zeros(2 * d);
        x.rows_mut(0, d).copy_from(&q);
        x.rows_mut(d, d).copy_from(&p);
        out.push(x);
    }
    out
}

/// Ensemble of `X^eps` paths started at `x0`.
pub fn integrate_sde(spec: &ModelSpec, x0: &DVector<f64>, req: &SdeRequest) -> Result<TrajectoryBatch> {
    let d = spec.dim();
    if x0.len() != 2 * d {
        return Err(Error::Dimension(format!("state must have length {}, got {}", 2 * d, x0.len())));
    }
    let (n, h) = req.steps()?;
    let rec = req.recorded_steps(n);
    let noise = (2.0 * spec.epsilon).sqrt();
    let det = req.coupled.then(|| deterministic_path(spec, req.scheme, x0, n, h));
    let dfs: Option<Vec<DMatrix<f64>>> = det
        .as_ref()
        .map(|path| path.iter().map(|x| spec.force.jacobian(&spec.split(x).0)).collect());
    let paths: Vec<PathOut> = (0..req.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(req.seed, i as u64);
            let (mut q, mut p) = spec.split(x0);
            let mut yq = DVector::zeros(d);
            let mut yp = DVector::zeros(d);
            let mut states = Vec::with_capacity(rec.len() * 2 * d);
            let mut ys = req.coupled.then(|| Vec::with_capacity(rec.len() * 2 * d));
            let mut next = 0;
            let mut ok = true;
            for k in 0..=n {
                if k > 0 {
                    let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    if ok {
                        step(spec, req.scheme, &mut q, &mut p, h, noise, &xi);
                        if !(q.iter().chain(p.iter()).all(|v| v.is_finite()) && q.norm() + p.norm() < EXPLOSION_NORM) {
                            ok = false;
                        }
                    }
                    if let Some(dfs) = &dfs {
                        step_linear(spec, req.scheme, &mut yq, &mut yp, &dfs[k - 1], &dfs[k], h, &xi);
                    }
                }
                if rec[next] == k {
                    states.extend(q.iter().chain(p.iter()));
                    if let Some(ys) = ys.as_mut() {
                        ys.extend(yq.iter().chain(yp.iter()));
                    }
                    next += 1;
                }
            }
            PathOut { states, y: ys, ok }
        })
        .collect();
    let excluded = paths.iter().filter(|p| !p.ok).count();
    if excluded > 0 {
        log::warn!("{excluded} of {} paths exploded and are excluded", req.n_paths);
    }
    let valid = paths.iter().map(|p| p.ok).collect();
    let mut states = Vec::with_capacity(req.n_paths * rec.len() * 2 * d);
    let mut y = req.coupled.then(|| Vec::with_capacity(req.n_paths * rec.len() * 2 * d));
    for p in paths {
        states.extend(p.states);
        if let (Some(y), Some(py)) = (y.as_mut(), p.y) {
            y.extend(py);
        }
    }
    let coupled = match (det, y) {
        (Some(det), Some(y)) => Some(CoupledPaths {
            x: rec.iter().map(|&k| det[k].clone()).collect(),
            y,
        }),
        _ => None,
    };
    Ok(TrajectoryBatch {
        grid: rec.iter().map(|&k| k as f64 * h).collect(),
        dim2: 2 * d,
        n_paths: req.n_paths,
        seed: req.seed,
        scheme: req.scheme,
        states,
        valid,
        coupled,
        epsilon: spec.epsilon,
    })
}

#[derive(Clone, Debug)]
pub struct FluctuationBatch {
    pub grid: Vec<f64>,
    /// Zero-noise states on the grid.
    pub x: Vec<DVector<f64>>,
    pub dim2: usize,
    pub n_paths: usize,
    /// Path-major like [`TrajectoryBatch::states`].
    pub y: Vec<f64>,
}

impl FluctuationBatch {
    pub fn cloud(&self, ti: usize) -> Vec<DVector<f64>> {
        (0..self.n_paths)
            .map(|i| TrajectoryBatch::at(&self.y, self.grid.len(), self.dim2, i, ti))
            .collect()
    }
}

/// `Y` ensemble with `Y_0 = 0`. Each step freezes `A` at the midpoint of the
/// deterministic path and applies the exact transition
/// `Y <- e^{A h} Y + chol(int_0^h e^{As} J e^{A^T s} ds) xi`, which is exact
/// for linear forces.
pub fn integrate_fluctuation(
    spec: &ModelSpec,
    x0: &DVector<f64>,
    req: &SdeRequest,
) -> Result<FluctuationBatch> {
    let d = spec.dim();
    let n2 = 2 * d;
    if x0.len() != n2 {
        return Err(Error::Dimension(format!("state must have length {n2}, got {}", x0.len())));
    }
    let (n, h) = req.steps()?;
    let rec = req.recorded_steps(n);
    let half_times: Vec<f64> = (0..=2 * n).map(|k| k as f64 * h / 2.0).collect();
    let path = ode::integrate_to_times(|_, y| flow_rhs(spec, y), x0, &half_times, (h / 2.0).max(1e-300).min(1e-2))?;
    let j = j_matrix(d);
    let transition = |q: &DVector<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = drift_matrix(spec, q);
        let e = crate::linalg::expm(&(&a * h));
        let cov = lyapunov_quadrature(&a, &j, Orientation::Right, h);
        let l = sym_part(&cov)
            .cholesky()
            .ok_or_else(|| Error::Singular("one-step fluctuation covariance not positive definite".into()))?
            .l();
        Ok((e, l))
    };
    let steps: Vec<(DMatrix<f64>, DMatrix<f64>)> = if n == 0 {
        Vec::new()
    } else if spec.force.is_linear() {
        vec![transition(&DVector::zeros(d))?; n]
    } else {
        (0..n)
            .map(|k| transition(&spec.split(&path[2 * k + 1]).0))
            .collect::<Result<_>>()?
    };
    let paths: Vec<Vec<f64>> = (0..req.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(req.seed, i as u64);
            let mut y = DVector::zeros(n2);
            let mut out = Vec::with_capacity(rec.len() * n2);
            let mut next = 0;
            for k in 0..=n {
                if k > 0 {
                    let xi = DVector::from_fn(n2, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let (e, l) = &steps[k - 1];
                    y = e * y + l * xi;
                }
                if rec[next] == k {
                    out.extend(y.iter());
                    next += 1;
                }
            }
            out
        })
        .collect();
    Ok(FluctuationBatch {
        grid: rec.iter().map(|&k| k as f64 * h).collect(),
        x: rec.iter().map(|&k| path[2 * k].clone()).collect(),
        dim2: n2,
        n_paths: req.n_paths,
        y: paths.concat(),
    })
}

fn omega(n: u32, d: usize) -> f64 {
    (2..=n).map(|j| (d + 2 * (j as usize - 1)) as f64).product()
}

/// `kappa0^n omega_n (H(x) e^{-lambda t} + d eps / lambda)^n`.
pub fn moment_bound(spec: &ModelSpec, x: &DVector<f64>, t: f64, n: u32) -> Result<f64> {
    let cert = spec.certificate()?;
    let base = lyapunov_h(spec, x)? * (-cert.lambda * t).exp() + spec.dim() as f64 * spec.epsilon / cert.lambda;
    Ok(cert.kappa0.powi(n as i32) * omega(n, spec.dim()) * base.powi(n as i32))
}

/// `a_max = 1 / (2 (d + 2) kappa0 (H(x) e^{-lambda t} + d eps / lambda))`;
/// `E exp(a |X_t|^2) < 2` for `a < a_max`.
pub fn exp_moment_bound(spec: &ModelSpec, x: &DVector<f64>, t: f64) -> Result<f64> {
    let cert = spec.certificate()?;
    let d = spec.dim() as f64;
    let base = lyapunov_h(spec, x)? * (-cert.lambda * t).exp() + d * spec.epsilon / cert.lambda;
    Ok(1.0 / (2.0 * (d + 2.0) * cert.kappa0 * base))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpiricalTvMethod {
    GaussianMomentMatch,
    ClassifierKnn { k: usize },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EmpiricalTv {
    pub estimate: f64,
    pub stderr: f64,
    pub method_used: EmpiricalTvMethod,
}

const JACKKNIFE_GROUPS: usize = 10;

/// TV estimate between two point clouds.
pub fn empirical_tv(s1: &[DVector<f64>], s2: &[DVector<f64>], method: EmpiricalTvMethod, seed: u64) -> Result<EmpiricalTv> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Parameter("point clouds must be non-empty".into()));
    }
    let dim = s1[0].len();
    if s1.iter().chain(s2).any(|p| p.len() != dim) {
        return Err(Error::Dimension("point clouds of different dimension".into()));
    }
    match method {
        EmpiricalTvMethod::GaussianMomentMatch => match moment_match_tv(s1, s2, seed) {
            Ok(r) => Ok(r),
            Err(Error::Singular(msg)) => {
                let k = default_k(s1.len().min(s2.len()));
                log::warn!("moment matching failed ({msg}); falling back to {k}-NN classifier");
                knn_tv(s1, s2, k)
            }
            Err(e) => Err(e),
        },
        EmpiricalTvMethod::ClassifierKnn { k } => knn_tv(s1, s2, k),
    }
}

fn default_k(n: usize) -> usize {
    let k = ((n as f64 / 2.0).sqrt() as usize).max(1);
    k | 1
}

fn fitted(points: &[DVector<f64>]) -> Result<Gaussian> {
    let (m, c) = sample_moments(points)?;
    let n = c.nrows() as f64;
    let min = crate::linalg::min_sym_eig(&c);
    if !(min > 1e-10 * c.trace() / n) {
        return Err(Error::Singular(format!("sample covariance is degenerate (min eigenvalue {min:.3e})")));
    }
    Gaussian::new(m, c)
}

fn moment_match_tv(s1: &[DVector<f64>], s2: &[DVector<f64>], seed: u64) -> Result<EmpiricalTv> {
    let dim = s1[0].len();
    let method = if dim <= 2 {
        TvMethod::Quadrature
    } else {
        TvMethod::MonteCarlo { n: 100_000, seed }
    };
    let tv = |a: &[DVector<f64>], b: &[DVector<f64>]| -> Result<f64> {
        Ok(tv_gaussian(&fitted(a)?, &fitted(b)?, method)?.value)
    };
    let full = tv(s1, s2)?;
    // delete-a-group jackknife
    let g = JACKKNIFE_GROUPS;
    let mut reps = Vec::with_capacity(g);
    if s1.len() >= 4 * g && s2.len() >= 4 * g {
        for k in 0..g {
            let a: Vec<DVector<f64>> = s1.iter().enumerate().filter(|(i, _)| i % g != k).map(|(_, p)| p.clone()).collect();
            let b: Vec<DVector<f64>> = s2.iter().enumerate().filter(|(i, _)| i % g != k).map(|(_, p)| p.clone()).collect();
            reps.push(tv(&a, &b)?);
        }
    }
    let stderr = if reps.is_empty() {
        f64::NAN
    } else {
        let mean = reps.iter().sum::<f64>() / g as f64;
        ((g as f64 - 1.0) / g as f64 * reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>()).sqrt()
    };
    Ok(EmpiricalTv {
        estimate: full,
        stderr,
        method_used: EmpiricalTvMethod::GaussianMomentMatch,
    })
}

/// `2 * balanced accuracy - 1` of a k-NN two-sample classifier trained on the
/// first half of each cloud and tested on the second half, clamped to `[0, 1]`.
fn knn_tv(s1: &[DVector<f64>], s2: &[DVector<f64>], k: usize) -> Result<EmpiricalTv> {
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    let (h1, h2) = (s1.len() / 2, s2.len() / 2);
    if h1 < 1 || h2 < 1 || h1 + h2 < k {
        return Err(Error::Parameter("clouds too small for the requested k".into()));
    }
    let dim = s1[0].len();
    // standardize by the pooled training scale
    let train: Vec<&DVector<f64>> = s1[..h1].iter().chain(&s2[..h2]).collect();
    let mut mean = DVector::zeros(dim);
    for p in &train {
        mean += *p;
    }
    mean /= train.len() as f64;
    let mut sd = DVector::zeros(dim);
    for p in &train {
        sd += (*p - &mean).map(|v| v * v);
    }
    let sd = (sd / train.len() as f64).map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let scale = |p: &DVector<f64>| -> Vec<f64> { (p - &mean).component_div(&sd).as_slice().to_vec() };
    let mut tree: KdTree<f64, u8, Vec<f64>> = KdTree::with_capacity(dim, h1 + h2);
    for p in &s1[..h1] {
        tree.add(scale(p), 0).map_err(|e| Error::Parameter(format!("k-d tree: {e:?}")))?;
    }
    for p in &s2[..h2] {
        tree.add(scale(p), 1).map_err(|e| Error::Parameter(format!("k-d tree: {e:?}")))?;
    }
    let prior = h1 as f64 / (h1 + h2) as f64;
    let classify = |p: &DVector<f64>| -> u8 {
        let nn = tree.nearest(&scale(p), k, &squared_euclidean).expect("valid query");
        let ones = nn.iter().filter(|(_, l)| **l == 1).count() as f64;
        // reweight votes so unequal cloud sizes do not bias the decision
        let w1 = ones / (1.0 - prior);
        let w0 = (nn.len() as f64 - ones) / prior;
        u8::from(w1 > w0)
    };
    let t1 = &s1[h1..];
    let t2 = &s2[h2..];
    let correct1 = t1.par_iter().filter(|p| classify(p) == 0).count() as f64;
    let correct2 = t2.par_iter().filter(|p| classify(p) == 1).count() as f64;
    let (n1, n2) = (t1.len() as f64, t2.len() as f64);
    let (a1, a2) = (correct1 / n1, correct2 / n2);
    let ba = 0.5 * (a1 + a2);
    let var_ba = 0.25 * (a1 * (1.0 - a1) / n1 + a2 * (1.0 - a2) / n2);
    Ok(EmpiricalTv {
        estimate: (2.0 * ba - 1.0).clamp(0.0, 1.0),
        stderr: 2.0 * var_ba.sqrt(),
        method_used: EmpiricalTvMethod::ClassifierKnn { k },
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PinskerBound {
    /// `(1/2eps) int_0^t E|F(q^eps) - F(q) - DF(q)(q^eps - q)|^2 ds`.
    pub value: f64,
    pub stderr: f64,
    pub n_used: usize,
}

/// Monte Carlo estimate of the Girsanov/Pinsker quantity. Its square root
/// bounds `d_TV(X_t^eps, Z_t^eps)`. The deterministic path is the same
/// scheme run without noise, so discretization error cancels to first order.
pub fn pinsker_kl_bound(spec: &ModelSpec, x0: &DVector<f64>, req: &SdeRequest) -> Result<PinskerBound> {
    if !(spec.epsilon > 0.0) {
        return Err(Error::Parameter("Pinsker bound needs eps > 0".into()));
    }
    let d = spec.dim();
    let (n, h) = req.steps()?;
    let noise = (2.0 * spec.epsilon).sqrt();
    let det = deterministic_path(spec, req.scheme, x0, n, h);
    let det_q: Vec<DVector<f64>> = det.iter().map(|x| spec.split(x).0).collect();
    let det_f: Vec<DVector<f64>> = det_q.iter().map(|q| spec.force.force(q)).collect();
    let det_df: Vec<DMatrix<f64>> = det_q.iter().map(|q| spec.force.jacobian(q)).collect();
    let remainder = |k: usize, q: &DVector<f64>| {
        let dq = q - &det_q[k];
        (spec.force.force(q) - &det_f[k] - &det_df[k] * dq).norm_squared()
    };
    let vals: Vec<Option<f64>> = (0..req.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(req.seed, i as u64);
            let (mut q, mut p) = spec.split(x0);
            let mut acc = 0.5 * remainder(0, &q);
            for k in 1..=n {
                let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                step(spec, req.scheme, &mut q, &mut p, h, noise, &xi);
                if !q.iter().all(|v| v.is_finite()) || q.norm() > EXPLOSION_NORM {
                    return None;
                }
                let w = if k == n { 0.5 } else { 1.0 };
                acc += w * remainder(k, &q);
            }
            Some(acc * h / (2.0 * spec.epsilon))
        })
        .collect();
    let used: Vec<f64> = vals.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Divergence {
            t: req.t_end,
            state: vec![],
        });
    }
    let m = used.len() as f64;
    let mean = used.iter().sum::<f64>() / m;
    let var = used.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok(PinskerBound {
        value: mean,
        stderr: (var / m).sqrt(),
        n_used: used.len(),
    })
}

/// Ensemble mean and covariance with per-entry standard errors.
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_stderr: DVector<f64>,
    pub cov_stderr: DMatrix<f64>,
}

pub fn ensemble_stats(points: &[DVector<f64>]) -> Result<EnsembleStats> {
    let (mean, cov) = sample_moments(points)?;
    let n = points.len() as f64;
    let dim = mean.len();
    let mut m4 = DMatrix::zeros(dim, dim);
    for p in points {
        let r = p - &mean;
        let outer = &r * r.transpose();
        m4 += (&outer - &cov).map(|v| v * v);
    }
    let cov_stderr = (m4 / (n - 1.0) / n).map(f64::sqrt);
    let mean_stderr = cov.diagonal().map(|v| (v / n).sqrt());
    Ok(EnsembleStats {
        mean,
        cov,
        mean_stderr,
        cov_stderr,
    })
}

/// Largest `|estimate - target| / stderr` over entries (zero-stderr entries
/// compare exactly).
pub fn max_z_score(est: &DMatrix<f64>, target: &DMatrix<f64>, stderr: &DMatrix<f64>) -> f64 {
    est.iter()
        .zip(target.iter())
        .zip(stderr.iter())
        .map(|((e, t), s)| {
            let diff = (e - t).abs();
            if *s > 0.0 {
                diff / s
            } else if diff > 1e-12 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covflow::{covariance_at_times, linear_covariance};
    use crate::linalg::expm;
    use crate::model::builtin_force;
    use crate::stability::flow_zero_noise;

    fn oscillator(eps: f64) -> ModelSpec {
        ModelSpec::new(builtin_force("harmonic").unwrap(), 1.0, eps).unwrap()
    }

    #[test]
    fn zero_noise_matches_flow() {
        let spec = oscillator(0.0);
        let x0 = DVector::from_column_slice(&[1.0, 0.5]);
        let b = integrate_sde(&spec, &x0, &SdeRequest::new(2.0, 1e-3, 2, 1)).unwrap();
        let flow = flow_zero_noise(&spec, &x0, 2.0, 1e-3).unwrap();
        assert!((b.state(0, b.n_times() - 1) - flow.last()).norm() < 1e-5);
        assert_eq!(b.state(0, 10), b.state(1, 10));
    }

    #[test]
    fn reproducible_and_thread_count_independent() {
        let spec = oscillator(0.1);
        let x0 = DVector::from_column_slice(&[1.0, 0.0]);
        let req = SdeRequest::new(1.0, 0.01, 64, 42).record_every(10);
        let a = integrate_sde(&spec, &x0, &req).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| integrate_sde(&spec, &x0, &req).unwrap());
        assert_eq!(a.states, b.states);
        let c = integrate_sde(&spec, &x0, &SdeRequest::new(1.0, 0.01, 64, 43).record_every(10)).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn linear_ensemble_matches_exact_gaussian() {
        let eps = 0.01;
        let spec = oscillator(eps);
        let x0 = DVector::from_column_slice(&[1.0, 0.0]);
        let b = integrate_sde(&spec, &x0, &SdeRequest::new(1.0, 0.005, 40_000, 5).record_every(200)).unwrap();
        let cloud = b.cloud(b.n_times() - 1);
        let st = ensemble_stats(&cloud).unwrap();
        let a = drift_matrix(&spec, &DVector::zeros(1));
        let mean = expm(&a) * &x0;
        let cov = linear_covariance(&spec, 1.0).unwrap() * (2.0 * eps);
        for i in 0..2 {
            assert!((st.mean[i] - mean[i]).abs() < 4.0 * st.mean_stderr[i], "mean {i}");
        }
        assert!(max_z_score(&st.cov, &cov, &st.cov_stderr) < 4.0);
    }

    #[test]
    fn coupled_z_equals_x_eps_for_linear_force() {
        let spec = oscillator(0.05);
        let x0 = DVector::from_column_slice(&[1.0, -1.0]);
        let b = integrate_sde(&spec, &x0, &SdeRequest::new(2.0, 0.01, 20, 9).coupled(true)).unwrap();
        let ti = b.n_times() - 1;
        let z = b.z_cloud(ti).unwrap();
        let x = b.cloud(ti);
        for (zi, xi) in z.iter().zip(&x) {
            assert!((zi - xi).norm() < 1e-12);
        }
        assert_eq!(b.y_cloud(0).unwrap()[0], DVector::zeros(2));
    }

    #[test]
    fn coupling_breaks_with_a_different_seed() {
        let spec = oscillator(0.05);
        let x0 = DVector::from_column_slice(&[1.0, -1.0]);
        let a = integrate_sde(&spec, &x0, &SdeRequest::new(1.0, 0.01, 4, 9).coupled(true)).unwrap();
        let b = integrate_sde(&spec, &x0, &SdeRequest::new(1.0, 0.01, 4, 10).coupled(true)).unwrap();
        let ti = a.n_times() - 1;
        let za = a.z_cloud(ti).unwrap();
        let xb = b.cloud(ti);
        assert!((&za[0] - &xb[0]).norm() > 1e-6);
    }

    #[test]
    fn fluctuation_covariance_matches_ode() {
        let spec = ModelSpec::new(builtin_force("quartic").unwrap(), 1.0, 0.01).unwrap();
        let x0 = DVector::from_column_slice(&[1.0, 0.0]);
        let fb = integrate_fluctuation(&spec, &x0, &SdeRequest::new(2.0, 0.01, 20_000, 3).record_every(100)).unwrap();
        assert_eq!(fb.cloud(0)[0], DVector::zeros(2));
        let path = covariance_at_times(&spec, &x0, &fb.grid, 1e-3).unwrap();
        for ti in 1..fb.grid.len() {
            let st = ensemble_stats(&fb.cloud(ti)).unwrap();
            assert!(max_z_score(&st.cov, &path.covs[ti], &st.cov_stderr) < 4.5, "t = {}", fb.grid[ti]);
        }
    }

    #[test]
    fn omega_products() {
        assert_eq!(omega(0, 3), 1.0);
        assert_eq!(omega(1, 3), 1.0);
        assert_eq!(omega(2, 3), 5.0);
        assert_eq!(omega(3, 3), 35.0);
    }

    #[test]
    fn moment_bound_first_order() {
        let spec = oscillator(0.1).with_derived_assumption().unwrap();
        let x = DVector::from_column_slice(&[1.0, 1.0]);
        let cert = spec.certificate().unwrap().clone();
        let h = lyapunov_h(&spec, &x).unwrap();
        let expect = cert.kappa0 * (h * (-cert.lambda * 2.0).exp() + 0.1 / cert.lambda);
        assert!((moment_bound(&spec, &x, 2.0, 1).unwrap() - expect).abs() < 1e-12 * expect);
        let a1 = exp_moment_bound(&spec, &x, 1.0).unwrap();
        let a2 = exp_moment_bound(&spec, &x, 2.0).unwrap();
        assert!(a2 > a1);
    }

    #[test]
    fn knn_sees_separated_clouds() {
        let n = 4000;
        let a = Gaussian::standard(2).samples(n, 1);
        let shifted = Gaussian::new(DVector::from_column_slice(&[2.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let b = shifted.samples(n, 2);
        let tv = empirical_tv(&a, &b, EmpiricalTvMethod::ClassifierKnn { k: 31 }, 0).unwrap();
        assert!((tv.estimate - 0.6827).abs() < 3.0 * tv.stderr + 0.02, "{tv:?}");
        let same = Gaussian::standard(2).samples(n, 3);
        let tv0 = empirical_tv(&a, &same, EmpiricalTvMethod::ClassifierKnn { k: 31 }, 0).unwrap();
        assert!(tv0.estimate < 3.0 * tv0.stderr + 1e-12, "{tv0:?}");
    }

    #[test]
    fn moment_match_on_shifted_clouds() {
        let a = Gaussian::standard(2).samples(20_000, 4);
        let b = Gaussian::new(DVector::from_column_slice(&[0.0, 2.0]), DMatrix::identity(2, 2))
            .unwrap()
            .samples(20_000, 5);
        let tv = empirical_tv(&a, &b, EmpiricalTvMethod::GaussianMomentMatch, 0).unwrap();
        assert!((tv.estimate - 0.6827).abs() < 3.0 * tv.stderr + 0.005, "{tv:?}");
    }

    #[test]
    fn degenerate_cloud_falls_back_to_classifier() {
        let a: Vec<DVector<f64>> = (0..200).map(|i| DVector::from_column_slice(&[i as f64, i as f64])).collect();
        let b: Vec<DVector<f64>> = (0..200).map(|i| DVector::from_column_slice(&[i as f64, 0.5 + i as f64])).collect();
        let tv = empirical_tv(&a, &b, EmpiricalTvMethod::GaussianMomentMatch, 0).unwrap();
        assert!(matches!(tv.method_used, EmpiricalTvMethod::ClassifierKnn { .. }));
    }

    #[test]
    fn pinsker_vanishes_for_linear_force() {
        let spec = oscillator(0.01);
        let b = pinsker_kl_bound(&spec, &DVector::from_column_slice(&[1.0, 0.0]), &SdeRequest::new(2.0, 0.01, 50, 1)).unwrap();
        assert!(b.value < 1e-20);
    }
}
