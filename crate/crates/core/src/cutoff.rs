//! Jordan-structure constants of the linearization at the origin, the
//! mixing time, and the profile functions around it.
//!
//! For a start point `x` the linear flow behaves like
//! `e^{At} x ~ t^nu e^{-eta t} Re sum_k e^{i theta_k t} v_k`. The constants are
//! read off from the generalized eigenspace components of `x`.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use libm::erf;

use crate::covflow::{covariance_at_times, drift_matrix, linear_covariance};
use crate::error::{Error, Result};
use crate::gaussian::{tv_gaussian, tv_unit, Gaussian, TvKind, TvMethod, TvValue};
use crate::linalg::{self, op_norm, rank_c, spectral_abscissa, sym_inv_sqrt, to_complex, C64};
use crate::lyapunov::{drift_metric_delta, sigma_matrix};
use crate::model::ModelSpec;
use crate::ode;
use crate::stability::flow_rhs;

/// Relative threshold below which a component of `x` is treated as absent.
pub const RETENTION_TOL: f64 = 1e-10;
/// Relative threshold for the staircase rank decisions.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct JordanBlock {
    pub eigenvalue: [f64; 2],
    pub size: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralData {
    pub eta: f64,
    pub nu: usize,
    pub tau: f64,
    /// Signed angular frequencies `Im mu` of the retained slowest eigenvalues.
    pub phases: Vec<f64>,
    /// `v_k` as `[re, im]` pairs per coordinate.
    #[serde(serialize_with = "ser_cvecs")]
    pub vectors: Vec<DVector<C64>>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub jordan_blocks: Vec<JordanBlock>,
    /// `x` has a component in every generalized eigenspace, at full chain depth.
    pub generic_x: bool,
    /// A rank or clustering decision fell close to its threshold.
    pub near_defective: bool,
    /// Point that was expanded in the Jordan basis (`x` itself, or the flow at time `tau`).
    pub expanded_point: Vec<f64>,
    pub rho_lin: f64,
}

fn ser_cvecs<S: serde::Serializer>(v: &[DVector<C64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let out: Vec<Vec<[f64; 2]>> = v.iter().map(|c| c.iter().map(|z| [z.re, z.im]).collect()).collect();
    serde::Serialize::serialize(&out, s)
}

impl SpectralData {
    /// `Re sum_k e^{i theta_k s} v_k`.
    pub fn oscillating_sum(&self, s: f64) -> DVector<f64> {
        let n = self.vectors.first().map_or(0, |v| v.len());
        let mut acc = DVector::<C64>::zeros(n);
        for (theta, v) in self.phases.iter().zip(&self.vectors) {
            acc += v * C64::from_polar(1.0, theta * s);
        }
        acc.map(|z| z.re)
    }

    pub fn all_real(&self) -> bool {
        self.phases.iter().all(|t| *t == 0.0)
    }
}

struct Cluster {
    center: C64,
    members: Vec<C64>,
}

fn cluster_eigenvalues(ev: &[C64], tol: f64) -> (Vec<Cluster>, bool) {
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut ambiguous = false;
    for &z in ev {
        if let Some(c) = clusters.iter_mut().find(|c| (c.center - z).norm() < tol) {
            c.members.push(z);
            let k = c.members.len() as f64;
            c.center = c.members.iter().sum::<C64>() / k;
        } else {
            clusters.push(Cluster {
                center: z,
                members: vec![z],
            });
        }
    }
    // pairs of clusters that are only a little farther apart than the tolerance
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            if (clusters[i].center - clusters[j].center).norm() < 100.0 * tol {
                ambiguous = true;
            }
        }
    }
    // conjugate pairs get exactly conjugate centres; real clusters become real
    for c in clusters.iter_mut() {
        if c.center.im.abs() < tol {
            c.center.im = 0.0;
        }
    }
    (clusters, ambiguous)
}

fn mat_pow(n: &DMatrix<C64>, k: usize) -> DMatrix<C64> {
    let mut out = DMatrix::<C64>::identity(n.nrows(), n.ncols());
    for _ in 0..k {
        out = &out * n;
    }
    out
}

/// Basis of the generalized eigenspace: the `m` right singular vectors of
/// `N^m` with the smallest singular values. Also reports whether the gap to
/// the next singular value is convincing.
fn generalized_eigenspace(nm: &DMatrix<C64>, m: usize) -> (DMatrix<C64>, bool) {
    let n = nm.ncols();
    let svd = nm.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^H");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let cols: Vec<DVector<C64>> = idx[..m].iter().map(|&i| v_t.row(i).adjoint()).collect();
    let weak = m < n && {
        let inside = svd.singular_values[idx[m - 1]];
        let outside = svd.singular_values[idx[m]];
        inside > 1e-4 * outside
    };
    (DMatrix::from_columns(&cols), weak)
}

/// Expansion data of `y` w.r.t. the generalized eigenspaces of `A`.
struct Expansion {
    centers: Vec<C64>,
    components: Vec<DVector<C64>>,
    blocks: Vec<Vec<usize>>,
    nilpotents: Vec<DMatrix<C64>>,
    near_defective: bool,
}

fn expand(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<Expansion> {
    let n = a.nrows();
    let norm_a = op_norm(a).max(1.0);
    let ac = to_complex(a);
    let ev = linalg::complex_eigenvalues(a);
    let (clusters, mut near_defective) = cluster_eigenvalues(&ev, 1e-6 * (1.0 + norm_a));
    let mut bases = Vec::new();
    let mut nilpotents = Vec::new();
    let mut blocks = Vec::new();
    for c in &clusters {
        let m = c.members.len();
        let nmat = &ac - DMatrix::<C64>::identity(n, n) * c.center;
        let (basis, weak) = generalized_eigenspace(&mat_pow(&nmat, m), m);
        near_defective |= weak;
        // staircase: r_k = rank(N^k V)
        let mut ranks = vec![m];
        let mut nk_v = basis.clone();
        for k in 1..=m {
            nk_v = &nmat * nk_v;
            let (r, margin) = rank_c(&nk_v, RANK_TOL * norm_a.powi(k as i32));
            if margin < 1e3f64.ln() {
                near_defective = true;
            }
            ranks.push(r);
            if r == 0 {
                break;
            }
        }
        while ranks.len() < m + 2 {
            ranks.push(0);
        }
        let at_least: Vec<usize> = (1..=m + 1).map(|k| ranks[k - 1].saturating_sub(ranks[k])).collect();
        let mut sizes = Vec::new();
        for k in 1..=m {
            let exact = at_least[k - 1].saturating_sub(at_least[k]);
            sizes.extend(std::iter::repeat_n(k, exact));
        }
        blocks.push(sizes);
        bases.push(basis);
        nilpotents.push(nmat);
    }
    let cols: Vec<DVector<C64>> = bases.iter().flat_map(|b| b.column_iter().map(|c| c.into_owned())).collect();
    let v = DMatrix::from_columns(&cols);
    let coeffs = v
        .lu()
        .solve(&to_complex(&DMatrix::from_column_slice(n, 1, y.as_slice())))
        .ok_or_else(|| Error::Singular("generalized eigenvector basis is singular".into()))?;
    let mut offset = 0;
    let mut components = Vec::new();
    for b in &bases {
        let m = b.ncols();
        let c = coeffs.rows(offset, m).into_owned();
        components.push(DVector::from_column_slice((b * c).as_slice()));
        offset += m;
    }
    Ok(Expansion {
        centers: clusters.iter().map(|c| c.center).collect(),
        components,
        blocks,
        nilpotents,
        near_defective,
    })
}

/// First time the zero-noise flow from `x` enters the closed ball of radius
/// `rho`, and the state one time unit later.
fn linearization_entry(spec: &ModelSpec, x: &DVector<f64>, rho: f64) -> Result<(f64, DVector<f64>)> {
    let dt = 1e-2;
    let t_max = 1e4;
    let f = |_t: f64, y: &DVector<f64>| flow_rhs(spec, y);
    let mut t = 0.0;
    let mut y = x.clone();
    while y.norm() > rho {
        y = ode::rk4_step(&f, t, &y, dt);
        t += dt;
        if !y.iter().all(|v| v.is_finite()) || t > t_max {
            return Err(Error::Divergence {
                t,
                state: y.as_slice().to_vec(),
            });
        }
    }
    let after = ode::integrate_to_times(f, &y, &[1.0], dt)?.pop().expect("one output");
    Ok((t, after))
}

/// Spectral constants with the linearization radius defaulting to the drift
/// metric radius `delta` (taken from the model when already set).
pub fn spectral_data(spec: &ModelSpec, x: &DVector<f64>) -> Result<SpectralData> {
    let rho = match spec.delta_nbhd {
        Some(d) => d,
        None => drift_metric_delta(spec)?,
    };
    spectral_data_with(spec, x, rho)
}

pub fn spectral_data_with(spec: &ModelSpec, x: &DVector<f64>, rho_lin: f64) -> Result<SpectralData> {
    let d = spec.dim();
    if x.len() != 2 * d {
        return Err(Error::Dimension(format!("state must have length {}, got {}", 2 * d, x.len())));
    }
    if x.norm() == 0.0 {
        return Err(Error::Domain("cut-off constants are undefined at x = 0".into()));
    }
    let a = drift_matrix(spec, &DVector::zeros(d));
    let abscissa = spectral_abscissa(&a);
    if abscissa >= 0.0 {
        return Err(Error::Unstable {
            abscissa,
            context: "A(0) must be stable for the cut-off constants".into(),
        });
    }
    let (tau, y) = if spec.force.is_linear() || x.norm() <= rho_lin {
        (0.0, x.clone())
    } else {
        let (entry, y) = linearization_entry(spec, x, rho_lin)?;
        (entry + 1.0, y)
    };
    if y.norm() == 0.0 {
        return Err(Error::Domain("flow reached the origin exactly; constants undefined".into()));
    }
    let ex = expand(&a, &y)?;
    let ynorm = y.norm();
    let tol_re = 1e-6 * (1.0 + op_norm(&a));
    let mut depth = Vec::new();
    let mut retained = Vec::new();
    for (i, comp) in ex.components.iter().enumerate() {
        let keep = comp.norm() > RETENTION_TOL * ynorm;
        let mut nu_i = 0;
        if keep {
            let mut v = comp.clone();
            for k in 1..=comp.len() {
                v = &ex.nilpotents[i] * v;
                if v.norm() > RETENTION_TOL * ynorm {
                    nu_i = k;
                } else {
                    break;
                }
            }
        }
        depth.push(nu_i);
        retained.push(keep);
    }
    let eta = ex
        .centers
        .iter()
        .zip(&retained)
        .filter(|(_, k)| **k)
        .map(|(c, _)| -c.re)
        .fold(f64::INFINITY, f64::min);
    let slow: Vec<usize> = (0..ex.centers.len())
        .filter(|&i| retained[i] && (-ex.centers[i].re - eta).abs() <= tol_re)
        .collect();
    let nu = slow.iter().map(|&i| depth[i]).max().unwrap_or(0);
    let fact: f64 = (1..=nu).map(|k| k as f64).product();
    let mut phases = Vec::new();
    let mut vectors = Vec::new();
    let mut eigenvalues = Vec::new();
    for &i in &slow {
        if depth[i] != nu {
            continue;
        }
        let v = mat_pow(&ex.nilpotents[i], nu) * &ex.components[i] / C64::new(fact, 0.0);
        phases.push(ex.centers[i].im);
        vectors.push(v);
        eigenvalues.push([ex.centers[i].re, ex.centers[i].im]);
    }
    if vectors.len() > 1 {
        let m = DMatrix::from_columns(&vectors);
        let (r, _) = rank_c(&m, 1e-10 * m.norm());
        if r < vectors.len() {
            log::warn!("limiting vectors are numerically dependent (rank {r} of {})", vectors.len());
        }
    }
    let generic_x = retained.iter().all(|k| *k)
        && ex
            .blocks
            .iter()
            .zip(&depth)
            .all(|(b, nu_i)| b.iter().max().is_some_and(|s| *nu_i + 1 == *s));
    let jordan_blocks = ex
        .centers
        .iter()
        .zip(&ex.blocks)
        .flat_map(|(c, sizes)| {
            sizes.iter().map(move |&size| JordanBlock {
                eigenvalue: [c.re, c.im],
                size,
            })
        })
        .collect();
    if ex.near_defective {
        log::warn!("near-defective spectrum: Jordan structure decisions are close to tolerance");
    }
    Ok(SpectralData {
        eta,
        nu,
        tau,
        phases,
        vectors,
        eigenvalues,
        jordan_blocks,
        generic_x,
        near_defective: ex.near_defective,
        expanded_point: y.as_slice().to_vec(),
        rho_lin,
    })
}

/// `t_mix = log(1/2eps)/(2 eta) + (nu/eta) log log(1/2eps) + tau`.
pub fn mixing_time(sd: &SpectralData, epsilon: f64) -> Result<f64> {
    mixing_time_from(sd.eta, sd.nu, sd.tau, epsilon)
}

pub fn mixing_time_from(eta: f64, nu: usize, tau: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Domain(format!("mixing time needs 0 < eps < 1/2, got {epsilon}")));
    }
    let l = (1.0 / (2.0 * epsilon)).ln();
    Ok(l / (2.0 * eta) + nu as f64 / eta * l.ln() + tau)
}

/// `v(t) = (t - tau)^nu e^{-eta (t - tau)} Sigma^{-1/2} Re sum_k e^{i theta_k (t - tau)} v_k`.
pub fn profile_vector(spec: &ModelSpec, sd: &SpectralData, t: f64) -> Result<DVector<f64>> {
    if t < sd.tau {
        return Err(Error::Domain(format!("profile defined for t >= tau = {}, got {t}", sd.tau)));
    }
    let s = t - sd.tau;
    let w = sym_inv_sqrt(&sigma_matrix(spec)?)?;
    let amp = s.powi(sd.nu as i32) * (-sd.eta * s).exp();
    Ok(w * sd.oscillating_sum(s) * amp)
}

/// `D^eps(t) = d_TV(N(v(t)/sqrt(2 eps), I), N(0, I))`.
pub fn profile_d(spec: &ModelSpec, sd: &SpectralData, t: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain("profile needs eps > 0".into()));
    }
    let v = profile_vector(spec, sd, t)?;
    Ok(tv_unit(&(v / (2.0 * epsilon).sqrt())).value)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProfileLambda {
    /// `2 int_0^{sqrt2 (1/2eta)^nu e^{-w eta}} phi`.
    pub printed: f64,
    /// Same with `sqrt 2` replaced by `r/2`; present when `r` is known.
    pub alternative: Option<f64>,
}

pub fn profile_lambda(sd: &SpectralData, w: f64, r: Option<f64>) -> ProfileLambda {
    let base = (1.0 / (2.0 * sd.eta)).powi(sd.nu as i32) * (-w * sd.eta).exp();
    // 2 int_0^u phi = erf(u / sqrt 2)
    let lam = |u: f64| erf(u / SQRT_2);
    ProfileLambda {
        printed: lam(SQRT_2 * base),
        alternative: r.map(|r| lam(0.5 * r * base)),
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LimitR {
    pub exists: bool,
    pub r: f64,
    /// `(max - min)/mean` of `|Sigma^{-1/2} Re sum_k e^{i theta_k t} v_k|` on the tail half.
    pub oscillation: f64,
}

/// Whether `|Sigma^{-1/2} Re sum_k e^{i theta_k t} v_k|` settles as `t -> infinity`.
pub fn profile_limit_r(spec: &ModelSpec, sd: &SpectralData, horizon: f64) -> Result<LimitR> {
    let w = sym_inv_sqrt(&sigma_matrix(spec)?)?;
    if sd.all_real() {
        let r = (&w * sd.oscillating_sum(0.0)).norm();
        return Ok(LimitR {
            exists: r > 0.0,
            r,
            oscillation: 0.0,
        });
    }
    let n = 20_000;
    let vals: Vec<f64> = (0..=n)
        .map(|i| 0.5 * horizon + 0.5 * horizon * i as f64 / n as f64)
        .map(|t| (&w * sd.oscillating_sum(t)).norm())
        .collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let osc = if mean > 0.0 { (max - min) / mean } else { f64::INFINITY };
    Ok(LimitR {
        exists: osc < 1e-6 && mean > 0.0,
        r: mean,
        oscillation: osc,
    })
}

/// `|(e^{eta s}/s^nu) e^{A s} y - Re sum_k e^{i theta_k s} v_k|` with `y` the
/// expanded point and `s` the time since `tau`.
pub fn linearized_decay_error(spec: &ModelSpec, sd: &SpectralData, s: f64) -> Result<f64> {
    let a = drift_matrix(spec, &DVector::zeros(spec.dim()));
    let y = DVector::from_column_slice(&sd.expanded_point);
    let lin = linalg::expm(&(a * s)) * y;
    let scale = (sd.eta * s).exp() / s.powi(sd.nu as i32);
    Ok((lin * scale - sd.oscillating_sum(s)).norm())
}

/// `d_TV(N(X_t, 2 eps Sigma_t), N(0, 2 eps Sigma))` at each time. Linear forces
/// use the closed forms of `X_t` and `Sigma_t`; others integrate both ODEs.
pub fn gaussian_tv_curve(
    spec: &ModelSpec,
    x: &DVector<f64>,
    epsilon: f64,
    times: &[f64],
    method: TvMethod,
) -> Result<Vec<TvValue>> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain("noise level must be positive".into()));
    }
    let d = spec.dim();
    let sigma = sigma_matrix(spec)?;
    let target = Gaussian::new(DVector::zeros(2 * d), sigma)?;
    let scale = 1.0 / (2.0 * epsilon).sqrt();
    let mut sorted: Vec<(usize, f64)> = times.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    if sorted.first().is_some_and(|(_, t)| *t < 0.0) {
        return Err(Error::Domain("times must be non-negative".into()));
    }
    let (means, covs): (Vec<DVector<f64>>, Vec<DMatrix<f64>>) = if spec.force.is_linear() {
        let a = drift_matrix(spec, &DVector::zeros(d));
        let mut ms = Vec::new();
        let mut cs = Vec::new();
        for (_, t) in &sorted {
            ms.push(linalg::expm(&(&a * *t)) * x);
            cs.push(linear_covariance(spec, *t)?);
        }
        (ms, cs)
    } else {
        let ts: Vec<f64> = sorted.iter().map(|p| p.1).collect();
        let path = covariance_at_times(spec, x, &ts, 1e-3)?;
        (path.states, path.covs)
    };
    let mut out = vec![None; times.len()];
    for (k, (idx, _)) in sorted.iter().enumerate() {
        // a singular Sigma_t (t = 0) puts all mass on a null set of the target
        if covs[k].clone().cholesky().is_none() {
            out[*idx] = Some(TvValue {
                value: 1.0,
                kind: TvKind::Exact,
            });
            continue;
        }
        let g = Gaussian::new(&means[k] * scale, covs[k].clone())?;
        out[*idx] = Some(tv_gaussian(&g, &target, method)?);
    }
    Ok(out.into_iter().map(|v| v.expect("every time filled")).collect())
}

/// Deterministic TV method suited to the phase-space dimension.
pub fn default_tv_method(dim2: usize, seed: u64) -> TvMethod {
    if dim2 <= 2 {
        TvMethod::Quadrature
    } else {
        TvMethod::MonteCarlo { n: 200_000, seed }
    }
}
