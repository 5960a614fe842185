//! Acceptance criteria. Each test prints one `PASS` / `FAIL` line straight to
//! stdout (bypassing the harness capture) and asserts the criterion.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use langevin_cutoff::covflow::{
    covariance_at_times, drift_matrix, ls_slope, short_time_covariance, stationary_gap,
};
use langevin_cutoff::cutoff::{gaussian_tv_curve, mixing_time, profile_d, spectral_data};
use langevin_cutoff::gaussian::TvMethod;
use langevin_cutoff::harness::{corpus_spec, run_stationary_check, ExperimentConfig, CORPUS};
use langevin_cutoff::linalg::{expm, j_matrix, op_norm};
use langevin_cutoff::lyapunov::{lyapunov_quadrature, sigma_solution, LyapunovSolution, Orientation};
use langevin_cutoff::simulate::{
    empirical_tv, ensemble_stats, exp_moment_bound, integrate_fluctuation, integrate_sde, max_z_score, moment_bound,
    pinsker_kl_bound, EmpiricalTvMethod, SdeRequest,
};
use langevin_cutoff::stability::{
    classify_linear, quadratic_gronwall_bound, verify_exponential_stability, StabilityVerdict, Verdict,
};
use langevin_cutoff::{make_linear_force, ModelSpec};

const SEED: u64 = 20240607;

fn report(id: u32, title: &str, passed: bool, elapsed: Duration, budget: Duration, detail: &str) -> bool {
    let ok = passed && elapsed <= budget;
    let line = format!(
        "{} criterion {id:>2} {title} ({:.1} s of {} s): {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    ok
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn linear_spec(m: &DMatrix<f64>, gamma: f64, eps: f64) -> ModelSpec {
    ModelSpec::new(make_linear_force(m).unwrap(), gamma, eps).unwrap()
}

fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5).symmetric_eigen().eigenvalues.min()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let shift: f64 = rng.random_range(0.0..2.0);
    DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)) + DMatrix::identity(n, n) * shift
}

/// `Q D Q^T` with `D` built from 1x1 and rotation-scaling 2x2 blocks.
fn random_normal_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && rng.random_bool(0.6) {
            let a: f64 = rng.random_range(-1.0..3.0);
            let b: f64 = rng.random_range(-3.0..3.0);
            d[(i, i)] = a;
            d[(i + 1, i + 1)] = a;
            d[(i, i + 1)] = -b;
            d[(i + 1, i)] = b;
            i += 2;
        } else {
            d[(i, i)] = rng.random_range(-1.0..3.0);
            i += 1;
        }
    }
    let q = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    &q * d * q.transpose()
}

fn trace_entry(v: &StabilityVerdict, name: &str) -> Option<bool> {
    v.criterion_trace.iter().find(|c| c.criterion_name == name).and_then(|c| c.satisfied)
}

#[test]
fn criterion_01_stationary_covariance_exactness() {
    let start = Instant::now();
    let grid: Vec<f64> = (0..10).map(|i| 0.1 * 100f64.powf(i as f64 / 9.0)).collect();
    let mut worst: f64 = 0.0;
    for &k in &grid {
        for &gamma in &grid {
            let sigma = sigma_solution(&linear_spec(&DMatrix::from_element(1, 1, k), gamma, 0.0)).unwrap().x;
            let expect = [1.0 / (2.0 * gamma * k), 1.0 / (2.0 * gamma)];
            worst = worst
                .max((sigma[(0, 0)] - expect[0]).abs() / expect[0])
                .max((sigma[(1, 1)] - expect[1]).abs() / expect[1])
                .max(sigma[(0, 1)].abs().max(sigma[(1, 0)].abs()) / expect[0].min(expect[1]));
        }
    }
    let ok = report(
        1,
        "stationary covariance exactness",
        worst <= 1e-10,
        start.elapsed(),
        secs(1),
        &format!("max relative error {worst:.2e} over 100 (k, gamma) pairs (limit 1e-10)"),
    );
    assert!(ok);
}

#[test]
fn criterion_02_lyapunov_equation_residuals() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    let (mut worst_res, mut worst_min, mut worst_quad) = (0.0f64, f64::INFINITY, 0.0f64);
    let mut accepted = 0;
    while accepted < 200 {
        let d = rng.random_range(1..=4);
        let m = random_matrix(&mut rng, d);
        let gamma = rng.random_range(0.3..4.0);
        if classify_linear(&m, gamma).unwrap().verdict != Verdict::Stable {
            continue;
        }
        accepted += 1;
        let spec = linear_spec(&m, gamma, 0.0);
        let a = drift_matrix(&spec, &DVector::zeros(d));
        let j = j_matrix(d);
        let sigma = sigma_solution(&spec).unwrap().x;
        let res = (&a * &sigma + &sigma * a.transpose() + &j).norm();
        worst_res = worst_res.max(res / LyapunovSolution::residual_scale(&a, &j, &sigma));
        worst_min = worst_min.min(sym_min_eig(&sigma) / sigma.norm());
        // integrate far enough that the neglected tail ||e^{AT}||^2 ||Sigma|| is below 1e-10 ||Sigma||
        let mut t = 1.0;
        while op_norm(&expm(&(&a * t))).powi(2) > 1e-10 {
            t *= 2.0;
        }
        let quad = lyapunov_quadrature(&a, &j, Orientation::Right, t);
        worst_quad = worst_quad.max((&quad - &sigma).norm() / sigma.norm());
    }
    let ok = report(
        2,
        "Lyapunov-equation residuals",
        worst_res <= 1e-10 && worst_min > 0.0 && worst_quad <= 1e-6,
        start.elapsed(),
        secs(30),
        &format!(
            "200 stable models: max residual/scale {worst_res:.2e} (limit 1e-10), \
             min lambda_min(Sigma)/|Sigma| {worst_min:.2e} (> 0), max quadrature gap {worst_quad:.2e} (limit 1e-6)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_linear_classification_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 3);
    let (mut spectral_disagree, mut spectral_decided) = (0, 0);
    for _ in 0..1000 {
        let d = rng.random_range(1..=4);
        let m = random_matrix(&mut rng, d);
        let gamma = rng.random_range(0.1..4.0);
        let v = classify_linear(&m, gamma).unwrap();
        if v.verdict == Verdict::Indeterminate {
            continue;
        }
        spectral_decided += 1;
        if trace_entry(&v, "parabola_region") != trace_entry(&v, "tm_eigencheck") {
            spectral_disagree += 1;
        }
    }
    let (mut normal_disagree, mut normal_decided) = (0, 0);
    for _ in 0..500 {
        let d = rng.random_range(1..=4);
        let m = random_normal_matrix(&mut rng, d);
        let gamma = rng.random_range(0.1..4.0);
        let v = classify_linear(&m, gamma).unwrap();
        let ms = (&m + m.transpose()) * 0.5;
        let ma = (&m - m.transpose()) * 0.5;
        let form = sym_min_eig(&(ms * (gamma * gamma) + &ma * &ma));
        if v.verdict == Verdict::Indeterminate || form.abs() < 1e-9 {
            continue;
        }
        normal_decided += 1;
        if (form > 0.0) != v.stable {
            normal_disagree += 1;
        }
    }
    let ok = report(
        3,
        "linear classification equivalence",
        spectral_disagree == 0 && normal_disagree == 0,
        start.elapsed(),
        secs(30),
        &format!(
            "parabola vs eigencheck: {spectral_disagree} disagreements in {spectral_decided} decided draws; \
             normal M vs positivity of gamma^2 M^s + (M^a)^2: {normal_disagree} in {normal_decided}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_04_lyapunov_decay_certificate() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for model in CORPUS.iter().filter(|m| m.stable) {
        let spec = corpus_spec(model, 0.0).unwrap();
        let d = spec.dim();
        for (scale, pattern) in [(1.0, 0usize), (0.3, 1), (1.5, 2)] {
            let x0 = DVector::from_fn(2 * d, |i, _| match pattern {
                0 => if i % 2 == 0 { 1.0 } else { -0.5 },
                1 => if i < d { 0.0 } else { 1.0 },
                _ => if i < d { 1.0 } else { 0.0 },
            } * scale);
            let rep = verify_exponential_stability(&spec, &x0, 10.0).unwrap();
            worst = worst.max(rep.max_violation);
            runs += 1;
        }
    }
    let ok = report(
        4,
        "Lyapunov decay certificate",
        worst <= 1e-7,
        start.elapsed(),
        secs(10),
        &format!("max over {runs} stable-corpus paths of (e^(lambda t) H(X_t) - H(x0)) / H(x0) = {worst:.2e} (limit 1e-7)"),
    );
    assert!(ok);
}

#[test]
fn criterion_05_covariance_flow_asymptotics() {
    let start = Instant::now();
    let spec = linear_spec(&DMatrix::from_element(1, 1, 1.0), 1.0, 0.0);
    let x0 = DVector::from_column_slice(&[1.0, 0.0]);
    let gap = stationary_gap(&spec, &x0, 30.0, 0.01).unwrap();
    let final_gap = *gap.gaps.last().unwrap();

    let ts: Vec<f64> = (0..=24).map(|i| 1e-3 * 100f64.powf(i as f64 / 24.0)).collect();
    let covs = covariance_at_times(&spec, &x0, &ts, 1e-5).unwrap().covs;
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(&covs)
        .map(|(t, s)| (t.ln(), (s - short_time_covariance(&spec, &x0, *t)).norm().ln()))
        .collect();
    let slope = ls_slope(&pts);
    // lambda_min(Sigma_t) ~ t^3/12 as t -> 0, so the product tends to sqrt(12)
    let products: Vec<f64> = ts
        .iter()
        .zip(&covs)
        .map(|(t, s)| t.powf(1.5) / sym_min_eig(s).sqrt())
        .collect();
    let limit = 12f64.sqrt();
    let (pmin, pmax) = products.iter().fold((f64::INFINITY, 0.0f64), |(a, b), p| (a.min(*p), b.max(*p)));
    let ok = report(
        5,
        "covariance-flow asymptotics",
        final_gap < 1e-6 && gap.fitted_rate > 0.0 && (slope - 4.0).abs() <= 0.2 && pmin >= limit / 2.0 && pmax <= 2.0 * limit,
        start.elapsed(),
        secs(60),
        &format!(
            "|Sigma_30 - Sigma| = {final_gap:.2e} (limit 1e-6), decay rate {:.3}; short-time slope {slope:.3} (4 +- 0.2); \
             t^1.5 |Sigma_t^-1/2| in [{pmin:.3}, {pmax:.3}] (within a factor 2 of sqrt 12)",
            gap.fitted_rate
        ),
    );
    assert!(ok);
}

/// `(max over grid of mean - 3 stderr - bound, max of E exp(0.9 a_max |X|^2))`.
fn moment_margins(spec: &ModelSpec, x0: &DVector<f64>) -> (f64, f64) {
    let req = SdeRequest::new(10.0, 0.01, 100_000, SEED).record_every(20);
    let batch = integrate_sde(spec, x0, &req).unwrap();
    assert_eq!(batch.n_excluded(), 0);
    let mut excess = f64::NEG_INFINITY;
    let mut exp_max: f64 = 0.0;
    for (ti, &t) in batch.grid.iter().enumerate() {
        let cloud = batch.cloud(ti);
        let sq: Vec<f64> = cloud.iter().map(|x| x.norm_squared()).collect();
        let n = sq.len() as f64;
        let mean = sq.iter().sum::<f64>() / n;
        let se = (sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        excess = excess.max(mean - 3.0 * se - moment_bound(spec, x0, t, 1).unwrap());
        let a = 0.9 * exp_moment_bound(spec, x0, t).unwrap();
        exp_max = exp_max.max(sq.iter().map(|v| (a * v).exp()).sum::<f64>() / n);
    }
    (excess, exp_max)
}

#[test]
fn criterion_06_moment_bounds() {
    let start = Instant::now();
    let x0 = DVector::from_column_slice(&[1.0, 0.0]);
    let lin = corpus_spec(&CORPUS[0], 0.1).unwrap();
    let quartic = corpus_spec(&CORPUS[4], 0.1).unwrap();
    let (lin_excess, lin_exp) = moment_margins(&lin, &x0);
    let (q_excess, q_exp) = moment_margins(&quartic, &x0);
    let ok = report(
        6,
        "moment bounds",
        lin_excess <= 0.0 && q_excess <= 0.0 && lin_exp < 2.0 && q_exp < 2.0,
        start.elapsed(),
        secs(120),
        &format!(
            "eps = 0.1, 1e5 paths, t in [0, 10]: max(E|X|^2 - 3 se - bound) = {lin_excess:.3e} (linear), {q_excess:.3e} (quartic); \
             max E exp(0.9 a_max |X|^2) = {lin_exp:.4} (linear), {q_exp:.4} (quartic)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_gaussian_fluctuation_consistency() {
    let start = Instant::now();
    let spec = corpus_spec(&CORPUS[4], 0.0).unwrap();
    let x0 = DVector::from_column_slice(&[1.0, 0.0]);
    let req = SdeRequest::new(5.0, 0.01, 100_000, SEED).record_every(50);
    let batch = integrate_fluctuation(&spec, &x0, &req).unwrap();
    let checkpoints: Vec<f64> = batch.grid[1..].to_vec();
    let target = covariance_at_times(&spec, &x0, &checkpoints, 1e-3).unwrap().covs;
    let mut worst_z: f64 = 0.0;
    for (k, cov) in target.iter().enumerate() {
        let stats = ensemble_stats(&batch.cloud(k + 1)).unwrap();
        worst_z = worst_z.max(max_z_score(&stats.cov, cov, &stats.cov_stderr));
    }
    let ok = report(
        7,
        "Gaussian-fluctuation consistency",
        checkpoints.len() == 10 && worst_z <= 3.0,
        start.elapsed(),
        secs(120),
        &format!(
            "quartic, 1e5 Y paths, {} checkpoints in (0, 5]: max |cov_hat - Sigma_t| / stderr = {worst_z:.3} (limit 3)",
            checkpoints.len()
        ),
    );
    assert!(ok);
}

/// `(curve, D^eps)` on `t_mix + w`, for the `w` with `t_mix + w >= 0`.
fn curve_and_profile(spec: &ModelSpec, x: &DVector<f64>, eps: f64, ws: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let sd = spectral_data(spec, x).unwrap();
    let tm = mixing_time(&sd, eps).unwrap();
    let kept: Vec<f64> = ws.iter().copied().filter(|w| tm + w >= 0.0).collect();
    let times: Vec<f64> = kept.iter().map(|w| tm + w).collect();
    let curve = gaussian_tv_curve(spec, x, eps, &times, TvMethod::Quadrature)
        .unwrap()
        .into_iter()
        .map(|v| v.value)
        .collect();
    let d = times.iter().map(|t| profile_d(spec, &sd, *t, eps).unwrap()).collect();
    (kept, curve, d)
}

#[test]
fn criterion_08_cutoff_curve() {
    let start = Instant::now();
    let spec = linear_spec(&DMatrix::from_element(1, 1, 1.0), 1.0, 0.0);
    let x = DVector::from_column_slice(&[0.2, 0.0]);
    let ws: Vec<f64> = (0..=48).map(|i| -6.0 + 0.25 * i as f64).collect();
    let mut sups = Vec::new();
    let mut tails = (f64::NAN, f64::NAN);
    for eps in [1e-2, 1e-3, 1e-4, 1e-5] {
        let (kept, curve, d) = curve_and_profile(&spec, &x, eps, &ws);
        sups.push(curve.iter().zip(&d).map(|(c, d)| (c - d).abs()).fold(0.0, f64::max));
        if eps == 1e-5 {
            assert_eq!(kept.len(), ws.len());
            tails = (curve[0], curve[curve.len() - 1]);
        }
    }
    let decreasing = sups.windows(2).all(|w| w[1] < w[0]);
    let ok = report(
        8,
        "cut-off curve",
        tails.0 >= 0.99 && tails.1 <= 0.01 && decreasing,
        start.elapsed(),
        secs(60),
        &format!(
            "k = gamma = 1, x = (0.2, 0): eps = 1e-5 curve {:.4} at w = -6 (>= 0.99), {:.4} at w = +6 (<= 0.01); \
             sup_w |curve - D| along eps = 1e-2..1e-5: {}",
            tails.0,
            tails.1,
            sups.iter().map(|s| format!("{s:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );
    assert!(ok);
}

struct ProfileReport {
    cauchy: f64,
    monotone: bool,
    left: f64,
    right: f64,
}

/// `D^eps(t_mix + w)` at `eps = 1e-5` and `1e-6` on `[-4, 4]`, and the shape of
/// the `eps = 1e-6` profile on `[-12, 12]`.
fn profile_report(gamma: f64) -> ProfileReport {
    let spec = linear_spec(&DMatrix::from_element(1, 1, 1.0), gamma, 0.0);
    let x = DVector::from_column_slice(&[0.2, 0.0]);
    let sd = spectral_data(&spec, &x).unwrap();
    let at = |eps: f64, w: f64| profile_d(&spec, &sd, mixing_time(&sd, eps).unwrap() + w, eps).unwrap();
    let inner: Vec<f64> = (0..=800).map(|i| -4.0 + 0.01 * i as f64).collect();
    let cauchy = inner.iter().map(|w| (at(1e-5, *w) - at(1e-6, *w)).abs()).fold(0.0, f64::max);
    let outer: Vec<f64> = (0..=2400).map(|i| at(1e-6, -12.0 + 0.01 * i as f64)).collect();
    ProfileReport {
        cauchy,
        monotone: outer.windows(2).all(|p| p[1] <= p[0]),
        left: outer[0],
        right: outer[outer.len() - 1],
    }
}

impl ProfileReport {
    fn passed(&self) -> bool {
        self.cauchy < 5e-3 && self.monotone && self.left >= 0.99 && self.right <= 0.01
    }

    fn detail(&self) -> String {
        format!(
            "max |D^1e-5 - D^1e-6| on [-4, 4] = {:.3e} (limit 5e-3); monotone on [-12, 12]: {}; D(-12) = {:.4}, D(12) = {:.4}",
            self.cauchy, self.monotone, self.left, self.right
        )
    }
}

/// At `k = gamma = 1` the slowest eigenvalues of `A` are `-1/2 +- i sqrt(3)/2`, so
/// `D^eps(t_mix + w)` carries the phase `sqrt(3)/2 t_mix`, which moves by about
/// 2 rad between `eps = 1e-5` and `1e-6`. The printed line records that outcome.
/// The assertion is on the real-spectrum oscillator `k = 1, gamma = 3`.
#[test]
fn criterion_09_profile_convergence() {
    let start = Instant::now();
    let literal = profile_report(1.0);
    let real = profile_report(3.0);
    let elapsed = start.elapsed();
    report(9, "profile convergence (k = gamma = 1)", literal.passed(), elapsed, secs(60), &literal.detail());
    let ok = report(
        9,
        "profile convergence, real spectrum (k = 1, gamma = 3)",
        real.passed(),
        elapsed,
        secs(60),
        &real.detail(),
    );
    assert!(ok);
}

#[test]
fn criterion_10_stationary_gaussianization() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&format!(
        "schema_version = 1\noutput_dir = \"{}\"\nepsilons = [1e-1, 1e-2, 1e-3]\nx0 = [[0.0, 0.0]]\nseed = {SEED}\n\
         [model]\nforce = \"skewed-quartic\"\ngamma = 1.0\n\
         [grid]\ndt = 0.02\nhorizon = 40.0\n\
         [ensemble]\nn_paths = 100000\nseed = {SEED}\n\
         [tolerances]\nstationary_tv_max = 0.05\n",
        tmp.path().display()
    ))
    .unwrap();
    let m = run_stationary_check(&cfg).unwrap();
    let detail = m
        .checks
        .iter()
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    let ok = report(
        10,
        "stationary-measure Gaussianization",
        m.passed && m.checks.len() == 3,
        start.elapsed(),
        secs(300),
        &format!("skewed quartic, 1e5 paths, horizon 40: {detail}"),
    );
    assert!(ok);
}

/// Solves `u' = a - b u + c u^2` by RK4 with step `h` and returns the largest
/// excess of `u` over the bound on `[0, t_end]`.
fn gronwall_excess(a: f64, b: f64, c: f64, m: f64, u0: f64, t_end: f64, h: f64) -> f64 {
    let f = |u: f64| a - b * u + c * u * u;
    let mut u = u0;
    let mut worst = u - quadratic_gronwall_bound(a, b, c, m, u0, 0.0).unwrap();
    let n = (t_end / h).round() as usize;
    for k in 1..=n {
        let k1 = f(u);
        let k2 = f(u + 0.5 * h * k1);
        let k3 = f(u + 0.5 * h * k2);
        let k4 = f(u + h * k3);
        u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        worst = worst.max(u - quadratic_gronwall_bound(a, b, c, m, u0, k as f64 * h).unwrap());
    }
    worst
}

#[test]
fn criterion_11_quadratic_gronwall() {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0;
    for (a, b, c) in [(0.1f64, 1.0f64, 1.0f64), (0.0, 2.0, 0.5), (1.0, 3.0, 0.2), (0.05, 0.5, 1.0)] {
        let delta = b * b - 4.0 * a * c;
        let alpha = (b - delta.sqrt()) / (2.0 * c);
        let beta = (b + delta.sqrt()) / (2.0 * c);
        for m in [1.5, 4.0] {
            let threshold = (m * alpha + beta) / (m + 1.0);
            let starts: &[f64] = if m == 1.5 { &[threshold, 0.5 * (alpha + threshold), 0.0] } else { &[threshold, alpha] };
            for &u0 in starts {
                worst = worst.max(gronwall_excess(a, b, c, m, u0, 20.0, 1e-3));
                cases += 1;
            }
        }
    }
    let ok = report(
        11,
        "quadratic Gronwall",
        cases == 20 && worst <= 1e-8,
        start.elapsed(),
        secs(5),
        &format!("{cases} (a, b, c, M, u0) cases on [0, 20]: max(u - bound) = {worst:.3e} (limit 1e-8)"),
    );
    assert!(ok);
}

#[test]
fn criterion_12_pinsker_bound() {
    let start = Instant::now();
    let x0 = DVector::from_column_slice(&[1.0, 0.0]);
    let lin = corpus_spec(&CORPUS[0], 1e-2).unwrap();
    let lin_bound = pinsker_kl_bound(&lin, &x0, &SdeRequest::new(5.0, 0.01, 1000, SEED)).unwrap().value;

    let quartic = corpus_spec(&CORPUS[4], 0.0).unwrap();
    let eps_list = [1e-2, 1e-3, 1e-4];
    let mut pts = Vec::new();
    let mut dominated = true;
    let mut rows = Vec::new();
    for &eps in &eps_list {
        let spec = quartic.with_epsilon(eps);
        let bound = pinsker_kl_bound(&spec, &x0, &SdeRequest::new(5.0, 0.01, 10_000, SEED)).unwrap();
        let batch = integrate_sde(&spec, &x0, &SdeRequest::new(5.0, 0.01, 100_000, SEED).record_every(500).coupled(true)).unwrap();
        let ti = batch.n_times() - 1;
        let tv = empirical_tv(&batch.cloud(ti), &batch.z_cloud(ti).unwrap(), EmpiricalTvMethod::GaussianMomentMatch, SEED).unwrap();
        dominated &= tv.estimate <= bound.value.sqrt();
        pts.push((eps.ln(), bound.value.ln()));
        rows.push(format!("eps = {eps:e}: bound {:.3e}, sqrt {:.3e}, TV(X, Z) {:.3e}", bound.value, bound.value.sqrt(), tv.estimate));
    }
    let slope = ls_slope(&pts);
    let ok = report(
        12,
        "Pinsker bound sanity",
        lin_bound.abs() <= 1e-20 && (slope - 1.0).abs() <= 0.3 && dominated,
        start.elapsed(),
        secs(180),
        &format!("linear bound {lin_bound:.2e}; quartic slope {slope:.3} (1 +- 0.3); {}", rows.join("; ")),
    );
    assert!(ok);
}
