//! Invariant checks of every module on a fixed corpus of models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{csv_string, CheckResult, Cell, RunDir, RunManifest};
use crate::covflow::{covariance_at_times, drift_matrix, integrate_covariance};
use crate::cutoff::{gaussian_tv_curve, linearized_decay_error, mixing_time, profile_d, spectral_data};
use crate::error::{Error, Result};
use crate::gaussian::{tv_gaussian, tv_reduce, tv_unit_norm, Gaussian, TvMethod};
use crate::linalg::{expm, j_matrix, min_sym_eig, null_space_c, skew_part, spectral_abscissa, sym_part, to_complex, C64};
use crate::lyapunov::{
    gamma_matrix, lyapunov_quadrature, residual, sigma_matrix, sigma_solution, solve_permuted, LyapunovSolution,
    Orientation,
};
use crate::model::{
    ball_samples, builtin_force, check_assumption_main, linear_assumption_constants, make_linear_force, ModelSpec,
};
use crate::simulate::{empirical_tv, integrate_sde, EmpiricalTvMethod, Scheme, SdeRequest};
use crate::stability::{classify_linear, verify_exponential_stability, Verdict};

/// Named corpus entry: builtin field, friction, whether it is expected stable,
/// and explicit `(alpha, beta)` where they cannot be derived.
pub struct CorpusModel {
    pub name: &'static str,
    pub force: &'static str,
    pub gamma: f64,
    pub stable: bool,
    pub assumption: Option<(f64, f64)>,
}

pub const CORPUS: &[CorpusModel] = &[
    CorpusModel { name: "linear-underdamped", force: "harmonic", gamma: 1.0, stable: true, assumption: None },
    CorpusModel { name: "linear-critical", force: "harmonic", gamma: 2.0, stable: true, assumption: None },
    CorpusModel { name: "linear-nongradient", force: "rotation-mild", gamma: 3.0, stable: true, assumption: None },
    CorpusModel { name: "linear-unstable", force: "rotation-unstable", gamma: 1.0, stable: false, assumption: None },
    CorpusModel { name: "quartic-1d", force: "quartic", gamma: 1.0, stable: true, assumption: None },
    CorpusModel { name: "nongradient-2d", force: "rotating-quartic", gamma: 2.0, stable: true, assumption: Some((0.35, 1.5)) },
];

pub fn corpus_spec(m: &CorpusModel, epsilon: f64) -> Result<ModelSpec> {
    let spec = ModelSpec::new(builtin_force(m.force)?, m.gamma, epsilon)?;
    if let Some((alpha, beta)) = m.assumption {
        spec.with_assumption(alpha, beta)
    } else if m.stable {
        spec.with_derived_assumption()
    } else {
        Ok(spec)
    }
}

fn stable_corpus(epsilon: f64) -> Result<Vec<(&'static str, ModelSpec)>> {
    CORPUS
        .iter()
        .filter(|m| m.stable)
        .map(|m| Ok((m.name, corpus_spec(m, epsilon)?)))
        .collect()
}

fn gauss_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal))
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gauss_matrix(rng, n).qr().q()
}

/// `Q D Q^T` with `D` block diagonal (1x1 and rotation-scaling 2x2 blocks).
pub fn random_normal_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
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
    let q = orthogonal(rng, n);
    &q * d * q.transpose()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gauss_matrix(rng, n) + DMatrix::identity(n, n) * rng.random_range(0.0..2.0)
}

fn guarded(name: &str, f: impl FnOnce() -> Result<Vec<CheckResult>>) -> Vec<CheckResult> {
    match f() {
        Ok(v) => v,
        Err(e) => vec![CheckResult::failed(name, &e)],
    }
}

/// `||A Sigma + Sigma A^T + J||_F <= 1e-10 scale` for a candidate `Sigma`.
pub fn sigma_residual_check(spec: &ModelSpec, sigma: &DMatrix<f64>) -> Result<CheckResult> {
    let a = drift_matrix(spec, &DVector::zeros(spec.dim()));
    let j = j_matrix(spec.dim());
    let res = residual(&a, &j, sigma, Orientation::Right).norm();
    let limit = 1e-10 * LyapunovSolution::residual_scale(&a, &j, sigma);
    Ok(CheckResult::at_most("sigma_residual", res, limit))
}

// ---- model ----

fn check_fd_order() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for name in ["quartic", "quartic-2d", "skewed-quartic", "rotating-quartic"] {
        let f = builtin_force(name)?;
        let pts = ball_samples(f.dim(), 1.5, 16);
        let ratio = f.jacobian_fd_error(&pts, 1e-2) / f.jacobian_fd_error(&pts, 5e-3);
        out.push(CheckResult::new(
            format!("model/fd_second_order[{name}]"),
            (3.5..=4.5).contains(&ratio),
            0.5 - (ratio - 4.0).abs(),
            format!("error ratio on halving h = {ratio:.4}"),
        ));
    }
    Ok(out)
}

fn check_linear_assumption_iff_stable(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut mismatches = 0;
    let mut sample_failures = 0;
    let mut tested = 0;
    for _ in 0..60 {
        let n = rng.random_range(1..=3);
        let m = random_normal_matrix(rng, n);
        let gamma = rng.random_range(0.3..3.0);
        let v = classify_linear(&m, gamma)?;
        if v.verdict == Verdict::Indeterminate {
            continue;
        }
        tested += 1;
        let consts = linear_assumption_constants(&m, gamma);
        if consts.is_some() != v.stable {
            mismatches += 1;
        }
        if let Some((alpha, beta)) = consts {
            let spec = ModelSpec::new(make_linear_force(&m)?, gamma, 0.0)?.with_assumption(alpha, beta)?;
            if !check_assumption_main(&spec, 3.0, 200)?.holds_on_samples {
                sample_failures += 1;
            }
        }
    }
    Ok(vec![CheckResult::new(
        "model/linear_assumption_iff_stable",
        mismatches == 0 && sample_failures == 0,
        -((mismatches + sample_failures) as f64),
        format!("{tested} normal draws: {mismatches} verdict mismatches, {sample_failures} sampled-assumption failures"),
    )])
}

// ---- linear stability ----

fn criterion(v: &crate::stability::StabilityVerdict, name: &str) -> Option<bool> {
    v.criterion_trace.iter().find(|c| c.criterion_name == name).and_then(|c| c.satisfied)
}

fn check_spectral_consistency(rng: &mut ChaCha8Rng, n_draws: usize) -> Result<Vec<CheckResult>> {
    let mut disagreements = 0;
    let mut compared = 0;
    for _ in 0..n_draws {
        let n = rng.random_range(1..=4);
        let m = random_matrix(rng, n);
        let gamma = rng.random_range(0.1..4.0);
        let v = classify_linear(&m, gamma)?;
        if v.verdict == Verdict::Indeterminate {
            continue;
        }
        compared += 1;
        if criterion(&v, "parabola_region") != criterion(&v, "tm_eigencheck") {
            disagreements += 1;
        }
    }
    Ok(vec![CheckResult::new(
        "linear_stability/parabola_vs_eigencheck",
        disagreements == 0,
        -(disagreements as f64),
        format!("{disagreements} disagreements in {compared} decided draws"),
    )])
}

/// `<C u, u> + <C v, v>` for `C = M^a M^s - M^s M^a` and every unit eigenvector `u + i v` of `M`.
fn commutator_form_min(m: &DMatrix<f64>) -> f64 {
    let ms = sym_part(m);
    let ma = skew_part(m);
    let c = to_complex(&(&ma * &ms - &ms * &ma));
    let mc = to_complex(m);
    let n = m.nrows();
    let mut worst = f64::INFINITY;
    for mu in crate::linalg::complex_eigenvalues(m) {
        let shifted = &mc - DMatrix::<C64>::identity(n, n) * mu;
        let ns = null_space_c(&shifted, 1e-8 * (1.0 + m.norm()));
        for k in 0..ns.ncols() {
            let w = ns.column(k).into_owned();
            let w = &w / C64::new(w.norm(), 0.0);
            let val = (w.adjoint() * &c * &w)[(0, 0)].re;
            worst = worst.min(val);
        }
    }
    worst
}

fn check_commutator_inequality(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let n = rng.random_range(2..=4);
        let m = random_matrix(rng, n);
        worst = worst.min(commutator_form_min(&m) / (1.0 + m.norm().powi(2)));
    }
    Ok(vec![CheckResult::at_least("linear_stability/eigenvector_commutator_form", worst, -1e-9)])
}

fn check_normal_and_sufficient(rng: &mut ChaCha8Rng, n_draws: usize) -> Result<Vec<CheckResult>> {
    let mut normal_mismatch = 0;
    let mut normal_tested = 0;
    for _ in 0..n_draws {
        let n = rng.random_range(1..=4);
        let m = random_normal_matrix(rng, n);
        let gamma = rng.random_range(0.1..4.0);
        let v = classify_linear(&m, gamma)?;
        let suff = min_sym_eig(&(sym_part(&m) * (gamma * gamma) + skew_part(&m) * skew_part(&m)));
        if v.verdict == Verdict::Indeterminate || suff.abs() < 1e-9 {
            continue;
        }
        normal_tested += 1;
        if (suff > 0.0) != v.stable {
            normal_mismatch += 1;
        }
    }
    let mut counterexamples = 0;
    let mut suff_cases = 0;
    for _ in 0..n_draws {
        let n = rng.random_range(1..=4);
        let m = random_matrix(rng, n);
        let gamma = rng.random_range(0.1..4.0);
        let suff = min_sym_eig(&(sym_part(&m) * (gamma * gamma) + skew_part(&m) * skew_part(&m)));
        if suff > 1e-9 {
            suff_cases += 1;
            if classify_linear(&m, gamma)?.verdict == Verdict::Unstable {
                counterexamples += 1;
            }
        }
    }
    Ok(vec![
        CheckResult::new(
            "linear_stability/normal_equivalence",
            normal_mismatch == 0,
            -(normal_mismatch as f64),
            format!("{normal_mismatch} mismatches in {normal_tested} normal draws"),
        ),
        CheckResult::new(
            "linear_stability/sufficient_condition",
            counterexamples == 0,
            -(counterexamples as f64),
            format!("{counterexamples} unstable verdicts among {suff_cases} draws with gamma^2 M^s + (M^a)^2 > 0"),
        ),
    ])
}

fn check_lyapunov_decay() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec) in stable_corpus(0.0)? {
        let d = spec.dim();
        let x0 = DVector::from_fn(2 * d, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 });
        let rep = verify_exponential_stability(&spec, &x0, 10.0)?;
        out.push(CheckResult::new(
            format!("linear_stability/weighted_lyapunov_decay[{name}]"),
            rep.monotone,
            1e-7 - rep.max_violation.max(rep.max_step_increase),
            format!("max relative violation {:.3e}", rep.max_violation.max(rep.max_step_increase)),
        ));
    }
    Ok(out)
}

// ---- matrix equations ----

fn check_lyapunov_solutions() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec) in stable_corpus(0.0)? {
        let a = drift_matrix(&spec, &DVector::zeros(spec.dim()));
        let sol = sigma_solution(&spec)?;
        let n = a.nrows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let xp = solve_permuted(&a, &j_matrix(spec.dim()), Orientation::Right, &perm)?;
        let rel = (&xp - &sol.x).norm() / sol.x.norm();
        out.push(CheckResult::at_most(format!("matrix_eq/permuted_uniqueness[{name}]"), rel, 1e-10));
        let g = gamma_matrix(&a)?;
        let pd = sol.min_eig.min(min_sym_eig(&g.gamma));
        out.push(CheckResult::new(
            format!("matrix_eq/sigma_gamma_positive[{name}]"),
            pd > 0.0,
            pd,
            format!("min(lambda_min(Sigma), lambda_min(Gamma)) = {pd:.3e}"),
        ));
        let mut r = sigma_residual_check(&spec, &sol.x)?;
        r.name = format!("matrix_eq/sigma_residual[{name}]");
        out.push(r);
        // quadrature tail decays like e^{2 abscissa T}
        let rate_expected = 2.0 * spectral_abscissa(&a).abs();
        let ts: Vec<f64> = (0..40).map(|k| (4.0 + 0.5 * k as f64) / rate_expected).collect();
        let pts: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| (t, (&sol.x - lyapunov_quadrature(&a, &j_matrix(spec.dim()), Orientation::Right, t)).norm()))
            .filter(|p| p.1 > 1e-13 * sol.x.norm())
            .map(|(t, e)| (t, e.ln()))
            .collect();
        let rate = -crate::covflow::ls_slope(&pts);
        let rel_err = (rate - rate_expected).abs() / rate_expected;
        out.push(CheckResult::new(
            format!("matrix_eq/quadrature_decay_rate[{name}]"),
            pts.len() >= 5 && rel_err <= 0.2,
            0.2 - rel_err,
            format!("fitted {rate:.4}, expected {rate_expected:.4} from {} points", pts.len()),
        ));
    }
    // tamper: a perturbed Sigma must fail the residual invariant
    let spec = corpus_spec(&CORPUS[0], 0.0)?;
    let tampered = sigma_matrix(&spec)? + DMatrix::from_element(2, 2, 1e-3);
    let r = sigma_residual_check(&spec, &tampered)?;
    out.push(CheckResult::new(
        "matrix_eq/tamper_detected",
        !r.passed,
        -r.margin,
        format!("perturbed Sigma residual check: {}", r.detail),
    ));
    Ok(out)
}

// ---- Gaussian TV ----

fn random_gaussian_2d(rng: &mut ChaCha8Rng) -> Result<Gaussian> {
    let m = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
    let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let c = &l * l.transpose() + DMatrix::identity(2, 2) * 0.2;
    Gaussian::new(m, c)
}

fn check_tv_properties(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let g: Vec<Gaussian> = (0..3).map(|_| random_gaussian_2d(rng)).collect::<Result<_>>()?;
        let d = |a: &Gaussian, b: &Gaussian| tv_gaussian(a, b, TvMethod::Quadrature).map(|v| v.value);
        let slack = d(&g[0], &g[1])? + d(&g[1], &g[2])? - d(&g[0], &g[2])?;
        worst = worst.min(slack);
    }
    let mut monotone = true;
    let mut bound_gap = f64::INFINITY;
    let mut prev = -1.0;
    for k in 1..=400 {
        let t = tv_unit_norm(k as f64 * 0.02);
        monotone &= t.value > prev;
        prev = t.value;
        bound_gap = bound_gap.min(t.linear_bound - t.value);
    }
    let canon_m = DVector::from_column_slice(&[0.3, -1.2]);
    let canon_c = DMatrix::from_row_slice(2, 2, &[1.7, 0.2, 0.2, 0.6]);
    let (m2, c2) = tv_reduce(&Gaussian::new(canon_m.clone(), canon_c.clone())?, &Gaussian::standard(2))?;
    let idem = (m2 - canon_m).norm() + (c2 - canon_c).norm();
    Ok(vec![
        CheckResult::at_least("gaussian_tv/triangle_inequality", worst, -1e-9),
        CheckResult::new("gaussian_tv/tv_unit_increasing", monotone, 0.0, "strictly increasing on (0, 8]"),
        CheckResult::at_least("gaussian_tv/tv_unit_linear_bound", bound_gap, 0.0),
        CheckResult::at_most("gaussian_tv/reduction_idempotent", idem, 1e-14),
    ])
}

// ---- covariance flow ----

fn check_covflow() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec) in stable_corpus(0.0)? {
        let d = spec.dim();
        let x0 = DVector::from_fn(2 * d, |i, _| if i < d { 0.8 } else { 0.0 });
        let path = integrate_covariance(&spec, &x0, 10.0, 0.01)?;
        out.push(CheckResult::new(
            format!("covflow/psd_along_path[{name}]"),
            path.clamp_events == 0,
            -(path.clamp_events as f64),
            format!("{} clamp events", path.clamp_events),
        ));
        if spec.force.is_linear() {
            let times = [0.5, 1.0, 3.0];
            let p = covariance_at_times(&spec, &x0, &times, 1e-3)?;
            let a = drift_matrix(&spec, &DVector::zeros(d));
            let err = times
                .iter()
                .zip(&p.covs)
                .map(|(t, s)| (s - lyapunov_quadrature(&a, &j_matrix(d), Orientation::Right, *t)).norm())
                .fold(0.0, f64::max);
            out.push(CheckResult::at_most(format!("covflow/ode_vs_quadrature[{name}]"), err, 1e-8));
        }
    }
    let spec = corpus_spec(&CORPUS[4], 0.0)?;
    let x0 = DVector::from_column_slice(&[1.0, 0.0]);
    let reference = covariance_at_times(&spec, &x0, &[2.0], 0.1 / 16.0)?.covs[0].clone();
    let coarse = (covariance_at_times(&spec, &x0, &[2.0], 0.2)?.covs[0].clone() - &reference).norm();
    let fine = (covariance_at_times(&spec, &x0, &[2.0], 0.1)?.covs[0].clone() - &reference).norm();
    let ratio = coarse / fine;
    out.push(CheckResult::new(
        "covflow/fourth_order_in_dt",
        (12.0..=20.0).contains(&ratio),
        4.0 - (ratio - 16.0).abs(),
        format!("error ratio on halving dt = {ratio:.3}"),
    ));
    Ok(out)
}

// ---- cut-off ----

fn check_cutoff() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec) in stable_corpus(0.0)? {
        let d = spec.dim();
        let x = DVector::from_fn(2 * d, |i, _| if i < d { 0.05 } else { 0.02 });
        let sd = spectral_data(&spec, &x)?;
        // a Jordan block converges like 1/s, semisimple spectra exponentially
        let grid = [10.0, 20.0, 40.0, 80.0];
        let errs: Vec<f64> = grid.iter().map(|s| linearized_decay_error(&spec, &sd, *s)).collect::<Result<_>>()?;
        let scale = sd.oscillating_sum(0.0).norm().max(1e-300);
        let floor = 1e-10 * scale;
        let non_increasing = errs.windows(2).all(|w| w[1] <= w[0] + floor);
        let last = errs[errs.len() - 1];
        let shrink_limit = (errs[0] / 4.0).max(floor);
        out.push(CheckResult::new(
            format!("cutoff/linearized_decay[{name}]"),
            non_increasing && last <= shrink_limit,
            shrink_limit - last,
            format!(
                "error at s = 10, 20, 40, 80: {}",
                errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")
            ),
        ));
        if spec.force.is_linear() && name != "linear-critical" {
            if let crate::model::ForceKind::Linear(m) = spec.force.kind() {
                let mut mp = m.clone();
                mp[(0, 0)] += 1e-12;
                let sp = ModelSpec::new(make_linear_force(&mp)?, spec.gamma, 0.0)?;
                let sdp = spectral_data(&sp, &x)?;
                let same = (sd.eta * 1e8).round() == (sdp.eta * 1e8).round() && sd.nu == sdp.nu;
                out.push(CheckResult::new(
                    format!("cutoff/jordan_tolerance_robust[{name}]"),
                    same,
                    0.0,
                    format!("(eta, nu) = ({:.10}, {}) vs perturbed ({:.10}, {})", sd.eta, sd.nu, sdp.eta, sdp.nu),
                ));
            }
        }
    }
    // critical damping exercises the Jordan branch
    let crit = corpus_spec(&CORPUS[1], 0.0)?;
    let sd = spectral_data(&crit, &DVector::from_column_slice(&[1.0, 0.0]))?;
    let block = sd.jordan_blocks.iter().map(|b| b.size).max().unwrap_or(0);
    out.push(CheckResult::new(
        "cutoff/critical_damping_jordan_block",
        block == 2 && sd.nu == 1,
        0.0,
        format!("largest Jordan block {block}, nu = {}", sd.nu),
    ));
    // profile convergence in eps for a real spectrum
    let real = ModelSpec::new(builtin_force("harmonic")?, 3.0, 0.0)?;
    let x = DVector::from_column_slice(&[0.3, 0.0]);
    let sd = spectral_data(&real, &x)?;
    let eps_list = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
    let ws: Vec<f64> = (0..=80).map(|k| -4.0 + 0.1 * k as f64).collect();
    let profiles: Vec<Vec<f64>> = eps_list
        .iter()
        .map(|&e| {
            let tm = mixing_time(&sd, e)?;
            ws.iter().map(|w| profile_d(&real, &sd, tm + w, e)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let last = profiles[profiles.len() - 2]
        .iter()
        .zip(&profiles[profiles.len() - 1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.push(CheckResult::at_most("cutoff/profile_cauchy", last, 5e-3));
    Ok(out)
}

// ---- simulation ----

fn check_simulation(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let lin = corpus_spec(&CORPUS[0], 0.05)?;
    let x0 = DVector::from_column_slice(&[1.0, -0.5]);
    let b = integrate_sde(&lin, &x0, &SdeRequest::new(2.0, 0.01, 16, seed).coupled(true))?;
    let ti = b.n_times() - 1;
    let z = b.z_cloud(ti).expect("coupled");
    let gap = z.iter().zip(b.cloud(ti)).map(|(z, x)| (z - x).norm()).fold(0.0, f64::max);
    out.push(CheckResult::at_most("simulate/coupling_exact_for_linear", gap, 1e-12));
    let other = integrate_sde(&lin, &x0, &SdeRequest::new(2.0, 0.01, 16, seed.wrapping_add(1)))?;
    let mismatch = z.iter().zip(other.cloud(ti)).map(|(z, x)| (z - x).norm()).fold(f64::INFINITY, f64::min);
    out.push(CheckResult::at_least("simulate/seed_mismatch_breaks_coupling", mismatch, 1e-6));

    // weak order: for a linear SDE the ensemble mean follows the noise-free scheme
    let exact = expm(&(drift_matrix(&lin, &DVector::zeros(1)) * 1.0)) * &x0;
    let zero = lin.with_epsilon(0.0);
    for (scheme, order) in [(Scheme::EulerMaruyama, 1.0), (Scheme::Baoab, 2.0)] {
        let pts: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&dt| {
                let b = integrate_sde(&zero, &x0, &SdeRequest::new(1.0, dt, 1, seed).scheme(scheme))?;
                Ok(((dt as f64).ln(), (b.state(0, b.n_times() - 1) - &exact).norm().ln()))
            })
            .collect::<Result<_>>()?;
        let slope = crate::covflow::ls_slope(&pts);
        out.push(CheckResult::new(
            format!("simulate/weak_order[{scheme:?}]"),
            (slope - order).abs() <= 0.3,
            0.3 - (slope - order).abs(),
            format!("log-log slope {slope:.3}, expected {order}"),
        ));
    }

    out.push(gibbs_energy_check(seed, 20_000)?);

    // empirical TV tracks the exact Gaussian curve (linear case, exact in law)
    let eps = 0.01;
    let spec = lin.with_epsilon(eps);
    let x = DVector::from_column_slice(&[1.0, 0.0]);
    let n = 20_000;
    let times = [2.0, 3.0, 4.0, 5.0];
    let req = SdeRequest::new(5.0, 0.01, n, seed).record_every(100);
    let batch = integrate_sde(&spec, &x, &req)?;
    let exact = gaussian_tv_curve(&spec, &x, eps, &times, TvMethod::Quadrature)?;
    let target = Gaussian::new(DVector::zeros(2), sigma_matrix(&spec)? * (2.0 * eps))?;
    let reference = target.samples(n, seed ^ 0x51);
    let mut worst_z: f64 = 0.0;
    for (k, t) in times.iter().enumerate() {
        let ti = batch.grid.iter().position(|g| (g - t).abs() < 1e-9).expect("recorded time");
        let est = empirical_tv(&batch.cloud(ti), &reference, EmpiricalTvMethod::GaussianMomentMatch, seed)?;
        worst_z = worst_z.max((est.estimate - exact[k].value).abs() / est.stderr);
    }
    out.push(CheckResult::at_most("simulate/empirical_matches_gaussian_curve", worst_z, 3.0));
    Ok(out)
}

/// `P(|p|^2/2 + U(q) <= v)` under the density proportional to `exp(-gamma (|p|^2/2 + U)/eps)`, d = 1.
fn gibbs_energy_cdf(spec: &ModelSpec, v: f64, qs: &[f64], weights: &[f64]) -> f64 {
    let s2 = spec.epsilon / spec.gamma;
    let mut num = 0.0;
    let mut den = 0.0;
    for (q, w) in qs.iter().zip(weights) {
        let u = spec.force.potential(&DVector::from_element(1, *q)).expect("gradient field");
        den += w;
        if v > u {
            num += w * libm::erf((2.0 * (v - u)).sqrt() / (2.0 * s2).sqrt());
        }
    }
    num / den
}

/// Chi-square test of the long-run energy histogram against the Gibbs law.
pub fn gibbs_energy_check(seed: u64, n_paths: usize) -> Result<CheckResult> {
    let spec = corpus_spec(&CORPUS[4], 0.1)?;
    let batch = integrate_sde(
        &spec,
        &DVector::zeros(2),
        &SdeRequest::new(20.0, 0.01, n_paths, seed).record_every(2000),
    )?;
    let cloud = batch.cloud(batch.n_times() - 1);
    let energy: Vec<f64> = cloud
        .iter()
        .map(|x| 0.5 * x[1] * x[1] + spec.force.potential(&DVector::from_element(1, x[0])).expect("gradient field"))
        .collect();
    let nq = 4001;
    let qmax = 3.0;
    let qs: Vec<f64> = (0..nq).map(|i| -qmax + 2.0 * qmax * i as f64 / (nq - 1) as f64).collect();
    let weights: Vec<f64> = qs
        .iter()
        .map(|q| (-spec.gamma * spec.force.potential(&DVector::from_element(1, *q)).expect("gradient") / spec.epsilon).exp())
        .collect();
    let bins = 20;
    let mut edges = vec![0.0];
    for k in 1..bins {
        let target = k as f64 / bins as f64;
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if gibbs_energy_cdf(&spec, mid, &qs, &weights) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        edges.push(0.5 * (lo + hi));
    }
    let mut counts = vec![0usize; bins];
    for e in &energy {
        let k = edges.partition_point(|edge| edge <= e) - 1;
        counts[k.min(bins - 1)] += 1;
    }
    let expected = energy.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::Parameter(e.to_string()))?;
    let p = 1.0 - dist.cdf(chi2);
    Ok(CheckResult::new(
        "simulate/gibbs_energy_histogram",
        p > 0.01,
        p - 0.01,
        format!("chi2 = {chi2:.2} on {} dof, p = {p:.4}, n = {}", bins - 1, energy.len()),
    ))
}

// ---- harness ----

fn check_harness_determinism(seed: u64) -> Result<Vec<CheckResult>> {
    let text = format!(
        "schema_version = 1\noutput_dir = \"unused\"\nepsilons = [1e-2, 1e-3]\nx0 = [[1.0, 0.0]]\nseed = {seed}\n\
         [model]\nforce = \"harmonic\"\ngamma = 1.0\n[grid]\ndt = 0.01\nw_step = 1.0\n"
    );
    let base = super::ExperimentConfig::from_toml(&text)?;
    let tmp = tempdir()?;
    let mut bytes = Vec::new();
    let mut orphans = 0;
    for run in ["a", "b"] {
        let mut cfg = base.clone();
        cfg.output_dir = tmp.join(run);
        let m = super::run_cutoff_experiment(&cfg)?;
        orphans += super::orphan_outputs(&cfg.output_dir, &m)?.len();
        let csvs: Vec<Vec<u8>> = m
            .artifacts
            .iter()
            .filter(|a| a.ends_with(".csv"))
            .map(|a| std::fs::read(cfg.output_dir.join(a)))
            .collect::<std::io::Result<_>>()?;
        bytes.push(csvs);
    }
    let _ = std::fs::remove_dir_all(&tmp);
    Ok(vec![
        CheckResult::new("harness/identical_csv_bytes", bytes[0] == bytes[1], 0.0, "two runs, same config hash"),
        CheckResult::new("harness/no_orphan_outputs", orphans == 0, -(orphans as f64), format!("{orphans} orphans")),
    ])
}

fn tempdir() -> Result<std::path::PathBuf> {
    static COUNTER: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
    let k = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("langevin-cutoff-verify-{}-{k}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Every invariant check, in module order. Failures are entries, not errors.
pub fn verify_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.extend(guarded("model/fd_second_order", check_fd_order));
    out.extend(guarded("model/linear_assumption_iff_stable", || check_linear_assumption_iff_stable(&mut rng)));
    out.extend(guarded("linear_stability/parabola_vs_eigencheck", || check_spectral_consistency(&mut rng, 1000)));
    out.extend(guarded("linear_stability/eigenvector_commutator_form", || check_commutator_inequality(&mut rng)));
    out.extend(guarded("linear_stability/normal_equivalence", || check_normal_and_sufficient(&mut rng, 500)));
    out.extend(guarded("linear_stability/weighted_lyapunov_decay", check_lyapunov_decay));
    out.extend(guarded("matrix_eq", check_lyapunov_solutions));
    out.extend(guarded("gaussian_tv", || check_tv_properties(&mut rng)));
    out.extend(guarded("covflow", check_covflow));
    out.extend(guarded("cutoff", check_cutoff));
    out.extend(guarded("simulate", || check_simulation(seed)));
    out.extend(guarded("harness", || check_harness_determinism(seed)));
    out
}

/// Runs [`verify_checks`] and writes `verify.csv` and `verify.json` under `out_dir`.
pub fn verify_suite(out_dir: &Path, seed: u64) -> Result<RunManifest> {
    let hash = format!("verify-seed-{seed}");
    let mut run = RunDir::start(out_dir, "verify", &hash)?;
    let checks = verify_checks(seed);
    let rows: Vec<Vec<Cell>> = checks
        .iter()
        .map(|c| {
            vec![
                Cell::Text(c.name.clone()),
                Cell::Text(c.passed.to_string()),
                c.margin.into(),
                Cell::Text(format!("\"{}\"", c.detail.replace('"', "'"))),
            ]
        })
        .collect();
    run.write_artifact("verify.csv", csv_string(&["check", "passed", "margin", "detail"], &rows).as_bytes())?;
    run.write_json("verify.json", &checks)?;
    run.finish(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commutator_form_is_nonnegative_on_a_fixed_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -0.5, 0.3, 1.0, 0.2, -1.0, 2.0]);
        assert!(commutator_form_min(&m) > -1e-10);
    }

    #[test]
    fn random_normal_matrices_are_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = random_normal_matrix(&mut rng, 4);
            assert!(crate::linalg::is_normal(&m, 1e-12));
        }
    }

    #[test]
    fn residual_check_and_tamper() {
        let spec = corpus_spec(&CORPUS[2], 0.0).unwrap();
        let s = sigma_matrix(&spec).unwrap();
        assert!(sigma_residual_check(&spec, &s).unwrap().passed);
        let t = &s + DMatrix::from_element(4, 4, 1e-3);
        assert!(!sigma_residual_check(&spec, &t).unwrap().passed);
    }

    #[test]
    fn corpus_stability_flags_match_classification() {
        for m in CORPUS {
            let spec = corpus_spec(m, 0.0).unwrap_or_else(|e| panic!("{}: {e}", m.name));
            if let crate::model::ForceKind::Linear(mat) = spec.force.kind() {
                assert_eq!(classify_linear(mat, m.gamma).unwrap().stable, m.stable, "{}", m.name);
            }
        }
    }

    #[test]
    fn gibbs_cdf_is_a_distribution() {
        let spec = corpus_spec(&CORPUS[4], 0.1).unwrap();
        let qs: Vec<f64> = (0..2001).map(|i| -3.0 + 6.0 * i as f64 / 2000.0).collect();
        let w: Vec<f64> = qs
            .iter()
            .map(|q| (-spec.force.potential(&DVector::from_element(1, *q)).unwrap() / 0.1).exp())
            .collect();
        assert!(gibbs_energy_cdf(&spec, 0.0, &qs, &w) < 1e-12);
        assert!((gibbs_energy_cdf(&spec, 10.0, &qs, &w) - 1.0).abs() < 1e-9);
        // energy of a 2-d Gaussian-like law near the bottom: exponential with mean eps/gamma
        let mid = gibbs_energy_cdf(&spec, 0.1 * 2f64.ln(), &qs, &w);
        assert!((mid - 0.5).abs() < 0.05, "{mid}");
    }
}
