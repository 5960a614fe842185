use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::{csv_string, CheckResult, Cell, ExperimentConfig, RunDir, RunManifest};
use crate::cutoff::{
    default_tv_method, gaussian_tv_curve, mixing_time, profile_d, profile_lambda, profile_limit_r, spectral_data,
    SpectralData,
};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::lyapunov::sigma_matrix;
use crate::model::{check_assumption_main, ForceKind, ModelSpec};
use crate::simulate::{empirical_tv, integrate_sde, SdeRequest};
use crate::stability::classify_linear;

/// Horizon used to decide whether `|Sigma^{-1/2} v(t)|` has a limit.
const LIMIT_R_HORIZON: f64 = 200.0;

/// Stability gate shared by the pipelines.
fn require_stable(spec: &ModelSpec) -> Result<()> {
    match spec.force.kind() {
        ForceKind::Linear(m) => {
            let verdict = classify_linear(m, spec.gamma)?;
            if !verdict.stable {
                return Err(Error::UnstableModel(Box::new(verdict)));
            }
            Ok(())
        }
        _ => {
            let report = check_assumption_main(spec, 4.0, 2000)?;
            if !report.holds_on_samples {
                return Err(Error::Precondition(format!(
                    "coercivity assumption fails on samples (worst margin {:.3e} at {:?})",
                    report.worst_margin, report.worst_point
                )));
            }
            Ok(())
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveSummary {
    pub epsilon: f64,
    pub x0: Vec<f64>,
    pub t_mix: f64,
    pub eta: f64,
    pub nu: usize,
    pub tau: f64,
    pub limit_r: Option<f64>,
    /// `sup_w |curve(t_mix + w) - D^eps(t_mix + w)|` over rows with `t >= tau`.
    pub sup_profile_diff: f64,
    pub curve_at_w_min: f64,
    pub curve_at_w_max: f64,
    /// `w` values dropped because `t_mix + w < 0`.
    pub skipped_rows: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CutoffSummary {
    pub config_hash: String,
    pub curves: Vec<CurveSummary>,
}

struct CurveRows {
    summary: CurveSummary,
    rows: Vec<Vec<Cell>>,
}

const CURVE_HEADER: &[&str] = &[
    "x0_index",
    "w",
    "t",
    "gaussian_tv",
    "profile_d",
    "lambda_printed",
    "lambda_alternative",
    "empirical_t",
    "empirical_tv",
    "empirical_stderr",
];

fn w_grid(cfg: &ExperimentConfig) -> Vec<f64> {
    let g = &cfg.grid;
    let n = ((g.w_max - g.w_min) / g.w_step + 1e-9).floor() as usize;
    (0..=n).map(|i| g.w_min + i as f64 * g.w_step).collect()
}

fn curve_for(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    x0_index: usize,
    x0: &DVector<f64>,
    sd: &SpectralData,
) -> Result<CurveRows> {
    let eps = spec.epsilon;
    let t_mix = mixing_time(sd, eps)?;
    let ws = w_grid(cfg);
    let kept: Vec<(f64, f64)> = ws.iter().map(|w| (*w, t_mix + w)).filter(|(_, t)| *t >= 0.0).collect();
    let skipped = ws.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Domain(format!("every t_mix + w is negative (t_mix = {t_mix})")));
    }
    let times: Vec<f64> = kept.iter().map(|p| p.1).collect();
    let method = default_tv_method(2 * spec.dim(), cfg.seed);
    let curve = gaussian_tv_curve(spec, x0, eps, &times, method)?;
    let lim = profile_limit_r(spec, sd, LIMIT_R_HORIZON)?;
    let r = lim.exists.then_some(lim.r);
    let empirical = match &cfg.ensemble {
        Some(ens) if ens.empirical_tv => Some(empirical_curve(cfg, spec, x0, &times)?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(kept.len());
    let mut sup = 0.0f64;
    for (k, (w, t)) in kept.iter().enumerate() {
        let d = if *t >= sd.tau { profile_d(spec, sd, *t, eps)? } else { f64::NAN };
        if d.is_finite() {
            sup = sup.max((curve[k].value - d).abs());
        }
        let lam = profile_lambda(sd, *w, r);
        let (et, ev, es) = empirical.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |e| e[k]);
        rows.push(vec![
            Cell::Int(x0_index as i64),
            (*w).into(),
            (*t).into(),
            curve[k].value.into(),
            d.into(),
            lam.printed.into(),
            lam.alternative.unwrap_or(f64::NAN).into(),
            et.into(),
            ev.into(),
            es.into(),
        ]);
    }
    Ok(CurveRows {
        summary: CurveSummary {
            epsilon: eps,
            x0: x0.as_slice().to_vec(),
            t_mix,
            eta: sd.eta,
            nu: sd.nu,
            tau: sd.tau,
            limit_r: r,
            sup_profile_diff: sup,
            curve_at_w_min: curve[0].value,
            curve_at_w_max: curve[curve.len() - 1].value,
            skipped_rows: skipped,
        },
        rows,
    })
}

/// `(recorded time, TV estimate, stderr)` for each requested time, using the
/// closest recorded ensemble time.
fn empirical_curve(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    x0: &DVector<f64>,
    times: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    let ens = cfg.ensemble.as_ref().expect("ensemble configured");
    let t_end = times.iter().cloned().fold(0.0, f64::max);
    let stride = ((cfg.grid.w_step / cfg.grid.dt).round() as usize).max(1);
    let req = SdeRequest::new(t_end, cfg.grid.dt, ens.n_paths, ens.seed)
        .scheme(ens.scheme)
        .record_every(stride);
    let batch = integrate_sde(spec, x0, &req)?;
    let target = Gaussian::new(DVector::zeros(2 * spec.dim()), sigma_matrix(spec)? * (2.0 * spec.epsilon))?;
    let reference = target.samples(ens.n_paths, ens.seed ^ 0x9e37_79b9_7f4a_7c15);
    times
        .iter()
        .map(|t| {
            let ti = batch
                .grid
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
                .map(|p| p.0)
                .expect("non-empty grid");
            let est = empirical_tv(&batch.cloud(ti), &reference, ens.estimator.method(), ens.seed)?;
            Ok((batch.grid[ti], est.estimate, est.stderr))
        })
        .collect()
}

fn eps_tag(eps: f64) -> String {
    format!("{eps:e}").replace('.', "p")
}

/// Exact Gaussian cut-off curves, the limiting profile and `Lambda(w)` for
/// every `(eps, x0)` of the config; one CSV per `eps` plus a JSON summary.
pub fn run_cutoff_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let base = cfg.model.build(cfg.epsilons[0])?;
    require_stable(&base)?;
    let mut run = RunDir::start(&cfg.output_dir, "cutoff-curve", &cfg.hash())?;
    match cutoff_body(cfg, &base, &mut run) {
        Ok(checks) => run.finish(checks),
        Err(e) => Err(run.abort(e)),
    }
}

fn cutoff_body(cfg: &ExperimentConfig, base: &ModelSpec, run: &mut RunDir) -> Result<Vec<CheckResult>> {
    let x0s = cfg.x0_vectors();
    let sds: Vec<SpectralData> = x0s.iter().map(|x| spectral_data(base, x)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.epsilons.len())
        .flat_map(|e| (0..x0s.len()).map(move |x| (e, x)))
        .collect();
    let results: Vec<CurveRows> = jobs
        .par_iter()
        .map(|&(e, x)| curve_for(cfg, &base.with_epsilon(cfg.epsilons[e]), x, &x0s[x], &sds[x]))
        .collect::<Result<_>>()?;
    let mut checks = Vec::new();
    let mut summaries = Vec::new();
    for (e, eps) in cfg.epsilons.iter().enumerate() {
        let mut rows = Vec::new();
        for (x, _) in x0s.iter().enumerate() {
            let r = &results[e * x0s.len() + x];
            rows.extend(r.rows.iter().cloned());
            let s = &r.summary;
            let tag = format!("eps={eps:e},x0={x}");
            checks.push(CheckResult::at_most(format!("tail_upper[{tag}]"), s.curve_at_w_max, cfg.tolerances.tail_upper));
            checks.push(CheckResult::at_least(format!("tail_lower[{tag}]"), s.curve_at_w_min, cfg.tolerances.tail_lower));
            summaries.push(s.clone());
        }
        run.write_artifact(&format!("cutoff_eps{e}_{}.csv", eps_tag(*eps)), csv_string(CURVE_HEADER, &rows).as_bytes())?;
    }
    // sup-differences must shrink as eps decreases
    let mut order: Vec<usize> = (0..cfg.epsilons.len()).collect();
    order.sort_by(|a, b| cfg.epsilons[*b].total_cmp(&cfg.epsilons[*a]));
    for x in 0..x0s.len() {
        let sups: Vec<f64> = order.iter().map(|e| results[e * x0s.len() + x].summary.sup_profile_diff).collect();
        let worst = sups.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        if sups.len() >= 2 {
            checks.push(CheckResult::new(
                format!("sup_diff_decreasing[x0={x}]"),
                worst < 0.0,
                -worst,
                format!("sup_w |curve - D| along decreasing eps: {sups:?}"),
            ));
        }
    }
    run.write_json(
        "cutoff_summary.json",
        &CutoffSummary {
            config_hash: cfg.hash(),
            curves: summaries,
        },
    )?;
    Ok(checks)
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryRow {
    pub epsilon: f64,
    pub tv: f64,
    pub tv_stderr: f64,
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    /// `E|x|^2 / eps`.
    pub variance_constant: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

/// Long-horizon ensembles of `X^eps` compared to `N(0, 2 eps Sigma)`.
pub fn run_stationary_check(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    if cfg.ensemble.is_none() {
        return Err(Error::Config("stationary check needs an [ensemble] table".into()));
    }
    let base = cfg.model.build(cfg.epsilons[0])?;
    require_stable(&base)?;
    let mut run = RunDir::start(&cfg.output_dir, "stationary-check", &cfg.hash())?;
    let rows = match stationary_rows(cfg, &base) {
        Ok(r) => r,
        Err(e) => return Err(run.abort(e)),
    };
    let table: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            vec![
                r.epsilon.into(),
                r.tv.into(),
                r.tv_stderr.into(),
                r.second_moment.into(),
                r.second_moment_stderr.into(),
                r.variance_constant.into(),
                r.n_used.into(),
                r.n_excluded.into(),
            ]
        })
        .collect();
    let header = [
        "epsilon",
        "tv",
        "tv_stderr",
        "second_moment",
        "second_moment_stderr",
        "variance_constant",
        "n_used",
        "n_excluded",
    ];
    run.write_artifact("stationary.csv", csv_string(&header, &table).as_bytes())?;
    run.write_json("stationary_summary.json", &rows)?;
    let checks = stationary_checks(cfg, &rows);
    run.finish(checks)
}

/// One row per `eps`, in config order.
pub fn stationary_rows(cfg: &ExperimentConfig, base: &ModelSpec) -> Result<Vec<StationaryRow>> {
    let ens = cfg.ensemble.as_ref().expect("validated");
    let x0 = cfg.x0_vectors().swap_remove(0);
    let sigma = sigma_matrix(base)?;
    cfg.epsilons
        .iter()
        .map(|&eps| {
            let spec = base.with_epsilon(eps);
            let n_steps = (cfg.grid.horizon / cfg.grid.dt).ceil() as usize;
            let req = SdeRequest::new(cfg.grid.horizon, cfg.grid.dt, ens.n_paths, ens.seed)
                .scheme(ens.scheme)
                .record_every(n_steps.max(1));
            let batch = integrate_sde(&spec, &x0, &req)?;
            let cloud = batch.cloud(batch.n_times() - 1);
            let target = Gaussian::new(DVector::zeros(sigma.nrows()), &sigma * (2.0 * eps))?;
            let reference = target.samples(ens.n_paths, ens.seed ^ 0x9e37_79b9_7f4a_7c15);
            let tv = empirical_tv(&cloud, &reference, ens.estimator.method(), ens.seed)?;
            let sq: Vec<f64> = cloud.iter().map(|x| x.norm_squared()).collect();
            let n = sq.len() as f64;
            let mean = sq.iter().sum::<f64>() / n;
            let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            log::info!("eps = {eps:e}: TV = {:.4} +- {:.4}, E|x|^2 = {mean:.4e}", tv.estimate, tv.stderr);
            Ok(StationaryRow {
                epsilon: eps,
                tv: tv.estimate,
                tv_stderr: tv.stderr,
                second_moment: mean,
                second_moment_stderr: (var / n).sqrt(),
                variance_constant: mean / eps,
                n_used: cloud.len(),
                n_excluded: batch.n_excluded(),
            })
        })
        .collect()
}

pub fn stationary_checks(cfg: &ExperimentConfig, rows: &[StationaryRow]) -> Vec<CheckResult> {
    let mut sorted: Vec<&StationaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let mut checks = Vec::new();
    if sorted.len() >= 2 {
        let worst = sorted.windows(2).map(|w| w[1].tv - w[0].tv).fold(f64::NEG_INFINITY, f64::max);
        let tvs: Vec<f64> = sorted.iter().map(|r| r.tv).collect();
        checks.push(CheckResult::new(
            "tv_decreasing_in_eps",
            worst < 0.0,
            -worst,
            format!("TV along decreasing eps: {tvs:?}"),
        ));
    }
    let last = sorted.last().expect("at least one eps");
    checks.push(CheckResult::at_most(
        format!("tv_small[eps={:e}]", last.epsilon),
        last.tv,
        cfg.tolerances.stationary_tv_max,
    ));
    let cs: Vec<f64> = rows.iter().map(|r| r.variance_constant).collect();
    let ratio = cs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / cs.iter().cloned().fold(f64::INFINITY, f64::min);
    checks.push(CheckResult::new(
        "variance_constant_stable",
        ratio <= cfg.tolerances.variance_ratio_max,
        cfg.tolerances.variance_ratio_max - ratio,
        format!("E|x|^2/eps = {cs:?}, max/min = {ratio:.4}"),
    ));
    checks
}
