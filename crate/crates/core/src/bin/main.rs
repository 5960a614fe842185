use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use langevin_cutoff::covflow::integrate_covariance;
use langevin_cutoff::cutoff::{mixing_time, spectral_data};
use langevin_cutoff::harness::{
    csv_string, load_model_config, run_cutoff_experiment, run_stationary_check, sigma_residual_check, verify_suite,
    write_atomic, Cell, ExperimentConfig, ModelConfig, RunManifest,
};
use langevin_cutoff::lyapunov::{sigma_matrix, sigma_solution};
use langevin_cutoff::simulate::{integrate_sde, Scheme, SdeRequest};
use langevin_cutoff::stability::{classify_linear, Verdict};
use langevin_cutoff::{Error, ModelSpec, Result};

#[derive(Parser)]
#[command(name = "langevin-cutoff", version, about = "Stability and cut-off analysis for underdamped Langevin dynamics")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// A model given either as a config file with a `[model]` table or as a
/// linear field `--matrix` with `--gamma`.
#[derive(Args)]
struct ModelArgs {
    #[arg(long, conflicts_with = "matrix")]
    model: Option<PathBuf>,
    /// Matrix file, or inline rows such as "1,0;0,2".
    #[arg(long, requires = "gamma")]
    matrix: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Expect {
    Stable,
    Unstable,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Em,
    Baoab,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a linear field F(q) = Mq; prints the verdict with its criterion trace.
    AnalyzeLinear {
        /// Matrix file, or inline rows such as "1,-1;1,1".
        #[arg(long)]
        matrix: String,
        #[arg(long)]
        gamma: f64,
        /// Fail unless the verdict matches.
        #[arg(long, value_enum)]
        expect: Option<Expect>,
    },
    /// Stationary fluctuation covariance Sigma with residual and smallest eigenvalue.
    StationaryCov {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Covariance flow along the zero-noise path as CSV: t, vec(Sigma_t), gap.
    CovFlow {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long)]
        t_end: f64,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectral data and mixing time from a starting point.
    MixingTime {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long)]
        epsilon: f64,
    },
    /// Cut-off curves for every (epsilon, x0) of an experiment config.
    CutoffCurve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ensemble of the noisy dynamics as CSV: path_id, t, q..., p....
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Initial state (q then p); the origin when absent.
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        #[arg(long, default_value_t = 10.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long, default_value_t = 10)]
        record_every: usize,
        #[arg(long, value_enum, default_value_t = SchemeArg::Baoab)]
        scheme: SchemeArg,
    },
    /// Long-run ensembles against N(0, 2 eps Sigma) over the epsilon list of a config.
    StationaryCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Invariant checks of every module on the built-in corpus.
    Verify {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20240607)]
        seed: u64,
    },
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("bad number {t:?}: {e}"))))
        .collect()
}

/// Rows separated by `;` or newlines, entries by `,` or whitespace.
fn parse_matrix(arg: &str) -> Result<DMatrix<f64>> {
    let text = if Path::new(arg).is_file() { std::fs::read_to_string(arg)? } else { arg.to_string() };
    let rows: Vec<Vec<f64>> = text
        .split(|c| c == ';' || c == '\n')
        .map(str::trim)
        .filter(|r| !r.is_empty() && !r.starts_with('#'))
        .map(parse_vector)
        .collect::<Result<_>>()?;
    langevin_cutoff::harness::matrix_from_rows(&rows)
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        match (&self.model, &self.matrix, self.gamma) {
            (Some(path), None, _) => load_model_config(path),
            (None, Some(m), Some(gamma)) => {
                let m = parse_matrix(m)?;
                let rows = m.row_iter().map(|r| r.iter().copied().collect()).collect();
                Ok(ModelConfig {
                    force: None,
                    linear: Some(rows),
                    polynomial: None,
                    gamma,
                    alpha: None,
                    beta: None,
                })
            }
            _ => Err(Error::Config("give --model, or --matrix with --gamma".into())),
        }
    }

    fn build(&self, epsilon: f64) -> Result<ModelSpec> {
        self.config()?.build(epsilon)
    }
}

fn state_vector(s: &str, spec: &ModelSpec) -> Result<DVector<f64>> {
    let v = parse_vector(s)?;
    let n = 2 * spec.dim();
    if v.len() == n {
        Ok(DVector::from_vec(v))
    } else if v.len() == spec.dim() {
        let mut x = DVector::zeros(n);
        x.rows_mut(0, v.len()).copy_from_slice(&v);
        Ok(x)
    } else {
        Err(Error::Config(format!("state needs {n} entries (or {} positions), got {}", spec.dim(), v.len())))
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn report_manifest(m: &RunManifest) -> bool {
    for c in &m.checks {
        println!("{} {} (margin {:.3e}) {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.margin, c.detail);
    }
    println!("{} checks, {} failed; artifacts: {}", m.checks.len(), m.checks.iter().filter(|c| !c.passed).count(), m.artifacts.join(", "));
    m.passed
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::AnalyzeLinear { matrix, gamma, expect } => {
            let v = classify_linear(&parse_matrix(&matrix)?, gamma)?;
            print_json(&serde_json::to_value(&v)?);
            Ok(match expect {
                None => v.verdict != Verdict::Indeterminate && !v.internal_inconsistency,
                Some(Expect::Stable) => v.verdict == Verdict::Stable,
                Some(Expect::Unstable) => v.verdict == Verdict::Unstable,
            })
        }
        Command::StationaryCov { model } => {
            let spec = model.build(0.0)?;
            let sol = sigma_solution(&spec)?;
            let check = sigma_residual_check(&spec, &sol.x)?;
            let rows: Vec<Vec<f64>> = sol.x.row_iter().map(|r| r.iter().copied().collect()).collect();
            print_json(&json!({
                "sigma": rows,
                "residual": sol.residual_fro,
                "lambda_min": sol.min_eig,
                "certification": sol.certification,
                "residual_check": check,
            }));
            Ok(check.passed && sol.min_eig > 0.0)
        }
        Command::CovFlow { model, x0, t_end, dt, out } => {
            let spec = model.build(0.0)?;
            let x0 = state_vector(&x0, &spec)?;
            let path = integrate_covariance(&spec, &x0, t_end, dt)?;
            let sigma = sigma_matrix(&spec).ok();
            let n = 2 * spec.dim();
            let names: Vec<String> = (0..n)
                .flat_map(|i| (0..n).map(move |j| format!("sigma_{i}_{j}")))
                .collect();
            let mut header = vec!["t"];
            header.extend(names.iter().map(String::as_str));
            header.push("gap");
            let rows: Vec<Vec<Cell>> = path
                .grid
                .iter()
                .zip(&path.covs)
                .map(|(t, s)| {
                    let mut row = vec![Cell::from(*t)];
                    row.extend(s.transpose().iter().map(|v| Cell::from(*v)));
                    row.push(sigma.as_ref().map_or(f64::NAN, |sig| (s - sig).norm()).into());
                    row
                })
                .collect();
            let text = csv_string(&header, &rows);
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
            if path.clamp_events > 0 {
                log::warn!("{} covariance clamp events", path.clamp_events);
            }
            Ok(path.clamp_events == 0)
        }
        Command::MixingTime { model, x, epsilon } => {
            let spec = model.build(epsilon)?;
            let x = state_vector(&x, &spec)?;
            let sd = spectral_data(&spec, &x)?;
            let t_mix = mixing_time(&sd, epsilon)?;
            print_json(&json!({
                "eta": sd.eta,
                "nu": sd.nu,
                "tau": sd.tau,
                "t_mix": t_mix,
                "spectral_data": sd,
            }));
            Ok(t_mix.is_finite())
        }
        Command::CutoffCurve { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            Ok(report_manifest(&run_cutoff_experiment(&cfg)?))
        }
        Command::StationaryCheck { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            Ok(report_manifest(&run_stationary_check(&cfg)?))
        }
        Command::Simulate { model, epsilon, paths, seed, out, x0, t_end, dt, record_every, scheme } => {
            let spec = load_model_config(&model)?.build(epsilon)?;
            let x0 = match x0 {
                Some(s) => state_vector(&s, &spec)?,
                None => DVector::zeros(2 * spec.dim()),
            };
            let scheme = match scheme {
                SchemeArg::Em => Scheme::EulerMaruyama,
                SchemeArg::Baoab => Scheme::Baoab,
            };
            let req = SdeRequest::new(t_end, dt, paths, seed).scheme(scheme).record_every(record_every);
            let batch = integrate_sde(&spec, &x0, &req)?;
            let d = spec.dim();
            let names: Vec<String> = (0..d).map(|i| format!("q{i}")).chain((0..d).map(|i| format!("p{i}"))).collect();
            let mut header = vec!["path_id", "t"];
            header.extend(names.iter().map(String::as_str));
            let mut rows = Vec::with_capacity(paths * batch.n_times());
            for path in 0..paths {
                if !batch.valid[path] {
                    continue;
                }
                for (ti, t) in batch.grid.iter().enumerate() {
                    let mut row = vec![Cell::from(path), Cell::from(*t)];
                    row.extend(batch.state(path, ti).iter().map(|v| Cell::from(*v)));
                    rows.push(row);
                }
            }
            write_atomic(&out, csv_string(&header, &rows).as_bytes())?;
            if batch.n_excluded() > 0 {
                log::warn!("{} exploded paths excluded", batch.n_excluded());
            }
            Ok(batch.n_excluded() == 0)
        }
        Command::Verify { out, seed } => Ok(report_manifest(&verify_suite(&out, seed)?)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
