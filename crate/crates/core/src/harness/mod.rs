//! Experiment orchestration: TOML configs, run manifests, CSV/JSON output,
//! the cut-off and stationary-measure pipelines, and the verification suite.

mod experiments;
mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{builtin_force, make_linear_force, polynomial_gradient_force, ForceField, ModelSpec};
use crate::simulate::{EmpiricalTvMethod, Scheme};

pub use experiments::{run_cutoff_experiment, run_stationary_check, CutoffSummary, StationaryRow};
pub use verify::{corpus_spec, sigma_residual_check, verify_checks, verify_suite, CorpusModel, CORPUS};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialConfig {
    pub dim: usize,
    /// `(power, coefficient)` pairs of the separable potential.
    pub terms: Vec<(u32, f64)>,
}

/// Exactly one of `force`, `linear`, `polynomial` selects the field.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polynomial: Option<PolynomialConfig>,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl ModelConfig {
    pub fn force_field(&self) -> Result<ForceField> {
        let chosen = [self.force.is_some(), self.linear.is_some(), self.polynomial.is_some()];
        if chosen.iter().filter(|c| **c).count() != 1 {
            return Err(Error::Config(
                "model needs exactly one of `force`, `linear`, `polynomial`".into(),
            ));
        }
        if let Some(name) = &self.force {
            return builtin_force(name);
        }
        if let Some(rows) = &self.linear {
            return make_linear_force(&matrix_from_rows(rows)?);
        }
        let p = self.polynomial.as_ref().expect("one field selected");
        polynomial_gradient_force(p.dim, &p.terms)
    }

    /// Model at noise level `epsilon` with coercivity constants attached:
    /// the configured `(alpha, beta)` if given, otherwise derived ones when
    /// they exist (an unstable linear field gets none).
    pub fn build(&self, epsilon: f64) -> Result<ModelSpec> {
        let spec = ModelSpec::new(self.force_field()?, self.gamma, epsilon)?;
        match (self.alpha, self.beta) {
            (Some(a), Some(b)) => spec.with_assumption(a, b),
            (None, None) => match spec.clone().with_derived_assumption() {
                Ok(s) => Ok(s),
                Err(e) if spec.force.is_linear() => {
                    log::info!("no coercivity constants for this linear field: {e}");
                    Ok(spec)
                }
                Err(e) => Err(e),
            },
            _ => Err(Error::Config("give both `alpha` and `beta` or neither".into())),
        }
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config("matrix must be square and non-empty".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_w_min")]
    pub w_min: f64,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
    #[serde(default = "default_w_step")]
    pub w_step: f64,
    /// Simulation horizon of the stationary-measure check.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_t_end() -> f64 {
    10.0
}
fn default_w_min() -> f64 {
    -6.0
}
fn default_w_max() -> f64 {
    6.0
}
fn default_w_step() -> f64 {
    0.25
}
fn default_horizon() -> f64 {
    40.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TvEstimator {
    MomentMatch,
    Knn { k: usize },
}

impl TvEstimator {
    pub fn method(self) -> EmpiricalTvMethod {
        match self {
            TvEstimator::MomentMatch => EmpiricalTvMethod::GaussianMomentMatch,
            TvEstimator::Knn { k } => EmpiricalTvMethod::ClassifierKnn { k },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Add a Monte Carlo column to the cut-off curves.
    #[serde(default)]
    pub empirical_tv: bool,
    #[serde(default = "default_estimator")]
    pub estimator: TvEstimator,
}

fn default_scheme() -> Scheme {
    Scheme::Baoab
}
fn default_estimator() -> TvEstimator {
    TvEstimator::MomentMatch
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Curves must fall below this at the largest `w`.
    #[serde(default = "default_tail_upper")]
    pub tail_upper: f64,
    /// Curves must exceed this at the smallest `w`.
    #[serde(default = "default_tail_lower")]
    pub tail_lower: f64,
    #[serde(default = "default_stationary_tv")]
    pub stationary_tv_max: f64,
    /// Largest allowed max/min ratio of `E|x|^2 / eps` across the sweep.
    #[serde(default = "default_variance_ratio")]
    pub variance_ratio_max: f64,
}

fn default_tail_upper() -> f64 {
    0.01
}
fn default_tail_lower() -> f64 {
    0.99
}
fn default_stationary_tv() -> f64 {
    0.05
}
fn default_variance_ratio() -> f64 {
    1.5
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tail_upper: default_tail_upper(),
            tail_lower: default_tail_lower(),
            stationary_tv_max: default_stationary_tv(),
            variance_ratio_max: default_variance_ratio(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub epsilons: Vec<f64>,
    pub x0: Vec<Vec<f64>>,
    pub grid: GridConfig,
    /// Seed for deterministic quadrature/MC fallbacks outside ensembles.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("`epsilons` must not be empty".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 0.5)) {
            return Err(Error::Config(format!("every epsilon must lie in (0, 1/2), got {e}")));
        }
        let g = &self.grid;
        if !(g.dt > 0.0 && g.dt.is_finite()) {
            return Err(Error::Config(format!("grid.dt must be positive, got {}", g.dt)));
        }
        if !(g.t_end > 0.0 && g.horizon > 0.0) {
            return Err(Error::Config("grid.t_end and grid.horizon must be positive".into()));
        }
        if !(g.w_min < g.w_max && g.w_step > 0.0) {
            return Err(Error::Config("need w_min < w_max and w_step > 0".into()));
        }
        if let Some(ens) = &self.ensemble {
            if ens.n_paths < 2 {
                return Err(Error::Config("ensemble.n_paths must be at least 2".into()));
            }
            if let TvEstimator::Knn { k } = ens.estimator {
                if k == 0 || k % 2 == 0 {
                    return Err(Error::Config("k-NN estimator needs an odd positive k".into()));
                }
            }
        }
        let d = self.model.force_field()?.dim();
        if self.x0.is_empty() {
            return Err(Error::Config("`x0` must list at least one start point".into()));
        }
        if let Some(x) = self.x0.iter().find(|x| x.len() != 2 * d) {
            return Err(Error::Config(format!(
                "start point {x:?} has length {}, expected 2d = {}",
                x.len(),
                2 * d
            )));
        }
        Ok(())
    }

    pub fn x0_vectors(&self) -> Vec<DVector<f64>> {
        self.x0.iter().map(|x| DVector::from_column_slice(x)).collect()
    }

    /// SHA-256 of the resolved config (defaults filled in) as canonical JSON.
    /// The output directory is not part of an experiment's identity.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output_dir = PathBuf::new();
        let json = serde_json::to_string(&identity).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Reads only the `[model]` table of a TOML file, so a full experiment config
/// or a bare model file both work.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let model = table
        .get("model")
        .ok_or_else(|| Error::Config(format!("{} has no [model] table", path.display())))?;
    model.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Signed slack: positive when passing, in the units of the check.
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, passed: bool, margin: f64, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            margin,
            detail: detail.into(),
        }
    }

    /// Passes when `value <= limit`; margin is `limit - value`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        let passed = value <= limit;
        Self::new(name, passed, limit - value, format!("{value:.6e} <= {limit:.6e}"))
    }

    /// Passes when `value >= limit`; margin is `value - limit`.
    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        let passed = value >= limit;
        Self::new(name, passed, value - limit, format!("{value:.6e} >= {limit:.6e}"))
    }

    pub fn failed(name: impl Into<String>, err: &Error) -> Self {
        Self::new(name, false, f64::NAN, format!("error: {err}"))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub status: RunStatus,
    /// Output files relative to the run directory, in emission order.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// Owns a run directory: writes the manifest before work starts and keeps
/// the artifact list in sync with what is written.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl RunDir {
    pub fn start(dir: &Path, command: &str, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: config_hash.to_string(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                status: RunStatus::Running,
                artifacts: Vec::new(),
                wall_clock_seconds: 0.0,
                checks: Vec::new(),
                passed: false,
            },
            started: Instant::now(),
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.dir.join(MANIFEST_FILE), &json)
    }

    pub fn write_artifact(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let json = serde_json::to_vec_pretty(value)?;
        self.write_artifact(name, &json)
    }

    pub fn finish(mut self, checks: Vec<CheckResult>) -> Result<RunManifest> {
        self.manifest.passed = checks.iter().all(|c| c.passed);
        self.manifest.checks = checks;
        self.manifest.status = RunStatus::Complete;
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        self.write_manifest()?;
        Ok(self.manifest)
    }

    /// Records a failure in the manifest and hands the error back.
    pub fn abort(mut self, err: Error) -> Error {
        self.manifest.status = RunStatus::Failed;
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        self.manifest.checks.push(CheckResult::failed("run", &err));
        if let Err(e) = self.write_manifest() {
            log::error!("could not record the failure in the manifest: {e}");
        }
        err
    }
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Files in `dir` that the manifest does not list (the manifest itself excluded).
pub fn orphan_outputs(dir: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name != MANIFEST_FILE && !manifest.artifacts.contains(&name) {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

/// 17 significant digits, round-trippable.
pub fn fmt_real(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Int(i) => i.to_string(),
                Cell::Real(v) => fmt_real(*v),
                Cell::Text(t) => t.clone(),
            })
            .collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
