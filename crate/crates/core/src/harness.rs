//! Experiment orchestration: JSON configuration, method wiring, the
//! particle / Picard / Fokker–Planck comparison report and CSV plot data.
//!
//! Methods run in dependency order `particles → picard → malliavin`, with
//! the Fokker–Planck solve independent of that chain. Every output is a
//! pure function of the configuration, so two runs of one config produce
//! identical bytes regardless of the thread count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coefficients::{check_ellipticity, CoefficientModel, EllipticityReport, Region};
use crate::error::{Error, Result};
use crate::fokkerplanck::{fp_statistics_curve, solve_fp, DtPolicy, FPMetadata, FPProblem, FPSolution};
use crate::malliavin::{
    covariance_curve, diagnostic_csv, ellipticity_bound_check, simulate_first_variation, zy_residual,
    DEFAULT_SLACK_FACTOR, DEGENERATE_LAMBDA,
};
use crate::measures::{
    kde_1d, kde_2d, l1_grid_distance, w2_distance, Axis, Bandwidth, EmpiricalMeasure, GridDensity, StatisticFlow,
};
use crate::particle::{moment_curve, simulate_interacting, statistic_flow, InitialLaw, PathBundle, TimeGrid};
use crate::picard::{picard_run, PicardOptions, PicardRun};
use crate::presets::{self, Preset, PresetInfo};


/// Environment variable holding the default output directory.
pub const OUTDIR_ENV: &str = "MVKIT_OUTDIR";
const DEFAULT_OUTDIR: &str = "mvkit-out";
const MOMENT_ORDERS: [u32; 3] = [1, 2, 4];
const SLICES: usize = 64;
const SLICE_SEED: u64 = 0x5eed;
const ELLIPTICITY_SAMPLES: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Particles,
    Picard,
    Fp,
    Malliavin,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Particles => "particles",
            Method::Picard => "picard",
            Method::Fp => "fp",
            Method::Malliavin => "malliavin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRef {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Uniform lattice applied to every spatial axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_picard_tol")]
    pub picard: f64,
    #[serde(default = "default_picard_iters")]
    pub picard_max_iters: usize,
}

fn default_picard_tol() -> f64 {
    1e-3
}

fn default_picard_iters() -> usize {
    8
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            picard: default_picard_tol(),
            picard_max_iters: default_picard_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalliavinSettings {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// Ellipticity constant; estimated by sampling when absent and the
    /// preset has no closed form.
    #[serde(default)]
    pub lambda: Option<f64>,
}

fn default_paths() -> usize {
    100
}

fn default_slack() -> f64 {
    DEFAULT_SLACK_FACTOR
}

impl Default for MalliavinSettings {
    fn default() -> Self {
        Self {
            paths: default_paths(),
            slack: default_slack(),
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetRef,
    pub methods: Vec<Method>,
    pub seed: u64,
    #[serde(default)]
    pub particles: usize,
    #[serde(default)]
    pub time_steps: usize,
    /// Defaults to the preset horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub space: Option<SpaceGrid>,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub malliavin: MalliavinSettings,
    /// Fixed Fokker–Planck step; automatic CFL step when absent.
    #[serde(default)]
    pub fp_dt: Option<f64>,
    #[serde(default)]
    pub as_printed: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("missing field") || msg.starts_with("unknown field"))
                .unwrap_or("<document>")
                .to_string();
            Error::config(field, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn needs_paths(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m, Method::Particles | Method::Picard | Method::Malliavin))
    }

    /// Checks the whole document against the preset before any compute.
    pub fn validate(&self) -> Result<ValidatedConfig> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        let mut methods = self.methods.clone();
        methods.sort();
        if methods.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("methods", "methods must not repeat"));
        }
        let preset = presets::preset(&self.preset.name, &self.preset.params).map_err(|e| match e {
            Error::Config { field, message } if field == "preset" => Error::config("preset.name", message),
            other => other,
        })?;
        let horizon = self.horizon.unwrap_or(preset.horizon);
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::config("horizon", "must be positive and finite"));
        }
        let mut grid = None;
        if self.needs_paths() {
            if self.particles == 0 {
                return Err(Error::config("particles", "must be >= 1"));
            }
            if self.time_steps == 0 {
                return Err(Error::config("time_steps", "must be >= 1"));
            }
            grid = Some(TimeGrid::new(horizon, self.time_steps)?);
        }
        for (i, &t) in self.snapshot_times.iter().enumerate() {
            let field = format!("snapshot_times[{i}]");
            if !(0.0..=horizon).contains(&t) {
                return Err(Error::config(field, format!("{t} is outside [0, {horizon}]")));
            }
            if let Some(g) = &grid {
                if g.index_of(t).is_none() {
                    return Err(Error::config(field, format!("{t} is not an instant of the time grid")));
                }
            }
        }
        if self.snapshot_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("snapshot_times", "must be strictly increasing"));
        }
        if methods.contains(&Method::Picard) {
            if !(self.tolerances.picard > 0.0) {
                return Err(Error::config("tolerances.picard", "must be > 0"));
            }
            if self.tolerances.picard_max_iters < 2 {
                return Err(Error::config("tolerances.picard_max_iters", "must be >= 2"));
            }
            if self.snapshot_times.is_empty() {
                return Err(Error::config("snapshot_times", "picard compares iterates at the snapshot times"));
            }
        }
        if methods.contains(&Method::Malliavin) {
            if self.malliavin.paths == 0 || self.malliavin.paths > self.particles {
                return Err(Error::config("malliavin.paths", "must be in 1..=particles"));
            }
            if !(self.malliavin.slack >= 0.0) {
                return Err(Error::config("malliavin.slack", "must be >= 0"));
            }
            if let Some(l) = self.malliavin.lambda {
                if !(l >= 0.0) {
                    return Err(Error::config("malliavin.lambda", "must be >= 0"));
                }
            }
        }
        if self.as_printed && preset.printed.is_none() {
            return Err(Error::config("as_printed", format!("preset `{}` has no printed form", preset.name)));
        }
        let wants_grid = methods.contains(&Method::Fp);
        let axes = match (&self.space, wants_grid) {
            (None, true) => return Err(Error::config("space", "required by the fp method")),
            (None, false) => None,
            (Some(s), _) => {
                let axis = Axis::with_nodes(s.lo, s.hi, s.nodes).map_err(|e| Error::config("space", e.to_string()))?;
                Some(vec![axis; preset.model.dim()])
            }
        };
        if wants_grid {
            if preset.model.dim() > 2 {
                return Err(Error::config("methods", "fp supports 1D and 2D presets only"));
            }
            if matches!(preset.law, InitialLaw::Point(_)) {
                return Err(Error::config(
                    "preset.params",
                    "fp needs a Gaussian initial law with positive spread",
                ));
            }
            if let Some(dt) = self.fp_dt {
                if !(dt > 0.0) {
                    return Err(Error::config("fp_dt", "must be > 0"));
                }
            }
        }
        Ok(ValidatedConfig {
            config: self.clone(),
            methods,
            preset,
            horizon,
            grid,
            axes,
        })
    }
}

pub struct ValidatedConfig {
    pub config: ExperimentConfig,
    /// Sorted in execution order.
    pub methods: Vec<Method>,
    pub preset: Preset,
    pub horizon: f64,
    pub grid: Option<TimeGrid>,
    pub axes: Option<Vec<Axis>>,
}

impl ValidatedConfig {
    fn has(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

// ---------------------------------------------------------------- output

/// Writes files under one root; each file appears atomically under its
/// final name.
#[derive(Debug, Clone)]
pub struct ArtifactWriter {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            written: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn write(&mut self, relative: impl AsRef<Path>, contents: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(relative);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }
}

/// Something that can be dumped as plot data.
pub enum PlotData<'a> {
    Density(&'a GridDensity),
    Cloud { t: f64, measure: &'a EmpiricalMeasure },
    Table { name: &'a str, csv: String },
}

/// `<preset>/<method>/<preset>_<method>_t<time>.csv` for snapshots and
/// `<preset>/<method>/<preset>_<method>_<name>.csv` for tables.
pub fn plot_path(preset: &str, method: &str, data: &PlotData<'_>) -> PathBuf {
    let file = match data {
        PlotData::Density(g) => format!("{preset}_{method}_t{:.4}.csv", g.time),
        PlotData::Cloud { t, .. } => format!("{preset}_{method}_t{t:.4}.csv"),
        PlotData::Table { name, .. } => format!("{preset}_{method}_{name}.csv"),
    };
    Path::new(preset).join(method).join(file)
}

pub fn emit_plotdata(writer: &mut ArtifactWriter, preset: &str, method: &str, data: PlotData<'_>) -> Result<PathBuf> {
    let rel = plot_path(preset, method, &data);
    let body = match data {
        PlotData::Density(g) => g.to_csv(),
        PlotData::Cloud { measure, .. } => measure.to_csv(),
        PlotData::Table { csv, .. } => csv,
    };
    writer.write(rel, body.as_bytes())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodStatus {
    pub method: Method,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotMetrics {
    pub t: f64,
    /// `L¹(KDE(particles), FP)` on the FP lattice.
    pub l1_particles_fp: Option<f64>,
    pub l1_picard_fp: Option<f64>,
    /// W₂ between the particle and Picard clouds (sliced in `d ≥ 2`).
    pub w2_particles_picard: Option<f64>,
    /// `E‖X‖^p` per method and order.
    pub moments: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardSummary {
    pub n_iters: usize,
    pub converged: bool,
    pub gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FPSummary {
    pub as_printed: bool,
    pub metadata: FPMetadata,
    /// `∫ φ_k p` at each snapshot.
    pub statistics: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalliavinSummary {
    pub paths: usize,
    pub t: f64,
    pub lambda: f64,
    /// `known`, `config` or `estimated`.
    pub lambda_source: String,
    pub degenerate: bool,
    pub slack_factor: f64,
    /// Minimum over paths of `λ_min(Q(T))`.
    pub min_lambda_min: f64,
    /// Minimum over paths of `λ_min(Q(T)) − Tλ/γ⁴`.
    pub min_margin: f64,
    /// Minimum over paths of `margin + slack`; nonnegative when the bound holds everywhere.
    pub min_margin_plus_slack: f64,
    pub violations: usize,
    pub max_gamma: f64,
    pub max_zy_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub package: &'static str,
    pub version: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
}

impl Environment {
    fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub preset: String,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub horizon: f64,
    pub methods: Vec<MethodStatus>,
    pub snapshots: Vec<SnapshotMetrics>,
    pub picard: Option<PicardSummary>,
    pub fp: Option<FPSummary>,
    pub malliavin: Option<MalliavinSummary>,
    pub environment: Environment,
    pub config: ExperimentConfig,
}

impl ComparisonReport {
    pub fn failures(&self) -> impl Iterator<Item = &MethodStatus> {
        self.methods.iter().filter(|m| !m.ok)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

// ---------------------------------------------------------------- runs

struct ParticleOutput {
    paths: PathBundle,
    flow: StatisticFlow,
}

struct MalliavinOutput {
    summary: MalliavinSummary,
    per_path: Vec<String>,
    table: String,
}

fn snapshot_clouds(paths: &PathBundle, times: &[f64]) -> Result<Vec<EmpiricalMeasure>> {
    times
        .iter()
        .map(|&t| {
            let k = paths
                .grid()
                .index_of(t)
                .ok_or_else(|| Error::argument(format!("t={t} is not a grid instant")))?;
            paths.snapshot(k)
        })
        .collect()
}

fn moments_csv(paths: &PathBundle) -> Result<String> {
    let curves = MOMENT_ORDERS
        .iter()
        .map(|&p| moment_curve(paths, p as f64))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("t,m1,m2,m4\n");
    for (k, t) in paths.grid().times().iter().enumerate() {
        out.push_str(&format!("{t},{},{},{}\n", curves[0][k], curves[1][k], curves[2][k]));
    }
    Ok(out)
}

fn run_particles(v: &ValidatedConfig) -> Result<ParticleOutput> {
    let grid = v.grid.as_ref().expect("validated");
    let paths = simulate_interacting(&v.preset.model, &v.preset.law, grid, v.config.particles, v.config.seed)?;
    let flow = statistic_flow(&paths, v.preset.model.functionals())?;
    Ok(ParticleOutput { paths, flow })
}

fn run_picard(v: &ValidatedConfig) -> Result<PicardRun> {
    let grid = v.grid.as_ref().expect("validated");
    let mut opts = PicardOptions::new(
        v.config.tolerances.picard,
        v.config.tolerances.picard_max_iters,
        v.config.snapshot_times.clone(),
    );
    opts.n_slices = SLICES;
    opts.slice_seed = SLICE_SEED;
    picard_run(&v.preset.model, &v.preset.law, grid, v.config.particles, v.config.seed, &opts)
}

fn fp_model(v: &ValidatedConfig) -> &CoefficientModel {
    match (&v.preset.printed, v.config.as_printed) {
        (Some(printed), true) => printed,
        _ => &v.preset.model,
    }
}

fn run_fp(v: &ValidatedConfig) -> Result<FPSolution> {
    let axes = v.axes.clone().expect("validated");
    let dt = v.config.fp_dt.map_or(DtPolicy::Auto, DtPolicy::Fixed);
    let mut times = v.config.snapshot_times.clone();
    if times.last() != Some(&v.horizon) {
        times.push(v.horizon);
    }
    let problem = FPProblem::from_law(fp_model(v).clone(), axes, &v.preset.law, v.horizon, times, dt)?;
    solve_fp(&problem)
}

/// Bounding box of all states on the first `paths` trajectories.
fn state_box(paths: &PathBundle, n_paths: usize) -> Vec<(f64, f64)> {
    let d = paths.dim();
    let mut bx = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for k in 0..=paths.grid().steps() {
        for i in 0..n_paths {
            for (b, &x) in bx.iter_mut().zip(paths.state(k, i)) {
                b.0 = b.0.min(x);
                b.1 = b.1.max(x);
            }
        }
    }
    for b in &mut bx {
        if b.0 == b.1 {
            b.0 -= 0.5;
            b.1 += 0.5;
        }
    }
    bx
}

/// Samples `λ_min(A)` over `[0, T]` × the bounding box of the first
/// `n_paths` trajectories, with statistics drawn from the flow rows.
fn ellipticity_along(
    model: &CoefficientModel,
    paths: &PathBundle,
    flow: &StatisticFlow,
    n_paths: usize,
    n_samples: usize,
    seed: u64,
) -> Result<EllipticityReport> {
    let region = Region::new((0.0, paths.grid().horizon()), state_box(paths, n_paths));
    let s_samples: Vec<Vec<f64>> = (0..flow.len()).map(|k| flow.row(k).to_vec()).collect();
    check_ellipticity(model, &region, &s_samples, n_samples, seed)
}

/// Ellipticity estimate for a preset over the region its interacting
/// particle system visits.
pub fn preset_ellipticity(
    preset: &Preset,
    particles: usize,
    time_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<EllipticityReport> {
    let grid = TimeGrid::new(preset.horizon, time_steps)?;
    let paths = simulate_interacting(&preset.model, &preset.law, &grid, particles, seed)?;
    let flow = statistic_flow(&paths, preset.model.functionals())?;
    ellipticity_along(&preset.model, &paths, &flow, particles, n_samples, seed)
}

fn run_malliavin(v: &ValidatedConfig, paths: &PathBundle, flow: &StatisticFlow) -> Result<MalliavinOutput> {
    let model = &v.preset.model;
    let settings = &v.config.malliavin;
    let n_paths = settings.paths;
    let (lambda, source) = match (settings.lambda, v.preset.known_lambda) {
        (Some(l), _) => (l, "config"),
        (None, Some(l)) => (l, "known"),
        (None, None) => {
            let rep = ellipticity_along(model, paths, flow, n_paths, ELLIPTICITY_SAMPLES, v.config.seed)?;
            (rep.lambda_min_estimate, "estimated")
        }
    };

    let results: Vec<Result<(String, f64, f64, f64, f64, bool, f64)>> = {
        use rayon::prelude::*;
        (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let fv = simulate_first_variation(model, paths, i, flow)?;
                let curve = covariance_curve(&fv, paths, model, flow, lambda)?;
                let zy = zy_residual(&fv);
                let last = curve.last().expect("at least one step");
                let rep = ellipticity_bound_check(last, settings.slack);
                let zy_max = zy.iter().copied().fold(0.0, f64::max);
                Ok((
                    diagnostic_csv(&curve, &zy),
                    last.lambda_min,
                    rep.margin,
                    rep.slack,
                    last.gamma,
                    rep.holds,
                    zy_max,
                ))
            })
            .collect()
    };
    let mut per_path = Vec::with_capacity(n_paths);
    let mut table = String::from("path,lambda_min,gamma,bound_margin,slack,holds,zy_max\n");
    let mut summary = MalliavinSummary {
        paths: n_paths,
        t: v.horizon,
        lambda,
        lambda_source: source.to_string(),
        degenerate: lambda <= DEGENERATE_LAMBDA,
        slack_factor: settings.slack,
        min_lambda_min: f64::INFINITY,
        min_margin: f64::INFINITY,
        min_margin_plus_slack: f64::INFINITY,
        violations: 0,
        max_gamma: 0.0,
        max_zy_residual: 0.0,
    };
    for (i, r) in results.into_iter().enumerate() {
        let (csv, lmin, margin, slack, gamma, holds, zy_max) = r?;
        table.push_str(&format!("{i},{lmin},{gamma},{margin},{slack},{},{zy_max}\n", holds as u8));
        summary.min_lambda_min = summary.min_lambda_min.min(lmin);
        summary.min_margin = summary.min_margin.min(margin);
        summary.min_margin_plus_slack = summary.min_margin_plus_slack.min(margin + slack);
        summary.violations += usize::from(!holds);
        summary.max_gamma = summary.max_gamma.max(gamma);
        summary.max_zy_residual = summary.max_zy_residual.max(zy_max);
        per_path.push(csv);
    }
    Ok(MalliavinOutput {
        summary,
        per_path,
        table,
    })
}

fn kde_on(axes: &[Axis], cloud: &EmpiricalMeasure, t: f64) -> Result<GridDensity> {
    let mut g = match axes.len() {
        1 => kde_1d(cloud, axes[0], Bandwidth::Auto)?,
        _ => kde_2d(cloud, [axes[0], axes[1]], Bandwidth::Auto)?,
    };
    g.time = t;
    Ok(g)
}

fn moment_row(f: impl Fn(f64) -> f64) -> BTreeMap<String, f64> {
    MOMENT_ORDERS.iter().map(|&p| (p.to_string(), f(p as f64))).collect()
}

fn status(method: Method, r: &Result<impl Sized>) -> MethodStatus {
    MethodStatus {
        method,
        ok: r.is_ok(),
        error: r.as_ref().err().map(|e| e.to_string()),
    }
}

/// Runs every configured method, writes CSVs and `report.json` under
/// `out_root`, and returns the report. Method failures are recorded in the
/// report; only configuration and I/O problems are returned as errors.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<ComparisonReport> {
    let v = config.validate()?;
    let name = v.preset.name.clone();
    let started = Instant::now();
    log::info!("running `{name}` with methods {:?}", v.methods);

    let chain = || {
        let needs_particles = v.has(Method::Particles) || (v.has(Method::Malliavin) && !v.has(Method::Picard));
        let particles = needs_particles.then(|| run_particles(&v));
        let picard = v.has(Method::Picard).then(|| run_picard(&v));
        let malliavin = v.has(Method::Malliavin).then(|| {
            let source = match (&picard, &particles) {
                (Some(Ok(run)), _) => {
                    let flow = run.final_flow().clone();
                    Ok((&run.final_paths, flow))
                }
                (_, Some(Ok(p))) => Ok((&p.paths, p.flow.clone())),
                (Some(Err(e)), _) | (_, Some(Err(e))) => {
                    Err(Error::argument(format!("no trajectories to follow: {e}")))
                }
                (None, None) => unreachable!("malliavin always has a path source"),
            };
            source.and_then(|(paths, flow)| run_malliavin(&v, paths, &flow))
        });
        (particles, picard, malliavin)
    };
    let fp_task = || v.has(Method::Fp).then(|| run_fp(&v));
    let (fp, (particles, picard, malliavin)) = rayon::join(fp_task, chain);
    log::info!("`{name}` computed in {:.2?}", started.elapsed());

    let mut writer = ArtifactWriter::new(out_root);
    let mut methods = Vec::new();
    let times = &v.config.snapshot_times;

    let particle_clouds = match &particles {
        Some(Ok(p)) if v.has(Method::Particles) => Some(snapshot_clouds(&p.paths, times)?),
        _ => None,
    };
    if v.has(Method::Particles) {
        let r = particles.as_ref().expect("particles ran");
        methods.push(status(Method::Particles, r));
        if let (Ok(p), Some(clouds)) = (r, &particle_clouds) {
            for (t, c) in times.iter().zip(clouds) {
                emit_plotdata(&mut writer, &name, "particles", PlotData::Cloud { t: *t, measure: c })?;
            }
            let csv = moments_csv(&p.paths)?;
            emit_plotdata(&mut writer, &name, "particles", PlotData::Table { name: "moments", csv })?;
        }
    }

    let mut picard_summary = None;
    let picard_clouds = match &picard {
        Some(Ok(run)) => Some(run.iterates.last().expect("iterates").snapshots.clone()),
        _ => None,
    };
    if let Some(r) = &picard {
        methods.push(status(Method::Picard, r));
        if let Ok(run) = r {
            for (t, c) in times.iter().zip(picard_clouds.as_ref().expect("set above")) {
                emit_plotdata(&mut writer, &name, "picard", PlotData::Cloud { t: *t, measure: c })?;
            }
            emit_plotdata(&mut writer, &name, "picard", PlotData::Table { name: "gaps", csv: run.gap_csv() })?;
            let csv = moments_csv(&run.final_paths)?;
            emit_plotdata(&mut writer, &name, "picard", PlotData::Table { name: "moments", csv })?;
            picard_summary = Some(PicardSummary {
                n_iters: run.n_iters,
                converged: run.converged,
                gaps: run.gaps.clone(),
            });
        }
    }

    let mut fp_summary = None;
    if let Some(r) = &fp {
        methods.push(status(Method::Fp, r));
        if let Ok(sol) = r {
            for s in &sol.snapshots {
                emit_plotdata(&mut writer, &name, "fp", PlotData::Density(s))?;
            }
            let mut csv = String::from("t,mass,boundary_flux,min_value\n");
            for k in 0..sol.times.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    sol.times[k], sol.mass_curve[k], sol.boundary_flux[k], sol.min_value_curve[k]
                ));
            }
            emit_plotdata(&mut writer, &name, "fp", PlotData::Table { name: "mass", csv })?;
            fp_summary = Some(FPSummary {
                as_printed: v.config.as_printed,
                metadata: sol.metadata.clone(),
                statistics: fp_statistics_curve(sol, fp_model(&v).functionals())?,
            });
        }
    }

    let mut malliavin_summary = None;
    if let Some(r) = &malliavin {
        methods.push(status(Method::Malliavin, r));
        if let Ok(out) = r {
            for (i, csv) in out.per_path.iter().enumerate() {
                let table = format!("path{i:04}");
                emit_plotdata(&mut writer, &name, "malliavin", PlotData::Table { name: &table, csv: csv.clone() })?;
            }
            emit_plotdata(
                &mut writer,
                &name,
                "malliavin",
                PlotData::Table { name: "summary", csv: out.table.clone() },
            )?;
            malliavin_summary = Some(out.summary.clone());
        }
    }

    // snapshot comparisons
    let fp_ok = fp.as_ref().and_then(|r| r.as_ref().ok());
    let mut snapshots = Vec::with_capacity(times.len());
    for (si, &t) in times.iter().enumerate() {
        let fp_snap = fp_ok.map(|sol| &sol.snapshots[si]);
        let pc = particle_clouds.as_ref().map(|c| &c[si]);
        let qc = picard_clouds.as_ref().map(|c| &c[si]);
        let mut moments = BTreeMap::new();
        let mut l1_particles_fp = None;
        let mut l1_picard_fp = None;
        if let Some(c) = pc {
            moments.insert("particles".to_string(), moment_row(|p| c.moment(p)));
        }
        if let Some(c) = qc {
            moments.insert("picard".to_string(), moment_row(|p| c.moment(p)));
        }
        if let Some(g) = fp_snap {
            moments.insert("fp".to_string(), moment_row(|p| g.moment(p)));
            let axes = g.axes().to_vec();
            if let Some(c) = pc {
                let kde = kde_on(&axes, c, t)?;
                l1_particles_fp = Some(l1_grid_distance(&kde, g)?);
                emit_plotdata(&mut writer, &name, "particles-kde", PlotData::Density(&kde))?;
            }
            if let Some(c) = qc {
                l1_picard_fp = Some(l1_grid_distance(&kde_on(&axes, c, t)?, g)?);
            }
        }
        let w2_particles_picard = match (pc, qc) {
            (Some(a), Some(b)) => Some(w2_distance(a, b, SLICES, SLICE_SEED)?),
            _ => None,
        };
        snapshots.push(SnapshotMetrics {
            t,
            l1_particles_fp,
            l1_picard_fp,
            w2_particles_picard,
            moments,
        });
    }

    let report = ComparisonReport {
        preset: name.clone(),
        params: v.preset.params.clone(),
        seed: v.config.seed,
        horizon: v.horizon,
        methods,
        snapshots,
        picard: picard_summary,
        fp: fp_summary,
        malliavin: malliavin_summary,
        environment: Environment::current(),
        config: v.config.clone(),
    };
    writer.write(Path::new(&name).join("report.json"), report.to_json().as_bytes())?;
    for f in report.failures() {
        log::warn!("{} failed: {}", f.method.as_str(), f.error.as_deref().unwrap_or(""));
    }
    log::info!("`{name}` finished in {:.2?}, {} files", started.elapsed(), writer.written().len());
    Ok(report)
}

/// Output root: explicit choice, then the config, then `MVKIT_OUTDIR`,
/// then `./mvkit-out`.
pub fn resolve_output_dir(explicit: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUTDIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTDIR))
}

pub fn list_presets() -> Vec<PresetInfo> {
    presets::list_presets()
}
