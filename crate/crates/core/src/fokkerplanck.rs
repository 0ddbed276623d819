//! Explicit finite-difference solver for the nonlocal Fokker–Planck
//! equation
//!
//! ```text
//! ∂ₜp = −Σᵢ ∂ᵢ(bᵢ p) + ½ Σᵢⱼ ∂ᵢ∂ⱼ(Aᵢⱼ p),   A = σσᵀ,
//! ```
//!
//! with `b`, `σ` evaluated at the statistics `s = ∫ φ p` of the current
//! density. The scheme is written in flux form on a 1D or 2D node lattice:
//! donor-cell upwinding for advection, centred differences of `½Aᵢᵢp` for
//! the diagonal diffusion and a centred mixed difference of `A₁₂p` for the
//! cross term. Boundary nodes are held at zero and every unit of mass that
//! crosses the outermost interfaces is booked in `boundary_flux`, so
//! `mass + boundary_flux` stays at one up to rounding.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{outer_gram_into, CoefficientModel, StatisticFunctional};
use crate::error::{Error, Result};
use crate::linalg::cholesky_psd;
use crate::measures::{grid_statistics, Axis, GridDensity};
use crate::particle::InitialLaw;

/// Safety factor applied to the explicit stability limit.
pub const CFL_SAFETY: f64 = 0.9;
/// Largest tolerated `|mass + boundary_flux − 1|`.
pub const CONSERVATION_TOL: f64 = 1e-4;
/// Most negative tolerated density value.
pub const POSITIVITY_FLOOR: f64 = -1e-3;
/// Initial law must fit in the box with this many standard deviations.
pub const DOMAIN_SDS: f64 = 6.0;

const NODE_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtPolicy {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct FPProblem {
    pub model: CoefficientModel,
    pub p0: GridDensity,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub dt_policy: DtPolicy,
}

fn gaussian_pdf(law: &InitialLaw) -> Result<impl Fn(&[f64]) -> f64> {
    let (mean, cov) = match law {
        InitialLaw::Point(_) => {
            return Err(Error::argument(
                "a point-mass initial law has no grid density; use a Gaussian law",
            ))
        }
        InitialLaw::Gaussian { mean, covariance } => (mean.clone(), covariance.clone()),
    };
    let d = mean.len();
    let l = cholesky_psd(&cov.symmetrized())
        .filter(|l| (0..d).all(|i| l[(i, i)] > 0.0))
        .ok_or_else(|| Error::argument("initial covariance must be positive definite"))?;
    let log_det: f64 = (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let norm = (-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det)).exp();
    Ok(move |x: &[f64]| {
        // z = L⁻¹ (x − mean)
        let mut z = [0.0; 2];
        for i in 0..d {
            let mut r = x[i] - mean[i];
            for k in 0..i {
                r -= l[(i, k)] * z[k];
            }
            z[i] = r / l[(i, i)];
        }
        let q: f64 = z[..d].iter().map(|v| v * v).sum();
        norm * (-0.5 * q).exp()
    })
}

fn zero_boundary(p: &mut GridDensity) {
    let axes = p.axes().to_vec();
    let values = p.values_mut();
    match axes.len() {
        1 => {
            values[0] = 0.0;
            values[axes[0].cells] = 0.0;
        }
        _ => {
            let (nx, ny) = (axes[0].nodes(), axes[1].nodes());
            for i in 0..nx {
                for j in 0..ny {
                    if i == 0 || j == 0 || i + 1 == nx || j + 1 == ny {
                        values[i * ny + j] = 0.0;
                    }
                }
            }
        }
    }
}

impl FPProblem {
    /// `p₀` sampled from a Gaussian initial law at the nodes, with the
    /// boundary zeroed and the result renormalised.
    pub fn from_law(
        model: CoefficientModel,
        axes: Vec<Axis>,
        law: &InitialLaw,
        horizon: f64,
        snapshot_times: Vec<f64>,
        dt_policy: DtPolicy,
    ) -> Result<Self> {
        if law.dim() != model.dim() || axes.len() != model.dim() {
            return Err(Error::argument("model, law and grid dimensions differ"));
        }
        let pdf = gaussian_pdf(law)?;
        let cov = law.covariance();
        for (i, a) in axes.iter().enumerate() {
            let sd = cov[(i, i)].sqrt();
            let m = law.mean()[i];
            if a.lo > m - DOMAIN_SDS * sd || a.hi < m + DOMAIN_SDS * sd {
                return Err(Error::argument(format!(
                    "axis {i} [{}, {}] does not contain mean ± {DOMAIN_SDS} sd = [{}, {}]",
                    a.lo,
                    a.hi,
                    m - DOMAIN_SDS * sd,
                    m + DOMAIN_SDS * sd
                )));
            }
        }
        let mut p0 = GridDensity::from_fn(axes, 0.0, pdf)?;
        zero_boundary(&mut p0);
        p0.normalize()?;
        Self::with_density(model, p0, horizon, snapshot_times, dt_policy)
    }

    /// Uses `p0` as given after zeroing its boundary nodes; the remaining
    /// mass must be one within `1e-8`.
    pub fn with_density(
        model: CoefficientModel,
        mut p0: GridDensity,
        horizon: f64,
        snapshot_times: Vec<f64>,
        dt_policy: DtPolicy,
    ) -> Result<Self> {
        if p0.dims() != model.dim() {
            return Err(Error::argument("grid and model dimensions differ"));
        }
        if model.dim() != 1 && model.dim() != 2 {
            return Err(Error::argument("Fokker–Planck solves are 1D or 2D"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::argument("horizon must be positive"));
        }
        if let DtPolicy::Fixed(dt) = dt_policy {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::argument("fixed dt must be positive"));
            }
        }
        for &t in &snapshot_times {
            if !(0.0..=horizon).contains(&t) {
                return Err(Error::argument(format!("snapshot time {t} outside [0, {horizon}]")));
            }
        }
        zero_boundary(&mut p0);
        p0.time = 0.0;
        p0.mass_tol = 1e-8;
        if !p0.mass_is_valid() || p0.min_value() < 0.0 {
            return Err(Error::argument(format!(
                "initial density must be nonnegative with unit mass (mass = {})",
                p0.mass()
            )));
        }
        let mut snapshot_times = snapshot_times;
        snapshot_times.sort_by(f64::total_cmp);
        snapshot_times.dedup();
        Ok(Self {
            model,
            p0,
            horizon,
            snapshot_times,
            dt_policy,
        })
    }
}

/// Drift and diffusion fields on the lattice, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FPCoefficients {
    pub stats: Vec<f64>,
    /// `n_nodes × d`.
    pub drift: Vec<f64>,
    /// `n_nodes × d × d`, row-major per node.
    pub diffusion: Vec<f64>,
}

fn node_coordinates(p: &GridDensity) -> Vec<f64> {
    let mut x = vec![0.0; p.dims()];
    let mut out = Vec::with_capacity(p.len() * p.dims());
    for k in 0..p.len() {
        p.fill_node(k, &mut x);
        out.extend_from_slice(&x);
    }
    out
}

fn fill_coefficients(
    model: &CoefficientModel,
    t: f64,
    p: &GridDensity,
    coords: &[f64],
    stats: Vec<f64>,
    out: &mut FPCoefficients,
) -> Result<()> {
    let d = model.dim();
    let m = model.noise_dim();
    out.drift.resize(p.len() * d, 0.0);
    out.diffusion.resize(p.len() * d * d, 0.0);
    out.drift
        .par_chunks_mut(d * NODE_BLOCK)
        .zip(out.diffusion.par_chunks_mut(d * d * NODE_BLOCK))
        .enumerate()
        .for_each(|(blk, (bs, as_))| {
            let mut sigma = vec![0.0; d * m];
            let xs = coords[blk * NODE_BLOCK * d..].chunks(d);
            for ((b, a), x) in bs.chunks_mut(d).zip(as_.chunks_mut(d * d)).zip(xs) {
                model.drift_into(t, x, &stats, b);
                model.diffusion_into(t, x, &stats, &mut sigma);
                outer_gram_into(&sigma, d, m, a);
            }
        });
    let bad = out
        .drift
        .chunks(d)
        .zip(out.diffusion.chunks(d * d))
        .position(|(b, a)| b.iter().chain(a).any(|v| !v.is_finite()));
    if let Some(k) = bad {
        return Err(Error::numeric("Fokker–Planck coefficients", format!("node {:?} at t={t}", p.node(k))));
    }
    out.stats = stats;
    Ok(())
}

/// `b(t, x, s)` and `A(t, x, s)` at every node with `s = ∫ φ p`.
pub fn derive_fp_coefficients(model: &CoefficientModel, t: f64, p: &GridDensity) -> Result<FPCoefficients> {
    if p.dims() != model.dim() {
        return Err(Error::argument("grid and model dimensions differ"));
    }
    if !p.mass_is_valid() {
        return Err(Error::argument(format!("density mass {} is not within tolerance", p.mass())));
    }
    let stats = grid_statistics(p, model.functionals())?;
    let mut out = FPCoefficients {
        stats: Vec::new(),
        drift: Vec::new(),
        diffusion: Vec::new(),
    };
    fill_coefficients(model, t, p, &node_coordinates(p), stats, &mut out)?;
    Ok(out)
}

/// `Σ` of the explicit stability terms; the stable step is `1 / rate`.
fn stability_rate(c: &FPCoefficients, axes: &[Axis]) -> f64 {
    let d = axes.len();
    let h: Vec<f64> = axes.iter().map(Axis::spacing).collect();
    let mut max_a = vec![0.0f64; d];
    let mut max_b = vec![0.0f64; d];
    let mut max_cross = 0.0f64;
    for (b, a) in c.drift.chunks(d).zip(c.diffusion.chunks(d * d)) {
        for i in 0..d {
            max_a[i] = max_a[i].max(a[i * d + i].abs());
            max_b[i] = max_b[i].max(b[i].abs());
        }
        if d == 2 {
            max_cross = max_cross.max(a[1].abs());
        }
    }
    let mut rate = 0.0;
    for i in 0..d {
        rate += 2.0 * max_a[i] / (h[i] * h[i]) + max_b[i] / h[i];
    }
    if d == 2 {
        rate += 2.0 * max_cross / (h[0] * h[1]);
    }
    rate
}

#[inline]
fn upwind(b_left: f64, p_left: f64, b_right: f64, p_right: f64) -> f64 {
    b_left.max(0.0) * p_left + b_right.min(0.0) * p_right
}

/// Writes `∂ₜp` into `rate` (zero on the boundary) and returns the mass
/// outflow rate through the boundary.
fn rhs_1d(p: &[f64], c: &FPCoefficients, h: f64, rate: &mut [f64]) -> f64 {
    let n = p.len();
    let flux = |i: usize| {
        // interface between i and i + 1
        let adv = upwind(c.drift[i], p[i], c.drift[i + 1], p[i + 1]);
        let diff = -(0.5 * c.diffusion[i + 1] * p[i + 1] - 0.5 * c.diffusion[i] * p[i]) / h;
        adv + diff
    };
    rate[0] = 0.0;
    rate[n - 1] = 0.0;
    let mut left = flux(0);
    let first = left;
    for i in 1..n - 1 {
        let right = flux(i);
        rate[i] = -(right - left) / h;
        left = right;
    }
    left - first
}

fn rhs_2d(p: &[f64], c: &FPCoefficients, axes: &[Axis], rate: &mut [f64], d2g: &mut [f64]) -> f64 {
    let (nx, ny) = (axes[0].nodes(), axes[1].nodes());
    let (hx, hy) = (axes[0].spacing(), axes[1].spacing());
    let a = |k: usize, r: usize, s: usize| c.diffusion[4 * k + 2 * r + s];
    let b = |k: usize, r: usize| c.drift[2 * k + r];

    // ∂_y (A₁₂ p) at every node, zero on the y-boundary rows where it is unused
    d2g.par_chunks_mut(ny).enumerate().for_each(|(i, row)| {
        row[0] = 0.0;
        row[ny - 1] = 0.0;
        for j in 1..ny - 1 {
            let up = i * ny + j + 1;
            let down = i * ny + j - 1;
            row[j] = (a(up, 0, 1) * p[up] - a(down, 0, 1) * p[down]) / (2.0 * hy);
        }
    });
    let d2g = &*d2g;

    let flux_x = |i: usize, j: usize| {
        let k = i * ny + j;
        let kr = k + ny;
        let adv = upwind(b(k, 0), p[k], b(kr, 0), p[kr]);
        let diff = -(0.5 * a(kr, 0, 0) * p[kr] - 0.5 * a(k, 0, 0) * p[k]) / hx;
        let cross = -0.5 * (d2g[kr] + d2g[k]);
        adv + diff + cross
    };
    let flux_y = |i: usize, j: usize| {
        let k = i * ny + j;
        let ku = k + 1;
        let adv = upwind(b(k, 1), p[k], b(ku, 1), p[ku]);
        let diff = -(0.5 * a(ku, 1, 1) * p[ku] - 0.5 * a(k, 1, 1) * p[k]) / hy;
        adv + diff
    };

    rate.par_chunks_mut(ny).enumerate().for_each(|(i, row)| {
        if i == 0 || i == nx - 1 {
            row.fill(0.0);
            return;
        }
        row[0] = 0.0;
        row[ny - 1] = 0.0;
        let mut down = flux_y(i, 0);
        for j in 1..ny - 1 {
            let up = flux_y(i, j);
            row[j] = -(flux_x(i, j) - flux_x(i - 1, j)) / hx - (up - down) / hy;
            down = up;
        }
    });

    let mut out = 0.0;
    for j in 1..ny - 1 {
        out += hy * (flux_x(nx - 2, j) - flux_x(0, j));
    }
    for i in 1..nx - 1 {
        out += hx * (flux_y(i, ny - 2) - flux_y(i, 0));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FPMetadata {
    pub axes: Vec<Axis>,
    pub steps: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    /// Largest `dt · rate` over all steps; `≤ 1` for a stable run.
    pub max_cfl: f64,
    pub min_mass: f64,
    pub max_mass: f64,
    pub min_value: f64,
    pub boundary_flux: f64,
    pub max_conservation_defect: f64,
}

#[derive(Debug, Clone)]
pub struct FPSolution {
    pub snapshots: Vec<GridDensity>,
    /// Time after each step, starting with `0`.
    pub times: Vec<f64>,
    pub mass_curve: Vec<f64>,
    pub min_value_curve: Vec<f64>,
    /// Cumulative mass that left through the boundary.
    pub boundary_flux: Vec<f64>,
    pub metadata: FPMetadata,
}

pub fn solve_fp(problem: &FPProblem) -> Result<FPSolution> {
    let model = &problem.model;
    let axes = problem.p0.axes().to_vec();
    let mut p = problem.p0.clone();
    let n = p.len();
    let mut coeffs = FPCoefficients {
        stats: Vec::new(),
        drift: Vec::new(),
        diffusion: Vec::new(),
    };
    let coords = node_coordinates(&p);
    let mut rate = vec![0.0; n];
    let mut d2g = vec![0.0; n];

    let mass0 = p.mass();
    let mut t = 0.0;
    let mut flux = 0.0;
    let mut times = vec![0.0];
    let mut mass_curve = vec![mass0];
    let mut min_value_curve = vec![p.min_value()];
    let mut flux_curve = vec![0.0];
    let (mut dt_min, mut dt_max, mut max_cfl, mut max_defect) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);

    let mut targets: Vec<f64> = problem.snapshot_times.clone();
    let run_to_horizon = targets.last().map_or(true, |&last| last < problem.horizon);
    if run_to_horizon {
        targets.push(problem.horizon);
    }
    let n_snapshots = problem.snapshot_times.len();
    let mut snapshots = Vec::with_capacity(n_snapshots);

    for (ti, &target) in targets.iter().enumerate() {
        while t < target {
            let stats = if model.n_stats() == 0 {
                Vec::new()
            } else {
                grid_statistics(&p, model.functionals())?
            };
            fill_coefficients(model, t, &p, &coords, stats, &mut coeffs)?;
            let r = stability_rate(&coeffs, &axes);
            let stable = if r > 0.0 { 1.0 / r } else { f64::INFINITY };
            let mut dt = match problem.dt_policy {
                DtPolicy::Auto => CFL_SAFETY * stable,
                DtPolicy::Fixed(h) => {
                    if h > stable {
                        return Err(Error::Stability { dt: h, limit: stable });
                    }
                    h
                }
            };
            let last = dt >= target - t;
            if last {
                dt = target - t;
            }

            let outflow = match axes.len() {
                1 => rhs_1d(p.values(), &coeffs, axes[0].spacing(), &mut rate),
                _ => rhs_2d(p.values(), &coeffs, &axes, &mut rate, &mut d2g),
            };
            for (v, r) in p.values_mut().iter_mut().zip(&rate) {
                *v += dt * r;
            }
            t = if last { target } else { t + dt };
            flux += dt * outflow;
            let step = times.len();

            let mass = p.mass();
            let min_value = p.min_value();
            if !mass.is_finite() || !min_value.is_finite() {
                return Err(Error::numeric("density", format!("step {step}")));
            }
            let defect = (mass + flux - mass0).abs();
            if defect > CONSERVATION_TOL {
                return Err(Error::Conservation { step, defect });
            }
            if min_value < POSITIVITY_FLOOR {
                return Err(Error::Positivity { step, min_value });
            }
            dt_min = dt_min.min(dt);
            dt_max = dt_max.max(dt);
            max_cfl = max_cfl.max(dt * r);
            max_defect = max_defect.max(defect);
            times.push(t);
            mass_curve.push(mass);
            min_value_curve.push(min_value);
            flux_curve.push(flux);
        }
        if ti < n_snapshots {
            let mut snap = p.clone();
            snap.time = target;
            snap.mass_tol = CONSERVATION_TOL.max(flux + 1e-8);
            snapshots.push(snap);
        }
    }
    log::debug!(
        "fp {}: {} steps, dt in [{dt_min:.3e}, {dt_max:.3e}], boundary flux {flux:.3e}",
        model.name(),
        times.len() - 1
    );
    let metadata = FPMetadata {
        axes,
        steps: times.len() - 1,
        dt_min: if dt_min.is_finite() { dt_min } else { 0.0 },
        dt_max,
        max_cfl,
        min_mass: mass_curve.iter().copied().fold(f64::INFINITY, f64::min),
        max_mass: mass_curve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_value: min_value_curve.iter().copied().fold(f64::INFINITY, f64::min),
        boundary_flux: flux,
        max_conservation_defect: max_defect,
    };
    Ok(FPSolution {
        snapshots,
        times,
        mass_curve,
        min_value_curve,
        boundary_flux: flux_curve,
        metadata,
    })
}

/// `∫ φ_k p` for every snapshot.
pub fn fp_statistics_curve(solution: &FPSolution, functionals: &[StatisticFunctional]) -> Result<Vec<Vec<f64>>> {
    solution
        .snapshots
        .iter()
        .map(|s| grid_statistics(s, functionals))
        .collect()
}
