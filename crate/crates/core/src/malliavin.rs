//! First-variation process, Malliavin derivatives and the Malliavin
//! covariance matrix along simulated particle paths.
//!
//! `Y` solves the linearised SDE `dY = Db Y dt + Σ_k Dσ^k Y dW^k` and `Z`
//! the companion equation
//! `dZ = −Z Db dt + Σ_k Z Dσ^k Dσ^k dt − Σ_k Z Dσ^k dW^k`, so that
//! `Z Y = I` in continuous time. Both are stepped with Euler on the same
//! increments that drove the particle, with the measure argument frozen to
//! the supplied statistic flow.

use std::fmt::Write as _;

use serde::Serialize;

use crate::coefficients::{outer_gram, CoefficientModel};
use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, Lu, Mat};
use crate::measures::StatisticFlow;
use crate::particle::{PathBundle, TimeGrid};

/// Condition numbers above this are treated as numerically singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Default multiplier `c` in the discretisation slack `c · dt · ‖Q‖`.
pub const DEFAULT_SLACK_FACTOR: f64 = 10.0;

/// Ellipticity constants at or below this are flagged as degenerate.
pub const DEGENERATE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FirstVariationPath {
    pub grid: TimeGrid,
    pub y: Vec<Mat>,
    pub z: Vec<Mat>,
    pub path_index: usize,
}

fn check_alignment(paths: &PathBundle, flow: &StatisticFlow, model: &CoefficientModel) -> Result<()> {
    if paths.dim() != model.dim() || paths.increments().noise_dim() != model.noise_dim() {
        return Err(Error::argument("path bundle does not match the model dimensions"));
    }
    let times = paths.grid().times();
    if flow.n_stats() != model.n_stats()
        || flow.len() != times.len()
        || flow.times().iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::argument("statistic flow is not aligned with the path grid"));
    }
    Ok(())
}

pub fn simulate_first_variation(
    model: &CoefficientModel,
    paths: &PathBundle,
    particle: usize,
    flow: &StatisticFlow,
) -> Result<FirstVariationPath> {
    check_alignment(paths, flow, model)?;
    if particle >= paths.n_particles() {
        return Err(Error::argument(format!("particle {particle} out of range")));
    }
    let d = model.dim();
    let m = model.noise_dim();
    let grid = *paths.grid();
    let dt = grid.dt();

    let mut db = vec![0.0; d * d];
    let mut dsig: Vec<Mat> = vec![Mat::zeros(d); m];
    let mut buf = vec![0.0; d * d];

    let mut y = Vec::with_capacity(grid.steps() + 1);
    let mut z = Vec::with_capacity(grid.steps() + 1);
    y.push(Mat::identity(d));
    z.push(Mat::identity(d));

    for k in 0..grid.steps() {
        let t = grid.time(k);
        let x = paths.state(k, particle);
        let s = flow.row(k);
        model.drift_jacobian_into(t, x, s, &mut db);
        let b = Mat::from_row_major(d, db.clone());
        for (j, c) in dsig.iter_mut().enumerate() {
            model.diffusion_jacobian_into(j, t, x, s, &mut buf);
            c.as_mut_slice().copy_from_slice(&buf);
        }
        let dw = paths.increments().get(k, particle);
        let (yk, zk) = (&y[k], &z[k]);

        let mut y_next = yk.clone();
        y_next.add_assign_scaled(&b.mul(yk), dt);
        let mut z_next = zk.clone();
        z_next.add_assign_scaled(&zk.mul(&b), -dt);
        for (j, c) in dsig.iter().enumerate() {
            y_next.add_assign_scaled(&c.mul(yk), dw[j]);
            let zc = zk.mul(c);
            z_next.add_assign_scaled(&zc.mul(c), dt);
            z_next.add_assign_scaled(&zc, -dw[j]);
        }
        if !y_next.is_finite() || !z_next.is_finite() {
            return Err(Error::numeric("first variation", format!("step {}", k + 1)));
        }
        y.push(y_next);
        z.push(z_next);
    }
    Ok(FirstVariationPath {
        grid,
        y,
        z,
        path_index: particle,
    })
}

/// `‖Z(t_k) Y(t_k) − I‖_F` at every grid instant.
pub fn zy_residual(fv: &FirstVariationPath) -> Vec<f64> {
    let d = fv.y[0].dim();
    let id = Mat::identity(d);
    fv.y
        .iter()
        .zip(&fv.z)
        .map(|(y, z)| {
            let mut r = z.mul(y);
            r.add_assign_scaled(&id, -1.0);
            r.frobenius()
        })
        .collect()
}

fn factor(y: &Mat, step: usize) -> Result<Lu> {
    let cond = y.condition_estimate();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Conditioning { step, condition: cond });
    }
    Lu::new(y).ok_or(Error::Conditioning {
        step,
        condition: f64::INFINITY,
    })
}

/// `D_r^j X(t) = Y(t) Y(r)⁻¹ σ^j(r)`, and zero for `r > t`.
pub fn malliavin_derivative(
    fv: &FirstVariationPath,
    paths: &PathBundle,
    model: &CoefficientModel,
    flow: &StatisticFlow,
    t_index: usize,
    r_index: usize,
    j: usize,
) -> Result<Vec<f64>> {
    check_alignment(paths, flow, model)?;
    let d = model.dim();
    let m = model.noise_dim();
    if j >= m {
        return Err(Error::argument(format!("noise index {j} out of range (m = {m})")));
    }
    if t_index >= fv.y.len() || r_index >= fv.y.len() {
        return Err(Error::argument("time index out of range"));
    }
    if r_index > t_index {
        return Ok(vec![0.0; d]);
    }
    let t_r = fv.grid.time(r_index);
    let mut sigma = vec![0.0; d * m];
    model.diffusion_into(t_r, paths.state(r_index, fv.path_index), flow.row(r_index), &mut sigma);
    let col: Vec<f64> = (0..d).map(|i| sigma[i * m + j]).collect();
    let v = factor(&fv.y[r_index], r_index)?.solve(&col);
    Ok(fv.y[t_index].mul_vec(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalliavinCovariance {
    pub t: f64,
    pub dt: f64,
    #[serde(skip)]
    pub q: Mat,
    pub lambda_min: f64,
    /// `sup_{r ≤ t} max(‖Y(r)‖, ‖Y(r)⁻¹‖)` over grid instants, operator norm.
    pub gamma: f64,
    /// Ellipticity constant the bound is checked against.
    pub lambda: f64,
}

/// `Y(r)⁻¹ A(r) Y(r)⁻ᵀ` and `max(‖Y(r)‖, ‖Y(r)⁻¹‖)`.
fn integrand(
    fv: &FirstVariationPath,
    paths: &PathBundle,
    model: &CoefficientModel,
    flow: &StatisticFlow,
    r: usize,
) -> Result<(Mat, f64)> {
    let d = model.dim();
    let m = model.noise_dim();
    let y = &fv.y[r];
    let lu = factor(y, r)?;
    let mut sigma = vec![0.0; d * m];
    model.diffusion_into(fv.grid.time(r), paths.state(r, fv.path_index), flow.row(r), &mut sigma);
    let a = outer_gram(&sigma, d, m);
    // W = Y⁻¹ A, then G = W Y⁻ᵀ = (Y⁻¹ Wᵀ)ᵀ
    let w = lu.solve_mat(&a);
    let g = lu.solve_mat(&w.transpose()).transpose();

    let gram = y.transpose().mul(y);
    let eig = sym_eigenvalues(&gram);
    let norm_y = eig[d - 1].max(0.0).sqrt();
    let norm_inv = 1.0 / eig[0].max(f64::MIN_POSITIVE).sqrt();
    Ok((g, norm_y.max(norm_inv)))
}

fn assemble(fv: &FirstVariationPath, k: usize, p: &Mat, gamma: f64, lambda: f64) -> MalliavinCovariance {
    let y = &fv.y[k];
    let q = y.mul(p).mul(&y.transpose()).symmetrized();
    let lambda_min = sym_eigenvalues(&q)[0];
    MalliavinCovariance {
        t: fv.grid.time(k),
        dt: fv.grid.dt(),
        q,
        lambda_min,
        gamma,
        lambda,
    }
}

/// `Q(t) = Y(t) (∫₀ᵗ Y⁻¹ A Y⁻ᵀ dr) Y(t)ᵀ` with the trapezoid rule on the
/// simulation grid.
pub fn malliavin_covariance(
    fv: &FirstVariationPath,
    paths: &PathBundle,
    model: &CoefficientModel,
    flow: &StatisticFlow,
    t_index: usize,
    lambda: f64,
) -> Result<MalliavinCovariance> {
    if t_index == 0 || t_index >= fv.y.len() {
        return Err(Error::argument("covariance needs 1 <= t_index <= M"));
    }
    covariance_curve_upto(fv, paths, model, flow, t_index, lambda)
        .map(|mut v| v.pop().expect("t_index >= 1"))
}

/// Covariance at every grid instant `t_1 … t_M`, accumulated in one pass.
pub fn covariance_curve(
    fv: &FirstVariationPath,
    paths: &PathBundle,
    model: &CoefficientModel,
    flow: &StatisticFlow,
    lambda: f64,
) -> Result<Vec<MalliavinCovariance>> {
    covariance_curve_upto(fv, paths, model, flow, fv.y.len() - 1, lambda)
}

fn covariance_curve_upto(
    fv: &FirstVariationPath,
    paths: &PathBundle,
    model: &CoefficientModel,
    flow: &StatisticFlow,
    last: usize,
    lambda: f64,
) -> Result<Vec<MalliavinCovariance>> {
    check_alignment(paths, flow, model)?;
    let d = model.dim();
    let half_dt = 0.5 * fv.grid.dt();
    let (mut g_prev, mut gamma) = integrand(fv, paths, model, flow, 0)?;
    let mut p = Mat::zeros(d);
    let mut out = Vec::with_capacity(last);
    for k in 1..=last {
        let (g, nrm) = integrand(fv, paths, model, flow, k)?;
        gamma = gamma.max(nrm);
        p.add_assign_scaled(&g_prev, half_dt);
        p.add_assign_scaled(&g, half_dt);
        out.push(assemble(fv, k, &p, gamma, lambda));
        g_prev = g;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub holds: bool,
    /// `lambda_min − t λ / γ⁴`.
    pub margin: f64,
    /// `t λ / γ⁴`.
    pub bound: f64,
    pub slack: f64,
    pub degenerate: bool,
}

/// Checks `λ_min(Q(t)) ≥ t λ / γ⁴ − c · dt · ‖Q‖`.
pub fn ellipticity_bound_check(cov: &MalliavinCovariance, slack_factor: f64) -> BoundReport {
    let lambda = cov.lambda.max(0.0);
    let bound = cov.t * lambda / cov.gamma.powi(4);
    let q_norm = sym_eigenvalues(&cov.q).last().copied().unwrap_or(0.0).abs();
    let slack = slack_factor * cov.dt * q_norm;
    let margin = cov.lambda_min - bound;
    BoundReport {
        holds: margin >= -slack,
        margin,
        bound,
        slack,
        degenerate: lambda <= DEGENERATE_LAMBDA,
    }
}

/// Per-path diagnostics `t,lambda_min,bound,zy_residual`; the first row is
/// `t = 0` where `Q` vanishes.
pub fn diagnostic_csv(curve: &[MalliavinCovariance], residual: &[f64]) -> String {
    let mut out = String::from("t,lambda_min,bound,zy_residual\n");
    let _ = writeln!(out, "0,0,0,{}", residual.first().copied().unwrap_or(0.0));
    for (k, c) in curve.iter().enumerate() {
        let bound = c.t * c.lambda.max(0.0) / c.gamma.powi(4);
        let _ = writeln!(out, "{},{},{},{}", c.t, c.lambda_min, bound, residual[k + 1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particle::{simulate_frozen_flow, InitialLaw};
    use approx::assert_relative_eq;

    fn constant_sigma(sigma: [f64; 4]) -> CoefficientModel {
        CoefficientModel::builder("const", 2, 2)
            .diffusion(move |_, _, _, out| out.copy_from_slice(&sigma))
            .build()
    }

    fn run(model: &CoefficientModel, law: InitialLaw, steps: usize, n: usize) -> (PathBundle, StatisticFlow) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let flow = StatisticFlow::constant(grid.times(), &vec![0.0; model.n_stats()]).unwrap();
        let paths = simulate_frozen_flow(model, &law, &grid, n, 3, &flow).unwrap();
        (paths, flow)
    }

    #[test]
    fn zero_jacobians_keep_identity() {
        let model = constant_sigma([1.0, 0.3, 0.0, 2.0]);
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0, 0.0]), 50, 2);
        let fv = simulate_first_variation(&model, &paths, 1, &flow).unwrap();
        assert!(fv.y.iter().chain(&fv.z).all(|m| *m == Mat::identity(2)));
        assert!(zy_residual(&fv).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn derivative_is_sigma_column_for_constant_sigma() {
        let model = constant_sigma([1.0, 0.3, -0.5, 2.0]);
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0, 0.0]), 20, 1);
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        for r in [0, 7, 20] {
            let d = malliavin_derivative(&fv, &paths, &model, &flow, 20, r, 1).unwrap();
            assert_eq!(d, vec![0.3, 2.0]);
        }
        let later = malliavin_derivative(&fv, &paths, &model, &flow, 5, 6, 0).unwrap();
        assert_eq!(later, vec![0.0, 0.0]);
        assert!(malliavin_derivative(&fv, &paths, &model, &flow, 5, 2, 2).is_err());
    }

    #[test]
    fn constant_sigma_covariance_is_t_times_a() {
        let sigma = [1.0, 0.3, -0.5, 2.0];
        let model = constant_sigma(sigma);
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0, 0.0]), 40, 1);
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        let a = outer_gram(&sigma, 2, 2);
        for k in [1, 13, 40] {
            let c = malliavin_covariance(&fv, &paths, &model, &flow, k, 0.1).unwrap();
            let t = paths.grid().time(k);
            for (got, want) in c.q.as_slice().iter().zip(a.as_slice()) {
                assert_relative_eq!(*got, t * want, max_relative = 1e-12);
            }
            assert_eq!(c.gamma, 1.0);
        }
        assert!(malliavin_covariance(&fv, &paths, &model, &flow, 0, 0.1).is_err());
    }

    #[test]
    fn identity_bound_is_tight() {
        let model = constant_sigma([1.0, 0.0, 0.0, 1.0]);
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0, 0.0]), 10, 1);
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        let c = malliavin_covariance(&fv, &paths, &model, &flow, 10, 1.0).unwrap();
        let r = ellipticity_bound_check(&c, DEFAULT_SLACK_FACTOR);
        assert!(r.holds);
        assert!(r.margin.abs() < 1e-14);
        assert!(!r.degenerate);
    }

    #[test]
    fn degenerate_lambda_is_flagged() {
        let model = constant_sigma([1.0, 0.0, 0.0, 1.0]);
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0, 0.0]), 10, 1);
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        let c = malliavin_covariance(&fv, &paths, &model, &flow, 10, 1e-9).unwrap();
        let r = ellipticity_bound_check(&c, DEFAULT_SLACK_FACTOR);
        assert!(r.holds && r.degenerate);
    }

    #[test]
    fn singular_first_variation_is_a_conditioning_error() {
        // Db = -1/dt collapses Y to zero after one Euler step.
        let model = CoefficientModel::builder("collapse", 1, 1)
            .drift_jacobian(|_, _, _, out| out[0] = -10.0)
            .diffusion(|_, _, _, out| out[0] = 1.0)
            .build();
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0]), 10, 1);
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        assert_eq!(fv.y[1].as_slice()[0], 0.0);
        let err = malliavin_covariance(&fv, &paths, &model, &flow, 5, 1.0).unwrap_err();
        assert!(matches!(err, Error::Conditioning { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn diagnostic_csv_has_one_row_per_instant() {
        let model = constant_sigma([1.0, 0.0, 0.0, 1.0]);
        let (paths, flow) = run(&model, InitialLaw::Point(vec![0.0, 0.0]), 8, 1);
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        let curve = covariance_curve(&fv, &paths, &model, &flow, 1.0).unwrap();
        let csv = diagnostic_csv(&curve, &zy_residual(&fv));
        assert_eq!(csv.lines().count(), 1 + 9);
        assert!(csv.starts_with("t,lambda_min,bound,zy_residual\n"));
    }
}
