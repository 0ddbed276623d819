//! Picard iteration over frozen statistic flows.
//!
//! `μ⁰` is the initial cloud held constant in time. Iterate `n` solves the
//! ordinary SDE whose measure argument is the flow of iterate `n − 1`,
//! always with the same initial states and Brownian increments, so the
//! only thing that changes between iterates is the frozen flow.

use std::fmt::Write as _;

use crate::coefficients::CoefficientModel;
use crate::error::{Error, Result};
use crate::measures::{w2_distance, EmpiricalMeasure, StatisticFlow};
use crate::particle::{
    cloud_statistics, generate_brownian, sample_initial, simulate_interacting, simulate_with_noise,
    statistic_flow, InitialLaw, PathBundle, StatSource, TimeGrid,
};

#[derive(Debug, Clone)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Times at which consecutive iterates are compared; must lie on the grid.
    pub checkpoints: Vec<f64>,
    /// Projections for sliced W₂ when `d ≥ 2`.
    pub n_slices: usize,
    pub slice_seed: u64,
}

impl PicardOptions {
    pub fn new(tol: f64, max_iters: usize, checkpoints: Vec<f64>) -> Self {
        Self {
            tol,
            max_iters,
            checkpoints,
            n_slices: 64,
            slice_seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardIterate {
    pub flow: StatisticFlow,
    pub snapshots: Vec<EmpiricalMeasure>,
}

#[derive(Debug, Clone)]
pub struct PicardRun {
    pub iterates: Vec<PicardIterate>,
    /// `gaps[k]` compares iterates `k + 1` and `k + 2` (1-based).
    pub gaps: Vec<f64>,
    pub converged: bool,
    pub n_iters: usize,
    pub checkpoint_indices: Vec<usize>,
    /// Trajectories of the last iterate.
    pub final_paths: PathBundle,
}

impl PicardRun {
    pub fn final_flow(&self) -> &StatisticFlow {
        &self.iterates.last().expect("at least one iterate").flow
    }

    /// `iter,gap` with one row per gap.
    pub fn gap_csv(&self) -> String {
        let mut out = String::from("iter,gap\n");
        for (k, g) in self.gaps.iter().enumerate() {
            let _ = writeln!(out, "{},{g}", k + 1);
        }
        out
    }
}

/// Largest W₂ over corresponding checkpoint clouds (exact in 1D, sliced
/// otherwise).
pub fn convergence_gap(
    a: &[EmpiricalMeasure],
    b: &[EmpiricalMeasure],
    n_slices: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::argument(format!(
            "checkpoint counts differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut gap: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        gap = gap.max(w2_distance(x, y, n_slices, seed)?);
    }
    Ok(gap)
}

fn checkpoint_indices(grid: &TimeGrid, times: &[f64]) -> Result<Vec<usize>> {
    if times.is_empty() {
        return Err(Error::argument("picard needs at least one checkpoint"));
    }
    times
        .iter()
        .map(|&t| {
            grid.index_of(t)
                .ok_or_else(|| Error::argument(format!("checkpoint t={t} is not a grid instant")))
        })
        .collect()
}

pub fn picard_run(
    model: &CoefficientModel,
    law: &InitialLaw,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    opts: &PicardOptions,
) -> Result<PicardRun> {
    if !(opts.tol > 0.0) {
        return Err(Error::argument("picard tolerance must be positive"));
    }
    if opts.max_iters == 0 {
        return Err(Error::argument("picard needs max_iters >= 1"));
    }
    if law.dim() != model.dim() {
        return Err(Error::argument("initial law and model dimensions differ"));
    }
    let checkpoints = checkpoint_indices(grid, &opts.checkpoints)?;
    let d = model.dim();
    let initial = sample_initial(law, n, seed)?;
    let increments = generate_brownian(seed, n, model.noise_dim(), grid)?;

    let initial_stats = cloud_statistics(&initial, d, model.functionals())?;
    let mut frozen = StatisticFlow::constant(grid.times(), &initial_stats)?;

    let mut iterates: Vec<PicardIterate> = Vec::new();
    let mut gaps = Vec::new();
    let mut converged = false;
    let mut last_paths = None;
    for iter in 1..=opts.max_iters {
        let paths = simulate_with_noise(
            model,
            initial.clone(),
            increments.clone(),
            grid,
            StatSource::Frozen(&frozen),
            seed,
        )?;
        let flow = statistic_flow(&paths, model.functionals())?;
        let snapshots = checkpoints
            .iter()
            .map(|&k| paths.snapshot(k))
            .collect::<Result<Vec<_>>>()?;
        if let Some(prev) = iterates.last() {
            let gap = convergence_gap(&prev.snapshots, &snapshots, opts.n_slices, opts.slice_seed)?;
            log::debug!("picard iteration {iter}: gap {gap:.3e}");
            gaps.push(gap);
            converged = gap <= opts.tol;
        }
        frozen = flow.clone();
        iterates.push(PicardIterate { flow, snapshots });
        last_paths = Some(paths);
        if converged {
            break;
        }
    }
    let n_iters = iterates.len();
    Ok(PicardRun {
        iterates,
        gaps,
        converged,
        n_iters,
        checkpoint_indices: checkpoints,
        final_paths: last_paths.expect("max_iters >= 1"),
    })
}

/// Sup over checkpoints of W₂ between the converged Picard iterate and
/// the interacting system under the same seed.
pub fn picard_vs_direct(
    model: &CoefficientModel,
    law: &InitialLaw,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    opts: &PicardOptions,
) -> Result<f64> {
    let run = picard_run(model, law, grid, n, seed, opts)?;
    if !run.converged {
        return Err(Error::argument(format!(
            "picard iteration did not reach tol {} in {} iterations",
            opts.tol, opts.max_iters
        )));
    }
    let direct = simulate_interacting(model, law, grid, n, seed)?;
    let direct_snaps = run
        .checkpoint_indices
        .iter()
        .map(|&k| direct.snapshot(k))
        .collect::<Result<Vec<_>>>()?;
    let last = run.iterates.last().expect("converged run has iterates");
    convergence_gap(&last.snapshots, &direct_snaps, opts.n_slices, opts.slice_seed)
}
