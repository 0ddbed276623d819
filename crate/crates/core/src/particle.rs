//! Euler–Maruyama simulation of the interacting particle system and of
//! particles driven by a frozen statistic flow.
//!
//! Every particle owns two counter-based ChaCha streams keyed by
//! `(seed, particle)`: one for its initial state and one for its Brownian
//! increments. Output therefore does not depend on how many worker threads
//! the rayon pool has.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::coefficients::{CoefficientModel, StatisticFunctional};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, Mat};
use crate::measures::{EmpiricalMeasure, StatisticFlow};

/// Uniform grid on `[0, T]` with `M` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() || steps == 0 {
            return Err(Error::argument(format!(
                "time grid needs T > 0 and M >= 1 (got T={horizon}, M={steps})"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Grid index of `t`, if `t` is a grid instant.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt()).round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - t).abs() <= 1e-9 * self.horizon.max(1.0)).then_some(k)
    }

    /// Same horizon, twice the steps.
    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            steps: 2 * self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, covariance: Mat },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            InitialLaw::Point(x) => x,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    pub fn covariance(&self) -> Mat {
        match self {
            InitialLaw::Point(x) => Mat::zeros(x.len()),
            InitialLaw::Gaussian { covariance, .. } => covariance.clone(),
        }
    }

    fn factor(&self) -> Result<Option<Mat>> {
        match self {
            InitialLaw::Point(_) => Ok(None),
            InitialLaw::Gaussian { mean, covariance } => {
                if covariance.dim() != mean.len() {
                    return Err(Error::argument("covariance and mean dimensions differ"));
                }
                let sym = covariance.symmetrized();
                if (0..sym.dim() * sym.dim())
                    .any(|k| (sym.as_slice()[k] - covariance.as_slice()[k]).abs() > 1e-12)
                {
                    return Err(Error::argument("covariance must be symmetric"));
                }
                cholesky_psd(&sym)
                    .map(Some)
                    .ok_or_else(|| Error::argument("covariance must be positive semidefinite"))
            }
        }
    }
}

const STREAM_NOISE: u64 = 0;
const STREAM_INITIAL: u64 = 1;

fn particle_rng(seed: u64, particle: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((particle as u64) << 1) | purpose);
    rng
}

/// `N` initial states, row-major `N × d`.
pub fn sample_initial(law: &InitialLaw, n: usize, seed: u64) -> Result<Vec<f64>> {
    let d = law.dim();
    let factor = law.factor()?;
    let mean = law.mean();
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
        x.copy_from_slice(mean);
        if let Some(l) = &factor {
            let mut rng = particle_rng(seed, i, STREAM_INITIAL);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (r, xr) in x.iter_mut().enumerate() {
                *xr += (0..=r).map(|c| l[(r, c)] * z[c]).sum::<f64>();
            }
        }
    });
    Ok(out)
}

/// Brownian increments stored particle-major: entry `(i, k, j)` is the
/// increment of noise `j` over step `k` for particle `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    n: usize,
    steps: usize,
    noise_dim: usize,
    data: Vec<f64>,
}

impl Increments {
    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    #[inline]
    pub fn get(&self, step: usize, particle: usize) -> &[f64] {
        let m = self.noise_dim;
        let base = (particle * self.steps + step) * m;
        &self.data[base..base + m]
    }

    /// Sums consecutive pairs of steps: the increments of the same Brownian
    /// paths on a grid with half as many steps.
    pub fn coarsened(&self) -> Result<Increments> {
        if self.steps % 2 != 0 {
            return Err(Error::argument("cannot coarsen an odd number of steps"));
        }
        let steps = self.steps / 2;
        let m = self.noise_dim;
        let mut data = vec![0.0; self.n * steps * m];
        for i in 0..self.n {
            for k in 0..steps {
                for j in 0..m {
                    data[(i * steps + k) * m + j] =
                        self.get(2 * k, i)[j] + self.get(2 * k + 1, i)[j];
                }
            }
        }
        Ok(Increments {
            n: self.n,
            steps,
            noise_dim: m,
            data,
        })
    }

    /// Keeps only the listed particles, in the given order.
    pub fn select(&self, particles: &[usize]) -> Increments {
        let chunk = self.steps * self.noise_dim;
        let data = particles
            .iter()
            .flat_map(|&i| self.data[i * chunk..(i + 1) * chunk].iter().copied())
            .collect();
        Increments {
            n: particles.len(),
            steps: self.steps,
            noise_dim: self.noise_dim,
            data,
        }
    }
}

/// I.i.d. `N(0, dt)` increments from per-particle streams.
pub fn generate_brownian(seed: u64, n: usize, noise_dim: usize, grid: &TimeGrid) -> Result<Increments> {
    if n == 0 || noise_dim == 0 {
        return Err(Error::argument("need at least one particle and one noise"));
    }
    let steps = grid.steps();
    let sqrt_dt = grid.dt().sqrt();
    let chunk = steps * noise_dim;
    let mut data = vec![0.0; n * chunk];
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, row)| {
        let mut rng = particle_rng(seed, i, STREAM_NOISE);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sqrt_dt * z;
        }
    });
    Ok(Increments {
        n,
        steps,
        noise_dim,
        data,
    })
}

/// Trajectories of `N` particles on a shared grid plus the noise that
/// drove them. States are time-major so each instant's cloud is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    n: usize,
    dim: usize,
    grid: TimeGrid,
    states: Vec<f64>,
    increments: Increments,
    seed: u64,
}

impl PathBundle {
    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &Increments {
        &self.increments
    }

    /// All particle states at step `k`, row-major `N × d`.
    pub fn cloud(&self, k: usize) -> &[f64] {
        let w = self.n * self.dim;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        let base = (k * self.n + i) * self.dim;
        &self.states[base..base + self.dim]
    }

    pub fn snapshot(&self, k: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::uniform(self.dim, self.cloud(k).to_vec())
    }

    pub fn n_scalars(&self) -> usize {
        self.states.len()
    }
}

/// Where the measure statistics come from at each step.
#[derive(Clone, Copy)]
pub enum StatSource<'a> {
    /// Recomputed from the live cloud.
    Interacting,
    /// Read from a precomputed flow.
    Frozen(&'a StatisticFlow),
}

/// Equal-weight statistics of a row-major cloud: functionals evaluated in
/// parallel, reduced in particle order.
pub(crate) fn cloud_statistics(
    cloud: &[f64],
    dim: usize,
    functionals: &[StatisticFunctional],
) -> Result<Vec<f64>> {
    let n = cloud.len() / dim;
    let w = 1.0 / n as f64;
    functionals
        .iter()
        .map(|f| {
            let vals: Vec<f64> = cloud.par_chunks(dim).map(|x| f.eval(x)).collect();
            let mut acc = 0.0;
            for (i, v) in vals.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::numeric(
                        format!("functional `{}`", f.id()),
                        format!("particle {i}"),
                    ));
                }
                acc += w * v;
            }
            Ok(acc)
        })
        .collect()
}

fn flow_matches(flow: &StatisticFlow, grid: &TimeGrid, q: usize) -> Result<()> {
    if flow.n_stats() != q {
        return Err(Error::argument(format!(
            "flow carries {} statistics, model needs {q}",
            flow.n_stats()
        )));
    }
    let times = grid.times();
    if flow.len() != times.len()
        || flow
            .times()
            .iter()
            .zip(&times)
            .any(|(a, b)| (a - b).abs() > 1e-12 * grid.horizon().max(1.0))
    {
        return Err(Error::argument("flow time grid does not match the simulation grid"));
    }
    Ok(())
}

/// Euler–Maruyama from explicit initial states and increments.
pub fn simulate_with_noise(
    model: &CoefficientModel,
    initial: Vec<f64>,
    increments: Increments,
    grid: &TimeGrid,
    source: StatSource<'_>,
    seed: u64,
) -> Result<PathBundle> {
    let d = model.dim();
    let m = model.noise_dim();
    let q = model.n_stats();
    if initial.is_empty() || initial.len() % d != 0 {
        return Err(Error::argument("initial states do not match the model dimension"));
    }
    let n = initial.len() / d;
    if increments.n != n || increments.noise_dim != m || increments.steps != grid.steps() {
        return Err(Error::argument("increments do not match particles, noise or grid"));
    }
    if let StatSource::Frozen(flow) = source {
        flow_matches(flow, grid, q)?;
    }
    if let Some(i) = initial.iter().position(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step: 0, particle: i / d });
    }

    let steps = grid.steps();
    let dt = grid.dt();
    let width = n * d;
    let mut states = Vec::with_capacity((steps + 1) * width);
    states.extend_from_slice(&initial);

    for k in 0..steps {
        let t = grid.time(k);
        let current = &states[k * width..(k + 1) * width];
        let s: Vec<f64> = match source {
            StatSource::Interacting if q > 0 => cloud_statistics(current, d, model.functionals())?,
            StatSource::Interacting => Vec::new(),
            StatSource::Frozen(flow) => flow.row(k).to_vec(),
        };
        let mut next = vec![0.0; width];
        next.par_chunks_mut(d).enumerate().for_each_init(
            || (vec![0.0; d], vec![0.0; d * m]),
            |(drift, sigma), (i, out)| {
                let x = &current[i * d..(i + 1) * d];
                model.drift_into(t, x, &s, drift);
                model.diffusion_into(t, x, &s, sigma);
                let dw = increments.get(k, i);
                for r in 0..d {
                    let noise: f64 = (0..m).map(|j| sigma[r * m + j] * dw[j]).sum();
                    out[r] = x[r] + drift[r] * dt + noise;
                }
            },
        );
        if let Some(pos) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                step: k + 1,
                particle: pos / d,
            });
        }
        states.extend_from_slice(&next);
    }

    Ok(PathBundle {
        n,
        dim: d,
        grid: *grid,
        states,
        increments,
        seed,
    })
}

fn check_law(model: &CoefficientModel, law: &InitialLaw) -> Result<()> {
    if law.dim() != model.dim() {
        return Err(Error::argument(format!(
            "initial law has dimension {}, model has {}",
            law.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Interacting particles: at each step the statistics come from the live
/// empirical cloud.
pub fn simulate_interacting(
    model: &CoefficientModel,
    law: &InitialLaw,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<PathBundle> {
    check_law(model, law)?;
    let initial = sample_initial(law, n, seed)?;
    let inc = generate_brownian(seed, n, model.noise_dim(), grid)?;
    simulate_with_noise(model, initial, inc, grid, StatSource::Interacting, seed)
}

/// Independent particles with statistics read from `flow`.
pub fn simulate_frozen_flow(
    model: &CoefficientModel,
    law: &InitialLaw,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    flow: &StatisticFlow,
) -> Result<PathBundle> {
    check_law(model, law)?;
    flow_matches(flow, grid, model.n_stats())?;
    let initial = sample_initial(law, n, seed)?;
    let inc = generate_brownian(seed, n, model.noise_dim(), grid)?;
    simulate_with_noise(model, initial, inc, grid, StatSource::Frozen(flow), seed)
}

/// Empirical statistics of a bundle at every grid instant.
pub fn statistic_flow(paths: &PathBundle, functionals: &[StatisticFunctional]) -> Result<StatisticFlow> {
    let q = functionals.len();
    let mut stats = Vec::with_capacity((paths.grid.steps() + 1) * q);
    for k in 0..=paths.grid.steps() {
        stats.extend(cloud_statistics(paths.cloud(k), paths.dim, functionals)?);
    }
    StatisticFlow::new(paths.grid.times(), q, stats)
}

/// Sample mean of `‖X(t_k)‖^p` at each grid instant.
pub fn moment_curve(paths: &PathBundle, p: f64) -> Result<Vec<f64>> {
    if !(p >= 1.0) {
        return Err(Error::argument("moment order must be >= 1"));
    }
    let d = paths.dim;
    let w = 1.0 / paths.n as f64;
    Ok((0..=paths.grid.steps())
        .map(|k| {
            paths
                .cloud(k)
                .chunks(d)
                .map(|x| w * x.iter().map(|v| v * v).sum::<f64>().powf(0.5 * p))
                .sum()
        })
        .collect())
}
