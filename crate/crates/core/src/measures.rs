//! Particle clouds, grid densities, statistic evaluation, kernel density
//! estimates and the W₂ / L¹ metrics used to compare them.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::StatisticFunctional;
use crate::error::{Error, Result};

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Weighted point cloud in `R^d`, points stored row-major `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Equal weights `1/N`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::argument("point buffer is not a whole number of states"));
        }
        let n = points.len() / dim;
        Self::weighted(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::argument("point buffer is not a whole number of states"));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::argument("empirical measure needs at least one point"));
        }
        if weights.len() != n {
            return Err(Error::argument(format!("{} weights for {n} points", weights.len())));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("particle state", format!("particle {}", i / dim)));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::argument("weights must be finite and nonnegative"));
        }
        let total = compensated_sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::argument(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, points, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean of `‖x‖^p`.
    pub fn moment(&self, p: f64) -> f64 {
        (0..self.len())
            .map(|i| {
                let r2: f64 = self.point(i).iter().map(|v| v * v).sum();
                self.weights[i] * r2.powf(0.5 * p)
            })
            .sum()
    }

    /// CSV `w,x1[,x2,...]`, one particle per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w");
        for k in 1..=self.dim {
            let _ = write!(out, ",x{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.weights[i]);
            for v in self.point(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::argument("empty CSV"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"w") || cols.len() < 2 {
            return Err(Error::argument("empirical CSV header must start with `w,x1`"));
        }
        let dim = cols.len() - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::argument(format!("row {}: {e}", row + 1)))?;
            if vals.len() != dim + 1 {
                return Err(Error::argument(format!("row {} has {} fields", row + 1, vals.len())));
            }
            weights.push(vals[0]);
            points.extend_from_slice(&vals[1..]);
        }
        Self::weighted(dim, points, weights)
    }
}

/// Uniform axis with `cells + 1` nodes from `lo` to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || cells < 2 {
            return Err(Error::argument(format!(
                "axis needs lo < hi and at least 2 cells (got [{lo}, {hi}], {cells})"
            )));
        }
        Ok(Self { lo, hi, cells })
    }

    pub fn with_nodes(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        Self::new(lo, hi, nodes.saturating_sub(1))
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.cells {
            self.hi
        } else {
            self.lo + self.spacing() * i as f64
        }
    }

    fn trapezoid_weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i == self.cells {
            0.5 * h
        } else {
            h
        }
    }
}

/// Density values on a uniform 1D or 2D node lattice. In 2D the values
/// are row-major with the first axis outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    axes: Vec<Axis>,
    values: Vec<f64>,
    pub time: f64,
    pub mass_tol: f64,
}

impl GridDensity {
    pub fn new(axes: Vec<Axis>, values: Vec<f64>, time: f64) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::argument("grid densities are 1D or 2D"));
        }
        let n: usize = axes.iter().map(Axis::nodes).product();
        if values.len() != n {
            return Err(Error::argument(format!("{} values for {n} nodes", values.len())));
        }
        Ok(Self {
            axes,
            values,
            time,
            mass_tol: 1e-8,
        })
    }

    /// Samples `f` at every node.
    pub fn from_fn(axes: Vec<Axis>, time: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n: usize = axes.iter().map(Axis::nodes).product();
        let mut g = Self::new(axes, vec![0.0; n], time)?;
        let mut x = vec![0.0; g.dims()];
        for k in 0..n {
            g.fill_node(k, &mut x);
            g.values[k] = f(&x);
        }
        Ok(g)
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coordinates of flat node index `k`.
    pub fn node(&self, k: usize) -> Vec<f64> {
        match self.axes.len() {
            1 => vec![self.axes[0].node(k)],
            _ => {
                let ny = self.axes[1].nodes();
                vec![self.axes[0].node(k / ny), self.axes[1].node(k % ny)]
            }
        }
    }

    fn quad_weight(&self, k: usize) -> f64 {
        match self.axes.len() {
            1 => self.axes[0].trapezoid_weight(k),
            _ => {
                let ny = self.axes[1].nodes();
                self.axes[0].trapezoid_weight(k / ny) * self.axes[1].trapezoid_weight(k % ny)
            }
        }
    }

    /// Trapezoid rule for `∫ f(x) p(x) dx`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut x = vec![0.0; self.dims()];
        let mut acc = 0.0;
        for k in 0..self.values.len() {
            let v = self.values[k];
            if v == 0.0 {
                continue;
            }
            self.fill_node(k, &mut x);
            acc += self.quad_weight(k) * f(&x) * v;
        }
        acc
    }

    pub(crate) fn fill_node(&self, k: usize, x: &mut [f64]) {
        match self.axes.len() {
            1 => x[0] = self.axes[0].node(k),
            _ => {
                let ny = self.axes[1].nodes();
                x[0] = self.axes[0].node(k / ny);
                x[1] = self.axes[1].node(k % ny);
            }
        }
    }

    pub fn mass(&self) -> f64 {
        let edge_trimmed = |v: &[f64]| v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]);
        match self.axes.len() {
            1 => self.axes[0].spacing() * edge_trimmed(&self.values),
            _ => {
                let ny = self.axes[1].nodes();
                let rows: Vec<f64> = self.values.chunks(ny).map(edge_trimmed).collect();
                self.axes[0].spacing() * self.axes[1].spacing() * edge_trimmed(&rows)
            }
        }
    }

    pub fn mass_is_valid(&self) -> bool {
        (self.mass() - 1.0).abs() <= self.mass_tol
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `∫ ‖x‖^p p(x) dx`.
    pub fn moment(&self, p: f64) -> f64 {
        self.integrate(|x| x.iter().map(|v| v * v).sum::<f64>().powf(0.5 * p))
    }

    pub fn normalize(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::numeric("density mass", format!("mass = {m}")));
        }
        for v in &mut self.values {
            *v /= m;
        }
        Ok(())
    }

    /// CSV `x[,y],p`, one node per row, row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.dims() == 1 { "x,p\n" } else { "x,y,p\n" });
        let mut x = vec![0.0; self.dims()];
        for k in 0..self.values.len() {
            self.fill_node(k, &mut x);
            for v in &x {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", self.values[k]);
        }
        out
    }

    fn same_grid(&self, other: &GridDensity) -> bool {
        self.axes == other.axes
    }
}

/// Per-instant statistics `(E[φ_1], …, E[φ_q])` along a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticFlow {
    times: Vec<f64>,
    q: usize,
    stats: Vec<f64>,
}

impl StatisticFlow {
    pub fn new(times: Vec<f64>, q: usize, stats: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::argument("statistic flow needs at least one instant"));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::argument("flow times must be strictly increasing"));
        }
        if stats.len() != times.len() * q {
            return Err(Error::argument(format!(
                "{} statistics for {} instants x {q} functionals",
                stats.len(),
                times.len()
            )));
        }
        if let Some(i) = stats.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("statistic flow", format!("row {}", i / q.max(1))));
        }
        Ok(Self { times, q, stats })
    }

    /// The same row at every instant.
    pub fn constant(times: Vec<f64>, row: &[f64]) -> Result<Self> {
        let stats = times.iter().flat_map(|_| row.iter().copied()).collect();
        Self::new(times, row.len(), stats)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_stats(&self) -> usize {
        self.q
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.stats[k * self.q..(k + 1) * self.q]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `(Σ_i w_i φ_k(x_i))_k`, summed in particle order.
pub fn empirical_statistics(
    mu: &EmpiricalMeasure,
    functionals: &[StatisticFunctional],
) -> Result<Vec<f64>> {
    functionals
        .iter()
        .map(|f| {
            let mut acc = 0.0;
            for i in 0..mu.len() {
                let v = f.eval(mu.point(i));
                if !v.is_finite() {
                    return Err(Error::numeric(
                        format!("functional `{}`", f.id()),
                        format!("particle {i}"),
                    ));
                }
                acc += mu.weights[i] * v;
            }
            Ok(acc)
        })
        .collect()
}

/// Trapezoid-rule `∫ φ_k p` per functional.
pub fn grid_statistics(p: &GridDensity, functionals: &[StatisticFunctional]) -> Result<Vec<f64>> {
    let d = p.dims();
    let mut x = vec![0.0; d];
    let mut acc = vec![0.0; functionals.len()];
    for k in 0..p.len() {
        let v = p.values[k];
        if v == 0.0 {
            continue;
        }
        p.fill_node(k, &mut x);
        let w = p.quad_weight(k) * v;
        for (a, f) in acc.iter_mut().zip(functionals) {
            let phi = f.eval(&x);
            if !phi.is_finite() {
                return Err(Error::numeric(
                    format!("functional `{}`", f.id()),
                    format!("grid node {x:?}"),
                ));
            }
            *a += w * phi;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule `1.06 σ̂ N^{-1/5}` (per axis `σ̂_i N^{-1/6}` in 2D).
    Auto,
    Fixed(f64),
}

fn weighted_sd(mu: &EmpiricalMeasure, axis: usize) -> f64 {
    let d = mu.dim();
    let mean: f64 = (0..mu.len()).map(|i| mu.weights[i] * mu.points[i * d + axis]).sum();
    let var: f64 = (0..mu.len())
        .map(|i| {
            let r = mu.points[i * d + axis] - mean;
            mu.weights[i] * r * r
        })
        .sum();
    var.max(0.0).sqrt()
}

const KERNEL_REACH: f64 = 8.0;

/// Adds `w · N(x; c, h²)` to `out` for nodes within `KERNEL_REACH · h` of `c`.
fn scatter_kernel_1d(axis: &Axis, c: f64, h: f64, w: f64, out: &mut [f64], offset: usize, stride: usize) {
    let dx = axis.spacing();
    let lo = ((c - KERNEL_REACH * h - axis.lo) / dx).floor().max(0.0) as usize;
    let hi = (((c + KERNEL_REACH * h - axis.lo) / dx).ceil().max(0.0) as usize).min(axis.cells);
    let norm = w / (h * (2.0 * std::f64::consts::PI).sqrt());
    for i in lo..=hi {
        let z = (axis.node(i) - c) / h;
        out[offset + i * stride] += norm * (-0.5 * z * z).exp();
    }
}

/// Gaussian kernel density estimate on `axis`, renormalised to unit
/// trapezoid mass.
pub fn kde_1d(mu: &EmpiricalMeasure, axis: Axis, bandwidth: Bandwidth) -> Result<GridDensity> {
    if mu.dim() != 1 {
        return Err(Error::argument("kde_1d needs a one-dimensional measure"));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => 1.06 * weighted_sd(mu, 0) * (mu.len() as f64).powf(-0.2),
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::argument(format!("bandwidth must be positive (got {h})")));
    }
    let mut values = vec![0.0; axis.nodes()];
    for i in 0..mu.len() {
        if mu.weights[i] > 0.0 {
            scatter_kernel_1d(&axis, mu.points[i], h, mu.weights[i], &mut values, 0, 1);
        }
    }
    let mut g = GridDensity::new(vec![axis], values, 0.0)?;
    g.normalize()?;
    g.mass_tol = 1e-10;
    Ok(g)
}

/// Product-Gaussian kernel density estimate on a 2D lattice.
pub fn kde_2d(mu: &EmpiricalMeasure, axes: [Axis; 2], bandwidth: Bandwidth) -> Result<GridDensity> {
    if mu.dim() != 2 {
        return Err(Error::argument("kde_2d needs a two-dimensional measure"));
    }
    let hs = match bandwidth {
        Bandwidth::Fixed(h) => [h, h],
        Bandwidth::Auto => {
            let f = (mu.len() as f64).powf(-1.0 / 6.0);
            [weighted_sd(mu, 0) * f, weighted_sd(mu, 1) * f]
        }
    };
    if hs.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::argument(format!("bandwidth must be positive (got {hs:?})")));
    }
    let (nx, ny) = (axes[0].nodes(), axes[1].nodes());
    let mut values = vec![0.0; nx * ny];
    let mut kx = vec![0.0; nx];
    let mut ky = vec![0.0; ny];
    for i in 0..mu.len() {
        let w = mu.weights[i];
        if w == 0.0 {
            continue;
        }
        let p = mu.point(i);
        kx.fill(0.0);
        ky.fill(0.0);
        scatter_kernel_1d(&axes[0], p[0], hs[0], w, &mut kx, 0, 1);
        scatter_kernel_1d(&axes[1], p[1], hs[1], 1.0, &mut ky, 0, 1);
        for (a, &vx) in kx.iter().enumerate() {
            if vx == 0.0 {
                continue;
            }
            let row = &mut values[a * ny..(a + 1) * ny];
            for (r, &vy) in row.iter_mut().zip(&ky) {
                *r += vx * vy;
            }
        }
    }
    let mut g = GridDensity::new(axes.to_vec(), values, 0.0)?;
    g.normalize()?;
    g.mass_tol = 1e-10;
    Ok(g)
}

fn sorted_atoms(values: impl Iterator<Item = f64>, weights: &[f64]) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = values.zip(weights.iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    atoms
}

/// Squared W₂ between two weighted 1D atom lists, each sorted by position.
fn w2_squared_sorted(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut wa, mut wb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let diff = a[i].0 - b[j].0;
        match wa.partial_cmp(&wb).unwrap_or(Ordering::Equal) {
            Ordering::Less => {
                cost += wa * diff * diff;
                wb -= wa;
                i += 1;
                wa = a.get(i).map_or(0.0, |x| x.1);
            }
            Ordering::Greater => {
                cost += wb * diff * diff;
                wa -= wb;
                j += 1;
                wb = b.get(j).map_or(0.0, |x| x.1);
            }
            Ordering::Equal => {
                cost += wa * diff * diff;
                i += 1;
                j += 1;
                wa = a.get(i).map_or(0.0, |x| x.1);
                wb = b.get(j).map_or(0.0, |x| x.1);
            }
        }
    }
    cost.max(0.0)
}

/// Exact 1D W₂ by the quantile (monotone) coupling.
pub fn w2_empirical_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::argument("w2_empirical_1d needs one-dimensional measures"));
    }
    let sa = sorted_atoms(a.points.iter().copied(), &a.weights);
    let sb = sorted_atoms(b.points.iter().copied(), &b.weights);
    Ok(w2_squared_sorted(&sa, &sb).sqrt())
}

/// Unit directions used by [`w2_sliced`] for a given seed.
pub fn slice_directions(dim: usize, n_slices: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_slices)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// Root-mean-square of 1D W₂ over random projections.
pub fn w2_sliced(a: &EmpiricalMeasure, b: &EmpiricalMeasure, n_slices: usize, seed: u64) -> Result<f64> {
    if n_slices < 1 {
        return Err(Error::argument("w2_sliced needs at least one slice"));
    }
    if a.dim() != b.dim() {
        return Err(Error::argument("measures have different dimensions"));
    }
    let d = a.dim();
    let dirs = slice_directions(d, n_slices, seed);
    let project = |mu: &EmpiricalMeasure, theta: &[f64]| {
        sorted_atoms(
            (0..mu.len()).map(|i| mu.point(i).iter().zip(theta).map(|(x, t)| x * t).sum()),
            &mu.weights,
        )
    };
    let per_slice: Vec<f64> = dirs
        .par_iter()
        .map(|theta| w2_squared_sorted(&project(a, theta), &project(b, theta)))
        .collect();
    Ok((per_slice.iter().sum::<f64>() / n_slices as f64).sqrt())
}

/// Exact 1D quantile coupling in 1D, sliced estimate otherwise.
pub fn w2_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure, n_slices: usize, seed: u64) -> Result<f64> {
    if a.dim() == 1 && b.dim() == 1 {
        w2_empirical_1d(a, b)
    } else {
        w2_sliced(a, b, n_slices, seed)
    }
}

/// `W₂(μ, δ₀) = (Σ w_i ‖x_i‖²)^{1/2}`.
pub fn w2_to_dirac0(mu: &EmpiricalMeasure) -> f64 {
    mu.moment(2.0).sqrt()
}

/// Trapezoid-rule `∫ |p − r|` on a shared grid.
pub fn l1_grid_distance(p: &GridDensity, r: &GridDensity) -> Result<f64> {
    if !p.same_grid(r) {
        return Err(Error::argument("L1 distance needs identical grids"));
    }
    Ok((0..p.len())
        .map(|k| p.quad_weight(k) * (p.values[k] - r.values[k]).abs())
        .sum())
}
