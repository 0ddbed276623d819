//! Coefficient models `b(t, x, s)`, `σ(t, x, s)` with their state Jacobians.
//!
//! The measure argument enters only through a vector `s` of statistics
//! `s_k = E[φ_k(X)]`, one per [`StatisticFunctional`].

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, Mat};

pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `(t, x, s, out)`; `out` arrives zeroed.
pub type FieldFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// `(k, t, x, s, out)` writes `∂σ^k/∂x` (row-major `d × d`); `out` arrives zeroed.
pub type ColumnJacobianFn = Arc<dyn Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct StatisticFunctional {
    id: String,
    phi: ScalarMap,
}

impl StatisticFunctional {
    pub fn new(id: impl Into<String>, phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            id: id.into(),
            phi: Arc::new(phi),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }
}

impl fmt::Debug for StatisticFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StatisticFunctional").field("id", &self.id).finish()
    }
}

/// Drift, diffusion and Jacobians of a McKean–Vlasov SDE
/// `dX = b(t, X, s_t) dt + σ(t, X, s_t) dW` in `R^d` driven by `m` noises.
///
/// `σ` is stored row-major as a `d × m` block so that column `k` is the
/// vector field multiplying `dW^k`.
#[derive(Clone)]
pub struct CoefficientModel {
    name: String,
    dim: usize,
    noise_dim: usize,
    functionals: Vec<StatisticFunctional>,
    drift: FieldFn,
    diffusion: FieldFn,
    drift_jacobian: FieldFn,
    diffusion_jacobian: ColumnJacobianFn,
}

impl fmt::Debug for CoefficientModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("functionals", &self.functionals)
            .finish_non_exhaustive()
    }
}

/// Builder with zero defaults for every map.
pub struct ModelBuilder {
    model: CoefficientModel,
}

impl ModelBuilder {
    pub fn functional(mut self, f: StatisticFunctional) -> Self {
        self.model.functionals.push(f);
        self
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.model.drift = Arc::new(f);
        self
    }

    pub fn diffusion(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.model.diffusion = Arc::new(f);
        self
    }

    pub fn drift_jacobian(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.model.drift_jacobian = Arc::new(f);
        self
    }

    pub fn diffusion_jacobian(
        mut self,
        f: impl Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.model.diffusion_jacobian = Arc::new(f);
        self
    }

    pub fn build(self) -> CoefficientModel {
        self.model
    }
}

impl CoefficientModel {
    pub fn builder(name: impl Into<String>, dim: usize, noise_dim: usize) -> ModelBuilder {
        assert!(dim >= 1 && noise_dim >= 1, "dimensions must be positive");
        ModelBuilder {
            model: CoefficientModel {
                name: name.into(),
                dim,
                noise_dim,
                functionals: Vec::new(),
                drift: Arc::new(|_, _, _, _| {}),
                diffusion: Arc::new(|_, _, _, _| {}),
                drift_jacobian: Arc::new(|_, _, _, _| {}),
                diffusion_jacobian: Arc::new(|_, _, _, _, _| {}),
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn functionals(&self) -> &[StatisticFunctional] {
        &self.functionals
    }

    pub fn n_stats(&self) -> usize {
        self.functionals.len()
    }

    // Unchecked hot-path evaluators. `out` is overwritten.

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.drift)(t, x, s, out);
    }

    #[inline]
    pub fn diffusion_into(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.diffusion)(t, x, s, out);
    }

    #[inline]
    pub fn drift_jacobian_into(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.drift_jacobian)(t, x, s, out);
    }

    #[inline]
    pub fn diffusion_jacobian_into(&self, k: usize, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (self.diffusion_jacobian)(k, t, x, s, out);
    }

    fn check_args(&self, x: &[f64], s: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::argument(format!(
                "state has dimension {}, model `{}` expects {}",
                x.len(),
                self.name,
                self.dim
            )));
        }
        if s.len() != self.functionals.len() {
            return Err(Error::argument(format!(
                "statistic vector has length {}, model `{}` expects {}",
                s.len(),
                self.name,
                self.functionals.len()
            )));
        }
        Ok(())
    }

    fn check_finite(what: &str, values: &[f64], t: f64, x: &[f64], s: &[f64]) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric(
                what,
                format!("t={t}, x={x:?}, s={s:?}"),
            ))
        }
    }

    pub fn eval_drift(&self, t: f64, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, s)?;
        let mut out = vec![0.0; self.dim];
        self.drift_into(t, x, s, &mut out);
        Self::check_finite("drift", &out, t, x, s)?;
        Ok(out)
    }

    /// Row-major `d × m`.
    pub fn eval_diffusion(&self, t: f64, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        self.check_args(x, s)?;
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.diffusion_into(t, x, s, &mut out);
        Self::check_finite("diffusion", &out, t, x, s)?;
        Ok(out)
    }

    /// `A = σσᵀ`.
    pub fn diffusion_matrix(&self, t: f64, x: &[f64], s: &[f64]) -> Result<Mat> {
        let sigma = self.eval_diffusion(t, x, s)?;
        Ok(outer_gram(&sigma, self.dim, self.noise_dim))
    }

    pub fn eval_drift_jacobian(&self, t: f64, x: &[f64], s: &[f64]) -> Result<Mat> {
        self.check_args(x, s)?;
        let mut out = vec![0.0; self.dim * self.dim];
        self.drift_jacobian_into(t, x, s, &mut out);
        Self::check_finite("drift jacobian", &out, t, x, s)?;
        Ok(Mat::from_row_major(self.dim, out))
    }

    pub fn eval_diffusion_jacobian(&self, k: usize, t: f64, x: &[f64], s: &[f64]) -> Result<Mat> {
        self.check_args(x, s)?;
        if k >= self.noise_dim {
            return Err(Error::argument(format!(
                "noise column {k} out of range (m = {})",
                self.noise_dim
            )));
        }
        let mut out = vec![0.0; self.dim * self.dim];
        self.diffusion_jacobian_into(k, t, x, s, &mut out);
        Self::check_finite("diffusion jacobian", &out, t, x, s)?;
        Ok(Mat::from_row_major(self.dim, out))
    }
}

/// `σσᵀ` for a row-major `d × m` block.
pub(crate) fn outer_gram(sigma: &[f64], d: usize, m: usize) -> Mat {
    let mut a = Mat::zeros(d);
    outer_gram_into(sigma, d, m, a.as_mut_slice());
    a
}

pub(crate) fn outer_gram_into(sigma: &[f64], d: usize, m: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..m).map(|k| sigma[i * m + k] * sigma[j * m + k]).sum();
        }
    }
}

/// Axis-aligned box in `(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub time: (f64, f64),
    pub space: Vec<(f64, f64)>,
}

impl Region {
    pub fn new(time: (f64, f64), space: Vec<(f64, f64)>) -> Self {
        Self { time, space }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub lambda_min_estimate: f64,
    pub argmin_point: SamplePoint,
    pub n_samples: usize,
}

const HALTON_BASES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Samples `n` points of a randomly shifted Halton sequence over the region
/// and reports the smallest eigenvalue of `σσᵀ` seen. The `i`-th sample
/// pairs with `s_samples[i % len]`, so prefixes are nested in `n`.
///
/// This is evidence, not proof: it never asserts uniform ellipticity.
pub fn check_ellipticity(
    model: &CoefficientModel,
    region: &Region,
    s_samples: &[Vec<f64>],
    n: usize,
    seed: u64,
) -> Result<EllipticityReport> {
    let d = model.dim();
    if n == 0 {
        return Err(Error::argument("ellipticity check needs n >= 1"));
    }
    if region.space.len() != d {
        return Err(Error::argument(format!(
            "region has {} spatial axes, model has dimension {d}",
            region.space.len()
        )));
    }
    if d + 1 > HALTON_BASES.len() {
        return Err(Error::argument("ellipticity sampler supports d <= 7"));
    }
    let axes: Vec<(f64, f64)> = std::iter::once(region.time)
        .chain(region.space.iter().copied())
        .collect();
    if axes.iter().any(|&(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::argument("region must be a nonempty finite box"));
    }
    let empty = Vec::new();
    let s_pool: &[Vec<f64>] = if s_samples.is_empty() {
        if model.n_stats() > 0 {
            return Err(Error::argument("model has statistics but no s samples were supplied"));
        }
        std::slice::from_ref(&empty)
    } else {
        s_samples
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = axes.iter().map(|_| rng.random::<f64>()).collect();

    let mut best: Option<(f64, SamplePoint)> = None;
    for i in 0..n {
        let coords: Vec<f64> = axes
            .iter()
            .zip(&shift)
            .zip(HALTON_BASES)
            .map(|((&(lo, hi), &u0), base)| {
                let u = (radical_inverse(i as u64 + 1, base) + u0).fract();
                lo + (hi - lo) * u
            })
            .collect();
        let t = coords[0];
        let x = coords[1..].to_vec();
        let s = &s_pool[i % s_pool.len()];
        let a = model.diffusion_matrix(t, &x, s)?;
        if !a.is_finite() {
            return Err(Error::numeric("diffusion matrix", format!("t={t}, x={x:?}")));
        }
        let lam = sym_eigenvalues(&a.symmetrized())[0];
        if best.as_ref().is_none_or(|(b, _)| lam < *b) {
            best = Some((
                lam,
                SamplePoint {
                    t,
                    x,
                    s: s.clone(),
                },
            ));
        }
    }
    let (lambda, point) = best.expect("n >= 1");
    Ok(EllipticityReport {
        lambda_min_estimate: lambda.max(0.0),
        argmin_point: point,
        n_samples: n,
    })
}

/// Largest `|analytic − central difference| / (1 + |analytic|)` over the
/// supplied points and over every entry of `Db` and each `Dσ^k`.
pub fn jacobian_consistency_probe(
    model: &CoefficientModel,
    points: &[SamplePoint],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let d = model.dim();
    let m = model.noise_dim();
    let mut worst: f64 = 0.0;
    for p in points {
        let db = model.eval_drift_jacobian(p.t, &p.x, &p.s)?;
        let dsig: Vec<Mat> = (0..m)
            .map(|k| model.eval_diffusion_jacobian(k, p.t, &p.x, &p.s))
            .collect::<Result<_>>()?;
        for j in 0..d {
            let mut xp = p.x.clone();
            let mut xm = p.x.clone();
            xp[j] += h;
            xm[j] -= h;
            let bp = model.eval_drift(p.t, &xp, &p.s)?;
            let bm = model.eval_drift(p.t, &xm, &p.s)?;
            let sp = model.eval_diffusion(p.t, &xp, &p.s)?;
            let sm = model.eval_diffusion(p.t, &xm, &p.s)?;
            for i in 0..d {
                let fd = (bp[i] - bm[i]) / (2.0 * h);
                let an = db[(i, j)];
                worst = worst.max((an - fd).abs() / (1.0 + an.abs()));
                for (k, dk) in dsig.iter().enumerate() {
                    let fd = (sp[i * m + k] - sm[i * m + k]) / (2.0 * h);
                    let an = dk[(i, j)];
                    worst = worst.max((an - fd).abs() / (1.0 + an.abs()));
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_drift() -> CoefficientModel {
        // b = B x with B = [[1, 2], [-3, 0.5]], σ = I
        CoefficientModel::builder("linear", 2, 2)
            .drift(|_, x, _, out| {
                out[0] = x[0] + 2.0 * x[1];
                out[1] = -3.0 * x[0] + 0.5 * x[1];
            })
            .drift_jacobian(|_, _, _, out| out.copy_from_slice(&[1.0, 2.0, -3.0, 0.5]))
            .diffusion(|_, _, _, out| {
                out[0] = 1.0;
                out[3] = 1.0;
            })
            .build()
    }

    #[test]
    fn zero_model_has_zero_drift() {
        let m = CoefficientModel::builder("zero", 3, 1).build();
        assert_eq!(m.eval_drift(0.7, &[1.0, -2.0, 3.0], &[]).unwrap(), vec![0.0; 3]);
        assert_eq!(m.diffusion_matrix(0.0, &[0.0; 3], &[]).unwrap(), Mat::zeros(3));
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let m = linear_drift();
        assert!(matches!(m.eval_drift(0.0, &[1.0], &[]), Err(Error::Argument(_))));
        assert!(matches!(
            m.eval_diffusion(0.0, &[1.0, 2.0], &[0.3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn non_finite_output_names_input() {
        let m = CoefficientModel::builder("blow", 1, 1)
            .drift(|_, x, _, out| out[0] = 1.0 / x[0])
            .build();
        let err = m.eval_drift(0.0, &[0.0], &[]).unwrap_err();
        match err {
            Error::Numeric { what, location } => {
                assert_eq!(what, "drift");
                assert!(location.contains("x=[0.0]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_jacobian_probe_is_exact() {
        let m = linear_drift();
        let pts: Vec<SamplePoint> = [(-1.0, 2.0), (0.3, 0.7), (5.0, -4.0)]
            .iter()
            .map(|&(a, b)| SamplePoint {
                t: 0.0,
                x: vec![a, b],
                s: vec![],
            })
            .collect();
        for h in [1e-1, 1e-3, 1e-5] {
            assert!(jacobian_consistency_probe(&m, &pts, h).unwrap() < 1e-9);
        }
    }

    #[test]
    fn wrong_jacobian_is_detected() {
        let m = CoefficientModel::builder("wrong", 1, 1)
            .drift(|_, x, _, out| out[0] = x[0].sin())
            .drift_jacobian(|_, x, _, out| out[0] = x[0].cos() + 0.05)
            .diffusion(|_, _, _, out| out[0] = 1.0)
            .build();
        let pts = vec![SamplePoint {
            t: 0.0,
            x: vec![0.4],
            s: vec![],
        }];
        assert!(jacobian_consistency_probe(&m, &pts, 1e-5).unwrap() > 1e-2);
        assert!(jacobian_consistency_probe(&m, &pts, 0.0).is_err());
    }

    #[test]
    fn identity_diffusion_has_unit_ellipticity() {
        let m = linear_drift();
        let region = Region::new((0.0, 1.0), vec![(-1.0, 1.0), (-1.0, 1.0)]);
        let r = check_ellipticity(&m, &region, &[], 64, 3).unwrap();
        assert_relative_eq!(r.lambda_min_estimate, 1.0, epsilon = 1e-14);
        assert_eq!(r.n_samples, 64);
    }

    #[test]
    fn ellipticity_needs_samples() {
        let m = linear_drift();
        let region = Region::new((0.0, 1.0), vec![(-1.0, 1.0), (-1.0, 1.0)]);
        assert!(check_ellipticity(&m, &region, &[], 0, 3).is_err());
        let bad = Region::new((0.0, 1.0), vec![(-1.0, 1.0)]);
        assert!(check_ellipticity(&m, &bad, &[], 8, 3).is_err());
    }
}
