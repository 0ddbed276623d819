//! Named coefficient models with overridable numeric parameters.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use serde::Serialize;

use crate::coefficients::{CoefficientModel, StatisticFunctional};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::particle::InitialLaw;

/// A ready-to-run model with its initial law and horizon.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub model: CoefficientModel,
    /// Coefficients whose forward equation is the Fokker–Planck equation
    /// exactly as printed alongside the original example, when it differs.
    pub printed: Option<CoefficientModel>,
    pub law: InitialLaw,
    pub horizon: f64,
    /// Uniform ellipticity constant when it is known in closed form.
    pub known_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresetInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub reference: &'static str,
    pub params: BTreeMap<String, f64>,
}

struct Entry {
    name: &'static str,
    description: &'static str,
    reference: &'static str,
    defaults: &'static [(&'static str, f64)],
    build: fn(&BTreeMap<String, f64>) -> Result<Preset>,
}

const INV_SQRT_10: f64 = 0.316_227_766_016_837_94;

static REGISTRY: &[Entry] = &[
    Entry {
        name: "bm",
        description: "Brownian motion dX = sigma dW in `dim` dimensions",
        reference: "Gaussian oracle",
        defaults: &[("dim", 1.0), ("sigma", 1.0), ("init_sd", 0.5)],
        build: build_bm,
    },
    Entry {
        name: "example5-1",
        description: "1D MVE, b = k(x + sin t + E[sin y/(1+y^2)]), sigma = v x, X0 ~ N(0, init_sd^2)",
        reference: "Example 5.1 (1D numerical experiment)",
        defaults: &[("drift_scale", 0.1), ("vol", INV_SQRT_10), ("init_sd", 1.0)],
        build: build_example51,
    },
    Entry {
        name: "example5-2",
        description: "2D MVE, b_i = k(sqrt(|x|^2 + c) + E[phi(y1)phi(y2)]), constant correlated noise",
        reference: "Example 5.2 (2D numerical experiment)",
        defaults: &[("drift_scale", 1.0), ("offset", 0.4), ("init_var", 0.04)],
        build: build_example52,
    },
    Entry {
        name: "gbm",
        description: "geometric Brownian motion dX = mu X dt + s X dW, X0 = x0",
        reference: "linear multiplicative-noise oracle",
        defaults: &[("mu", 0.05), ("s", 0.2), ("x0", 1.0)],
        build: build_gbm,
    },
    Entry {
        name: "meanfield-ou",
        description: "dX = (a X + c E[X]) dt + s dW, X0 ~ N(x0, init_sd^2)",
        reference: "mean-field oracle, mean solves m' = (a + c) m",
        defaults: &[("a", -1.0), ("c", 0.5), ("s", 0.5), ("x0", 1.0), ("init_sd", 0.0)],
        build: build_meanfield_ou,
    },
    Entry {
        name: "ou",
        description: "Ornstein-Uhlenbeck dX = -theta X dt + sigma dW, X0 ~ N(0, init_sd^2)",
        reference: "stationary-density oracle",
        defaults: &[("theta", 1.0), ("sigma", SQRT_2), ("init_sd", 1.0)],
        build: build_ou,
    },
];

/// Sorted by name; identical on every call.
pub fn list_presets() -> Vec<PresetInfo> {
    let mut out: Vec<PresetInfo> = REGISTRY
        .iter()
        .map(|e| PresetInfo {
            name: e.name,
            description: e.description,
            reference: e.reference,
            params: defaults_of(e),
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(b.name));
    out
}

fn defaults_of(e: &Entry) -> BTreeMap<String, f64> {
    e.defaults.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// Looks up a preset and applies parameter overrides. Unknown names and
/// unknown parameters are config errors.
pub fn preset(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Preset> {
    let entry = REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| {
        Error::config(
            "preset.name",
            format!(
                "unknown preset `{name}` (available: {})",
                REGISTRY.iter().map(|e| e.name).collect::<Vec<_>>().join(", ")
            ),
        )
    })?;
    let mut params = defaults_of(entry);
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) if v.is_finite() => *slot = *v,
            Some(_) => {
                return Err(Error::config(format!("preset.params.{k}"), "value must be finite"))
            }
            None => {
                return Err(Error::config(
                    format!("preset.params.{k}"),
                    format!("preset `{name}` has no parameter `{k}`"),
                ))
            }
        }
    }
    (entry.build)(&params)
}

fn p(params: &BTreeMap<String, f64>, key: &str) -> f64 {
    params[key]
}

fn nonneg(params: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    let v = p(params, key);
    if v < 0.0 {
        Err(Error::config(format!("preset.params.{key}"), "must be >= 0"))
    } else {
        Ok(v)
    }
}

fn scalar_gaussian(mean: f64, sd: f64) -> InitialLaw {
    if sd == 0.0 {
        InitialLaw::Point(vec![mean])
    } else {
        InitialLaw::Gaussian {
            mean: vec![mean],
            covariance: Mat::from_row_major(1, vec![sd * sd]),
        }
    }
}

fn build_bm(params: &BTreeMap<String, f64>) -> Result<Preset> {
    let dim_f = p(params, "dim");
    if dim_f.fract() != 0.0 || !(1.0..=4.0).contains(&dim_f) {
        return Err(Error::config("preset.params.dim", "must be an integer in 1..=4"));
    }
    let d = dim_f as usize;
    let sigma = p(params, "sigma");
    let init_sd = nonneg(params, "init_sd")?;
    let model = CoefficientModel::builder("bm", d, d)
        .diffusion(move |_, _, _, out| {
            for i in 0..d {
                out[i * d + i] = sigma;
            }
        })
        .build();
    let law = if init_sd == 0.0 {
        InitialLaw::Point(vec![0.0; d])
    } else {
        InitialLaw::Gaussian {
            mean: vec![0.0; d],
            covariance: Mat::identity(d).scaled(init_sd * init_sd),
        }
    };
    Ok(Preset {
        name: "bm".into(),
        params: params.clone(),
        model,
        printed: None,
        law,
        horizon: 1.0,
        known_lambda: Some(sigma * sigma),
    })
}

fn example51_kernel(y: f64) -> f64 {
    y.sin() / (1.0 + y * y)
}

fn example51_model(name: &str, drift_scale: f64, vol: f64) -> CoefficientModel {
    CoefficientModel::builder(name, 1, 1)
        .functional(StatisticFunctional::new("sin_y_over_1_plus_y2", |y: &[f64]| {
            example51_kernel(y[0])
        }))
        .drift(move |t, x, s, out| out[0] = drift_scale * (x[0] + t.sin() + s[0]))
        .drift_jacobian(move |_, _, _, out| out[0] = drift_scale)
        .diffusion(move |_, x, _, out| out[0] = vol * x[0])
        .diffusion_jacobian(move |_, _, _, _, out| out[0] = vol)
        .build()
}

fn build_example51(params: &BTreeMap<String, f64>) -> Result<Preset> {
    let k = p(params, "drift_scale");
    let vol = p(params, "vol");
    let init_sd = nonneg(params, "init_sd")?;
    // The printed forward equation flips the drift divergence sign and uses
    // 1/5 ∂²(x²p), i.e. A = 4 vol² x², instead of ½∂²(vol² x² p).
    let printed = example51_model("example5-1/as-printed", -k, 2.0 * vol);
    Ok(Preset {
        name: "example5-1".into(),
        params: params.clone(),
        model: example51_model("example5-1", k, vol),
        printed: Some(printed),
        law: scalar_gaussian(0.0, init_sd),
        horizon: 1.0,
        known_lambda: None,
    })
}

fn example52_model(name: &str, k: f64, offset: f64) -> CoefficientModel {
    let a = 2.0 * INV_SQRT_10;
    let b = INV_SQRT_10;
    CoefficientModel::builder(name, 2, 2)
        .functional(StatisticFunctional::new("product_sin_y_over_1_plus_y2", |y: &[f64]| {
            example51_kernel(y[0]) * example51_kernel(y[1])
        }))
        .drift(move |_, x, s, out| {
            let v = k * ((x[0] * x[0] + x[1] * x[1] + offset).sqrt() + s[0]);
            out[0] = v;
            out[1] = v;
        })
        .drift_jacobian(move |_, x, _, out| {
            let r = (x[0] * x[0] + x[1] * x[1] + offset).sqrt();
            let (g0, g1) = (k * x[0] / r, k * x[1] / r);
            out.copy_from_slice(&[g0, g1, g0, g1]);
        })
        .diffusion(move |_, _, _, out| out.copy_from_slice(&[a, b, b, a]))
        .build()
}

fn build_example52(params: &BTreeMap<String, f64>) -> Result<Preset> {
    let k = p(params, "drift_scale");
    let offset = p(params, "offset");
    if offset <= 0.0 {
        return Err(Error::config("preset.params.offset", "must be > 0"));
    }
    let var = nonneg(params, "init_var")?;
    let law = if var == 0.0 {
        InitialLaw::Point(vec![0.0, 0.0])
    } else {
        InitialLaw::Gaussian {
            mean: vec![0.0, 0.0],
            covariance: Mat::identity(2).scaled(var),
        }
    };
    Ok(Preset {
        name: "example5-2".into(),
        params: params.clone(),
        model: example52_model("example5-2", k, offset),
        // printed drift carries an extra factor 0.1
        printed: Some(example52_model("example5-2/as-printed", 0.1 * k, offset)),
        law,
        horizon: 1.0,
        known_lambda: Some(0.1),
    })
}

fn build_gbm(params: &BTreeMap<String, f64>) -> Result<Preset> {
    let mu = p(params, "mu");
    let s = p(params, "s");
    let x0 = p(params, "x0");
    let model = CoefficientModel::builder("gbm", 1, 1)
        .drift(move |_, x, _, out| out[0] = mu * x[0])
        .drift_jacobian(move |_, _, _, out| out[0] = mu)
        .diffusion(move |_, x, _, out| out[0] = s * x[0])
        .diffusion_jacobian(move |_, _, _, _, out| out[0] = s)
        .build();
    Ok(Preset {
        name: "gbm".into(),
        params: params.clone(),
        model,
        printed: None,
        law: InitialLaw::Point(vec![x0]),
        horizon: 1.0,
        known_lambda: None,
    })
}

fn build_meanfield_ou(params: &BTreeMap<String, f64>) -> Result<Preset> {
    let a = p(params, "a");
    let c = p(params, "c");
    let s = p(params, "s");
    let x0 = p(params, "x0");
    let init_sd = nonneg(params, "init_sd")?;
    let model = CoefficientModel::builder("meanfield-ou", 1, 1)
        .functional(StatisticFunctional::new("mean", |y: &[f64]| y[0]))
        .drift(move |_, x, st, out| out[0] = a * x[0] + c * st[0])
        .drift_jacobian(move |_, _, _, out| out[0] = a)
        .diffusion(move |_, _, _, out| out[0] = s)
        .build();
    Ok(Preset {
        name: "meanfield-ou".into(),
        params: params.clone(),
        model,
        printed: None,
        law: scalar_gaussian(x0, init_sd),
        horizon: 1.0,
        known_lambda: Some(s * s),
    })
}

fn build_ou(params: &BTreeMap<String, f64>) -> Result<Preset> {
    let theta = p(params, "theta");
    let sigma = p(params, "sigma");
    let init_sd = nonneg(params, "init_sd")?;
    let model = CoefficientModel::builder("ou", 1, 1)
        .drift(move |_, x, _, out| out[0] = -theta * x[0])
        .drift_jacobian(move |_, _, _, out| out[0] = -theta)
        .diffusion(move |_, _, _, out| out[0] = sigma)
        .build();
    Ok(Preset {
        name: "ou".into(),
        params: params.clone(),
        model,
        printed: None,
        law: scalar_gaussian(0.0, init_sd),
        horizon: 1.0,
        known_lambda: Some(sigma * sigma),
    })
}
