#![allow(dead_code)]

use mvkit::measures::{Axis, GridDensity};

/// Exact `N(mean, var)` density sampled at the nodes of `axis`.
pub fn normal_density(axis: Axis, mean: f64, var: f64) -> GridDensity {
    GridDensity::from_fn(vec![axis], 0.0, |x| {
        let z = x[0] - mean;
        (-0.5 * z * z / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    })
    .unwrap()
}

pub fn mean_1d(p: &GridDensity) -> f64 {
    p.integrate(|x| x[0]) / p.mass()
}

use mvkit::coefficients::CoefficientModel;
use mvkit::malliavin::{simulate_first_variation, zy_residual};
use mvkit::measures::StatisticFlow;
use mvkit::particle::{
    generate_brownian, sample_initial, simulate_with_noise, statistic_flow, InitialLaw, PathBundle, StatSource,
    TimeGrid,
};

/// Interacting runs on `steps` and `2·steps` driven by the same Brownian
/// path (coarse increments are sums of fine pairs) and the same initial
/// states; `(coarse, fine)`, each with its own empirical statistic flow.
pub fn refinement_pair(
    model: &CoefficientModel,
    law: &InitialLaw,
    horizon: f64,
    steps: usize,
    n: usize,
    seed: u64,
) -> [(PathBundle, StatisticFlow); 2] {
    let coarse = TimeGrid::new(horizon, steps).unwrap();
    let fine = coarse.refined();
    let initial = sample_initial(law, n, seed).unwrap();
    let inc_fine = generate_brownian(seed, n, model.noise_dim(), &fine).unwrap();
    let inc_coarse = inc_fine.coarsened().unwrap();
    let run = |grid: &TimeGrid, inc| {
        let paths = simulate_with_noise(model, initial.clone(), inc, grid, StatSource::Interacting, seed).unwrap();
        let flow = statistic_flow(&paths, model.functionals()).unwrap();
        (paths, flow)
    };
    [run(&coarse, inc_coarse), run(&fine, inc_fine)]
}

/// Mean over the first `paths` particles of `max_t ‖Z Y − I‖`.
pub fn mean_max_zy(model: &CoefficientModel, run: &(PathBundle, StatisticFlow), paths: usize) -> f64 {
    (0..paths)
        .map(|i| {
            let fv = simulate_first_variation(model, &run.0, i, &run.1).unwrap();
            zy_residual(&fv).into_iter().fold(0.0, f64::max)
        })
        .sum::<f64>()
        / paths as f64
}
