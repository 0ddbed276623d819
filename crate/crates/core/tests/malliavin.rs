mod common;

use std::collections::BTreeMap;

use common::{mean_max_zy, refinement_pair};
use mvkit::coefficients::{check_ellipticity, CoefficientModel, Region};
use mvkit::linalg::{sym_eigenvalues, Mat};
use mvkit::malliavin::{
    covariance_curve, ellipticity_bound_check, malliavin_covariance, malliavin_derivative, simulate_first_variation,
    zy_residual, DEFAULT_SLACK_FACTOR,
};
use mvkit::measures::StatisticFlow;
use mvkit::particle::{simulate_frozen_flow, simulate_with_noise, InitialLaw, StatSource, TimeGrid};
use mvkit::presets::preset;

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// `e^{M}` by scaling and squaring with a 20-term Taylor series.
fn expm(m: &Mat) -> Mat {
    let n = m.dim();
    let norm = m.frobenius();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let a = m.scaled(0.5f64.powi(squarings as i32));
    let mut term = Mat::identity(n);
    let mut sum = Mat::identity(n);
    for k in 1..=20 {
        term = term.mul(&a).scaled(1.0 / k as f64);
        sum.add_assign_scaled(&term, 1.0);
    }
    for _ in 0..squarings {
        sum = sum.mul(&sum);
    }
    sum
}

fn linear_model(b: [f64; 4]) -> CoefficientModel {
    CoefficientModel::builder("linear", 2, 2)
        .drift(move |_, x, _, o| {
            o[0] = b[0] * x[0] + b[1] * x[1];
            o[1] = b[2] * x[0] + b[3] * x[1];
        })
        .drift_jacobian(move |_, _, _, o| o.copy_from_slice(&b))
        .diffusion(|_, _, _, o| o.copy_from_slice(&[0.3, 0.0, 0.1, 0.5]))
        .build()
}

fn zero_flow(grid: &TimeGrid) -> StatisticFlow {
    StatisticFlow::constant(grid.times(), &[]).unwrap()
}

#[test]
fn linear_drift_matches_matrix_exponential() {
    let b = [-0.5, 1.0, -1.0, -0.2];
    let model = linear_model(b);
    let want = expm(&Mat::from_row_major(2, b.to_vec()));
    let law = InitialLaw::Point(vec![1.0, 0.0]);
    let err = |steps: usize| {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let flow = zero_flow(&grid);
        let paths = simulate_frozen_flow(&model, &law, &grid, 1, 9, &flow).unwrap();
        let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
        let mut diff = fv.y[steps].clone();
        diff.add_assign_scaled(&want, -1.0);
        let zy = zy_residual(&fv).into_iter().fold(0.0, f64::max);
        (diff.frobenius(), zy)
    };
    let (e1, z1) = err(200);
    let (e2, z2) = err(400);
    assert!(e1 < 1e-2, "{e1}");
    let ratio = e1 / e2;
    assert!((1.6..=2.4).contains(&ratio), "Y error ratio {ratio}");
    let zratio = z1 / z2;
    assert!((1.6..=2.4).contains(&zratio), "ZY ratio {zratio}");
}

#[test]
fn gbm_first_variation_is_path_over_x0() {
    let p = preset("gbm", &BTreeMap::new()).unwrap();
    let x0 = p.params["x0"];
    let grid = TimeGrid::new(1.0, 500).unwrap();
    let flow = zero_flow(&grid);
    let paths = simulate_frozen_flow(&p.model, &p.law, &grid, 4, 21, &flow).unwrap();
    for i in 0..4 {
        let fv = simulate_first_variation(&p.model, &paths, i, &flow).unwrap();
        for k in 0..=500 {
            let x = paths.state(k, i)[0];
            let y = fv.y[k].as_slice()[0];
            assert!((y * x0 - x).abs() <= 1e-12 * x.abs(), "k={k}");
        }
        // D_r X(t) = s X(t) for every r ≤ t
        let s = p.params["s"];
        for r in [0, 100, 499] {
            let d = malliavin_derivative(&fv, &paths, &p.model, &flow, 500, r, 0).unwrap();
            let x = paths.state(500, i)[0];
            assert!((d[0] - s * x).abs() <= 1e-12 * x.abs());
        }
        let q = malliavin_covariance(&fv, &paths, &p.model, &flow, 500, s * s).unwrap();
        let x = paths.state(500, i)[0];
        assert!((q.lambda_min - s * s * x * x).abs() <= 1e-12 * s * s * x * x);
    }
}

#[test]
fn gbm_zy_residual_is_small() {
    let p = preset("gbm", &BTreeMap::new()).unwrap();
    let [_, (paths, flow)] = refinement_pair(&p.model, &p.law, 1.0, 500, 8, 3);
    for i in 0..8 {
        let fv = simulate_first_variation(&p.model, &paths, i, &flow).unwrap();
        let r = zy_residual(&fv).into_iter().fold(0.0, f64::max);
        assert!(r < 0.1, "{r}");
    }
}

#[test]
fn additive_noise_zy_residual_is_first_order() {
    for name in ["ou", "meanfield-ou", "example5-2"] {
        let p = preset(name, &BTreeMap::new()).unwrap();
        let [c, f] = refinement_pair(&p.model, &p.law, 1.0, 100, 64, 5);
        let ratio = mean_max_zy(&p.model, &c, 16) / mean_max_zy(&p.model, &f, 16);
        assert!((1.6..=2.4).contains(&ratio), "{name}: ratio {ratio}");
    }
}

#[test]
fn flow_map_jacobian_matches_central_differences() {
    let h = 1e-5;
    for (name, over) in [
        ("gbm", params(&[])),
        ("meanfield-ou", params(&[])),
        ("example5-1", params(&[("init_sd", 0.0)])),
        ("example5-2", params(&[("init_var", 0.0)])),
    ] {
        let p = preset(name, &over).unwrap();
        let x0 = match &p.law {
            InitialLaw::Point(x) => x.clone(),
            other => panic!("{name}: expected a point law, got {other:?}"),
        };
        let x0 = if name == "example5-1" { vec![0.7] } else { x0 };
        let d = p.model.dim();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let run = simulate_with_noise(
            &p.model,
            x0.clone(),
            mvkit::particle::generate_brownian(17, 1, p.model.noise_dim(), &grid).unwrap(),
            &grid,
            StatSource::Interacting,
            17,
        )
        .unwrap();
        // a single particle's own statistics, frozen
        let flow = mvkit::particle::statistic_flow(&run, p.model.functionals()).unwrap();
        let fv = simulate_first_variation(&p.model, &run, 0, &flow).unwrap();
        for j in 0..d {
            let bumped = |sign: f64| {
                let mut x = x0.clone();
                x[j] += sign * h;
                simulate_with_noise(
                    &p.model,
                    x,
                    run.increments().clone(),
                    &grid,
                    StatSource::Frozen(&flow),
                    17,
                )
                .unwrap()
                .state(200, 0)
                .to_vec()
            };
            let (up, down) = (bumped(1.0), bumped(-1.0));
            for i in 0..d {
                let fd = (up[i] - down[i]) / (2.0 * h);
                let y = fv.y[200][(i, j)];
                assert!((fd - y).abs() <= 1e-6 * (1.0 + y.abs()), "{name} ({i},{j}): fd {fd} vs {y}");
            }
        }
    }
}

#[test]
fn covariance_is_psd_and_bound_holds_on_example_5_2() {
    let p = preset("example5-2", &BTreeMap::new()).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let paths = mvkit::particle::simulate_interacting(&p.model, &p.law, &grid, 200, 8).unwrap();
    let flow = mvkit::particle::statistic_flow(&paths, p.model.functionals()).unwrap();
    for i in 0..20 {
        let fv = simulate_first_variation(&p.model, &paths, i, &flow).unwrap();
        let curve = covariance_curve(&fv, &paths, &p.model, &flow, 0.1).unwrap();
        for c in &curve {
            let qn = sym_eigenvalues(&c.q)[1];
            assert!(c.lambda_min >= -1e-8 * qn);
            assert!(ellipticity_bound_check(c, DEFAULT_SLACK_FACTOR).holds);
        }
    }
}

#[test]
fn covariance_nondecreasing_when_first_variation_is_identity() {
    let model = CoefficientModel::builder("state-dependent-free", 2, 2)
        .diffusion(|t, _, _, o| o.copy_from_slice(&[1.0 + t, 0.2, -0.3, 0.5]))
        .build();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let flow = zero_flow(&grid);
    let paths = simulate_frozen_flow(&model, &InitialLaw::Point(vec![0.0, 0.0]), &grid, 1, 2, &flow).unwrap();
    let fv = simulate_first_variation(&model, &paths, 0, &flow).unwrap();
    let curve = covariance_curve(&fv, &paths, &model, &flow, 0.0).unwrap();
    for w in curve.windows(2) {
        let mut diff = w[1].q.clone();
        diff.add_assign_scaled(&w[0].q, -1.0);
        assert!(sym_eigenvalues(&diff)[0] >= -1e-12);
    }
}

#[test]
fn example_5_2_without_drift_is_constant_sigma_case() {
    let p = preset("example5-2", &params(&[("drift_scale", 0.0)])).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let paths = mvkit::particle::simulate_interacting(&p.model, &p.law, &grid, 4, 1).unwrap();
    let flow = mvkit::particle::statistic_flow(&paths, p.model.functionals()).unwrap();
    let fv = simulate_first_variation(&p.model, &paths, 2, &flow).unwrap();
    let c = malliavin_covariance(&fv, &paths, &p.model, &flow, 64, 0.1).unwrap();
    let want = [0.5, 0.4, 0.4, 0.5];
    for (g, w) in c.q.as_slice().iter().zip(want) {
        assert!((g - w).abs() <= 1e-12);
    }
    assert!((c.lambda_min - 0.1).abs() < 1e-12);
    let r = ellipticity_bound_check(&c, DEFAULT_SLACK_FACTOR);
    assert!(r.holds && r.margin.abs() < 1e-12);
}

#[test]
fn example_5_1_degenerate_lambda_is_flagged() {
    let p = preset("example5-1", &BTreeMap::new()).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let paths = mvkit::particle::simulate_interacting(&p.model, &p.law, &grid, 64, 4).unwrap();
    let flow = mvkit::particle::statistic_flow(&paths, p.model.functionals()).unwrap();
    let region = Region::new((0.0, 1.0), vec![(-3.0, 3.0)]);
    let lambda = check_ellipticity(&p.model, &region, &[vec![0.0]], 4096, 1).unwrap().lambda_min_estimate;
    let fv = simulate_first_variation(&p.model, &paths, 0, &flow).unwrap();
    let c = malliavin_covariance(&fv, &paths, &p.model, &flow, 100, lambda).unwrap();
    let r = ellipticity_bound_check(&c, DEFAULT_SLACK_FACTOR);
    assert!(r.holds && r.degenerate);
}
