use mvkit::coefficients::StatisticFunctional;
use mvkit::measures::{
    empirical_statistics, grid_statistics, kde_1d, w2_empirical_1d, Axis, Bandwidth, EmpiricalMeasure,
};
use proptest::prelude::*;

fn cloud(points: Vec<f64>) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform(1, points).unwrap()
}

fn rms_pairwise(x: &[f64], y: &[f64]) -> f64 {
    (x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Brute force over all permutations; only for tiny clouds.
fn w2_by_permutations(x: &[f64], y: &[f64]) -> f64 {
    fn go(x: &[f64], y: &mut Vec<f64>, k: usize, best: &mut f64) {
        if k == y.len() {
            *best = best.min(rms_pairwise(x, y));
            return;
        }
        for i in k..y.len() {
            y.swap(k, i);
            go(x, y, k + 1, best);
            y.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    go(x, &mut y.to_vec(), 0, &mut best);
    best
}

fn paired(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(-50.0..50.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn coupling_bound_holds_for_paired_samples((x, y) in paired(64)) {
        let w = w2_empirical_1d(&cloud(x.clone()), &cloud(y.clone())).unwrap();
        prop_assert!(w <= rms_pairwise(&x, &y) + 1e-10);
    }

    #[test]
    fn sorted_coupling_is_optimal((x, y) in paired(7)) {
        let w = w2_empirical_1d(&cloud(x.clone()), &cloud(y.clone())).unwrap();
        prop_assert!((w - w2_by_permutations(&x, &y)).abs() <= 1e-9 * (1.0 + w));
    }

    #[test]
    fn w2_is_symmetric_and_satisfies_triangle(
        (a, b, c) in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        ))
    ) {
        let (a, b, c) = (cloud(a), cloud(b), cloud(c));
        let ab = w2_empirical_1d(&a, &b).unwrap();
        prop_assert_eq!(ab, w2_empirical_1d(&b, &a).unwrap());
        let ac = w2_empirical_1d(&a, &c).unwrap();
        let bc = w2_empirical_1d(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-10);
        prop_assert_eq!(w2_empirical_1d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn kde_has_unit_mass(
        pts in prop::collection::vec(-3.0..3.0f64, 1..200),
        h in 0.05..1.5f64,
        nodes in 41usize..400,
    ) {
        let axis = Axis::with_nodes(-8.0, 8.0, nodes).unwrap();
        let g = kde_1d(&cloud(pts.clone()), axis, Bandwidth::Fixed(h)).unwrap();
        prop_assert!((g.mass() - 1.0).abs() < 1e-10);
        prop_assert!(g.min_value() >= 0.0);
        if pts.len() > 1 && pts.iter().any(|&p| p != pts[0]) {
            let auto = kde_1d(&cloud(pts), axis, Bandwidth::Auto).unwrap();
            prop_assert!((auto.mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_cloud_csv_round_trip(
        pts in prop::collection::vec(-1e6..1e6f64, 2..60),
        raw in prop::collection::vec(0.01..1.0f64, 30),
    ) {
        let n = pts.len() / 2;
        let raw = &raw[..n.min(raw.len())];
        let n = raw.len();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu = EmpiricalMeasure::weighted(2, pts[..2 * n].to_vec(), weights).unwrap();
        let back = EmpiricalMeasure::from_csv(&mu.to_csv()).unwrap();
        prop_assert_eq!(back.points(), mu.points());
        prop_assert_eq!(back.weights(), mu.weights());
    }
}

#[test]
fn kde_statistics_approach_empirical_ones() {
    // Gaussian smoothing with bandwidth h maps E[sin X] to E[sin X]·e^{−h²/2}
    // and E[X²] to E[X²] + h², so the gap is O(h²).
    let mu = cloud(vec![-1.3, -0.2, 0.1, 0.4, 0.9, 1.7, 2.2]);
    let fs = [
        StatisticFunctional::new("sin", |x| x[0].sin()),
        StatisticFunctional::new("sq", |x| x[0] * x[0]),
    ];
    let exact = empirical_statistics(&mu, &fs).unwrap();
    let gap = |h: f64, nodes: usize| {
        let g = kde_1d(&mu, Axis::with_nodes(-12.0, 12.0, nodes).unwrap(), Bandwidth::Fixed(h)).unwrap();
        let s = grid_statistics(&g, &fs).unwrap();
        s.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let coarse = gap(0.4, 241);
    let fine = gap(0.2, 481);
    let finer = gap(0.1, 961);
    assert!(fine <= coarse / 2.0, "{coarse} -> {fine}");
    assert!(finer <= fine / 2.0, "{fine} -> {finer}");
    let second_moment = exact[1];
    let g = kde_1d(&mu, Axis::with_nodes(-12.0, 12.0, 2401).unwrap(), Bandwidth::Fixed(0.3)).unwrap();
    let s = grid_statistics(&g, &fs).unwrap();
    assert!((s[1] - (second_moment + 0.09)).abs() < 1e-6);
}
