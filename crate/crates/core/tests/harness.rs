use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mvkit::error::Error;
use mvkit::harness::{
    emit_plotdata, list_presets, resolve_output_dir, run_experiment, ArtifactWriter, ExperimentConfig, Method,
    PlotData,
};
use mvkit::measures::{Axis, GridDensity};

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn read_dir_sorted(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn brownian_particles_and_fp_agree() {
    let c = config(
        r#"{"preset": {"name": "bm"}, "methods": ["particles", "fp"], "seed": 1,
            "particles": 100000, "time_steps": 50, "snapshot_times": [1.0],
            "space": {"lo": -10, "hi": 10, "nodes": 2001}}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&c, dir.path()).unwrap();
    assert!(report.methods.iter().all(|m| m.ok));
    let l1 = report.snapshots[0].l1_particles_fp.unwrap();
    assert!(l1 < 0.03, "{l1}");
    let fp_file = dir.path().join("bm/fp/bm_fp_t1.0000.csv");
    let text = fs::read_to_string(fp_file).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,p"));
    assert_eq!(lines.count(), 2001);
}

#[test]
fn example51_runs_end_to_end_and_flags_degeneracy() {
    let c = config(
        r#"{"preset": {"name": "example5-1"}, "methods": ["malliavin", "fp", "picard", "particles"], "seed": 4,
            "particles": 2000, "time_steps": 40, "snapshot_times": [0.25, 0.5, 0.75, 1.0],
            "malliavin": {"paths": 10},
            "space": {"lo": -8, "hi": 8, "nodes": 401}}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&c, dir.path()).unwrap();
    let order: Vec<Method> = report.methods.iter().map(|m| m.method).collect();
    assert_eq!(order, [Method::Particles, Method::Picard, Method::Fp, Method::Malliavin]);
    assert!(report.methods.iter().all(|m| m.ok), "{:?}", report.methods);
    let mal = report.malliavin.as_ref().unwrap();
    assert!(mal.degenerate);
    assert_eq!(mal.lambda_source, "estimated");
    let fp = report.fp.as_ref().unwrap();
    assert!(fp.metadata.max_conservation_defect <= 1e-4);
    assert!(fp.metadata.min_value > -1e-3);
    assert!(report.snapshots.iter().all(|s| s.l1_particles_fp.is_some() && s.w2_particles_picard.is_some()));

    let gaps = fs::read_to_string(dir.path().join("example5-1/picard/example5-1_picard_gaps.csv")).unwrap();
    assert_eq!(gaps.lines().count() - 1, report.picard.as_ref().unwrap().n_iters - 1);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("example5-1/report.json")).unwrap()).unwrap();
    assert_eq!(json["preset"], "example5-1");
    assert_eq!(json["config"]["seed"], 4);
}

#[test]
fn example52_emits_four_surfaces() {
    let c = config(
        r#"{"preset": {"name": "example5-2"}, "methods": ["fp"], "seed": 0,
            "snapshot_times": [0.25, 0.5, 0.75, 1.0],
            "space": {"lo": -4, "hi": 7, "nodes": 111}}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&c, dir.path()).unwrap();
    assert!(report.methods[0].ok, "{:?}", report.methods);
    for t in ["0.2500", "0.5000", "0.7500", "1.0000"] {
        let text = fs::read_to_string(dir.path().join(format!("example5-2/fp/example5-2_fp_t{t}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,p"));
        assert_eq!(lines.count(), 111 * 111);
    }
}

#[test]
fn identical_configs_give_identical_bytes() {
    let c = config(
        r#"{"preset": {"name": "example5-2"}, "methods": ["particles", "picard", "fp", "malliavin"], "seed": 12,
            "particles": 500, "time_steps": 20, "snapshot_times": [0.5, 1.0],
            "malliavin": {"paths": 5},
            "space": {"lo": -4, "hi": 7, "nodes": 56}}"#,
    );
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    pool(1).install(|| run_experiment(&c, a.path())).unwrap();
    pool(3).install(|| run_experiment(&c, b.path())).unwrap();
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
}

#[test]
fn initial_moments_match_the_law() {
    let c = config(
        r#"{"preset": {"name": "ou", "params": {"init_sd": 0.7}}, "methods": ["particles"], "seed": 5,
            "particles": 20000, "time_steps": 10, "snapshot_times": [0.0, 1.0]}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&c, dir.path()).unwrap();
    let m = &report.snapshots[0].moments["particles"];
    let n = 20000.0;
    let v: f64 = 0.49;
    // E X² = v, Var X² = 2v²; E X⁴ = 3v², Var X⁴ = 96v⁴.
    assert!((m["2"] - v).abs() < 4.0 * (2.0 * v * v / n).sqrt());
    assert!((m["4"] - 3.0 * v * v).abs() < 4.0 * (96.0 * v.powi(4) / n).sqrt());
    let e_abs = v.sqrt() * (2.0 / std::f64::consts::PI).sqrt();
    assert!((m["1"] - e_abs).abs() < 4.0 * ((v - e_abs * e_abs) / n).sqrt());
}

#[test]
fn elliptic_presets_keep_the_bound_margin() {
    for (name, extra) in [("example5-2", ""), ("ou", ""), ("bm", r#", "params": {"dim": 2}"#)] {
        let c = config(&format!(
            r#"{{"preset": {{"name": "{name}"{extra}}}, "methods": ["malliavin"], "seed": 8,
                "particles": 200, "time_steps": 50, "malliavin": {{"paths": 20}}}}"#
        ));
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&c, dir.path()).unwrap();
        let m = report.malliavin.as_ref().unwrap();
        assert!(!m.degenerate, "{name}");
        assert_eq!(m.violations, 0, "{name}");
        assert!(m.min_margin_plus_slack >= 0.0, "{name}");
    }
}

#[test]
fn method_failures_are_recorded_not_raised() {
    let c = config(
        r#"{"preset": {"name": "bm"}, "methods": ["particles", "fp"], "seed": 1, "fp_dt": 0.5,
            "particles": 100, "time_steps": 10, "snapshot_times": [1.0],
            "space": {"lo": -6, "hi": 6, "nodes": 121}}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&c, dir.path()).unwrap();
    assert!(report.methods[0].ok);
    assert!(!report.methods[1].ok);
    assert!(report.methods[1].error.as_ref().unwrap().contains("stab"));
    assert!(report.fp.is_none());
    assert!(dir.path().join("bm/report.json").exists());
}

#[test]
fn config_errors_name_their_field() {
    let field = |json: &str| match ExperimentConfig::from_json(json).and_then(|c| c.validate().map(|_| ())) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected config error, got {other:?}"),
    };
    assert_eq!(field(r#"{"preset": {"name": "bm"}, "methods": [], "seed": 1}"#), "methods");
    assert_eq!(field(r#"{"preset": {"name": "bm"}, "methods": ["fp"], "seed": 1, "colour": 3}"#), "colour");
    assert_eq!(
        field(r#"{"preset": {"name": "bm"}, "methods": ["particles"], "seed": 1, "time_steps": 4}"#),
        "particles"
    );
    let dir = tempfile::tempdir().unwrap();
    let c = config(r#"{"preset": {"name": "bm"}, "methods": [], "seed": 1}"#);
    assert!(matches!(run_experiment(&c, dir.path()), Err(Error::Config { .. })));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn preset_listing() {
    let a = list_presets();
    assert_eq!(a, list_presets());
    let names: Vec<&str> = a.iter().map(|p| p.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert!(names.contains(&"example5-1") && names.contains(&"example5-2"));
    let gbm = a.iter().find(|p| p.name == "gbm").unwrap();
    let expected: BTreeMap<String, f64> =
        [("mu", 0.05), ("s", 0.2), ("x0", 1.0)].iter().map(|&(k, v)| (k.to_string(), v)).collect();
    assert_eq!(gbm.params, expected);
    for name in ["example5-1", "example5-2"] {
        assert!(!a.iter().find(|p| p.name == name).unwrap().reference.is_empty());
    }
}

#[test]
fn plot_writer_is_atomic_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = ArtifactWriter::new(dir.path());
    let axis = Axis::with_nodes(-1.0, 1.0, 5).unwrap();
    let mut g = GridDensity::from_fn(vec![axis], 0.5, |x| 1.0 - x[0].abs()).unwrap();
    g.time = 0.5;
    let path = emit_plotdata(&mut w, "demo", "fp", PlotData::Density(&g)).unwrap();
    assert_eq!(path, dir.path().join("demo/fp/demo_fp_t0.5000.csv"));
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 6);
    let leftovers: Vec<_> = fs::read_dir(dir.path().join("demo/fp")).unwrap().collect();
    assert_eq!(leftovers.len(), 1);

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let mut bad = ArtifactWriter::new(&blocker);
    match emit_plotdata(&mut bad, "demo", "fp", PlotData::Density(&g)) {
        Err(Error::Io { path, .. }) => assert!(path.starts_with(&blocker)),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn output_directory_precedence() {
    let mut c = config(r#"{"preset": {"name": "bm"}, "methods": ["particles"], "seed": 1}"#);
    let explicit = PathBuf::from("/explicit");
    assert_eq!(resolve_output_dir(Some(&explicit), &c), explicit);
    c.output_dir = Some(PathBuf::from("/from-config"));
    assert_eq!(resolve_output_dir(None, &c), PathBuf::from("/from-config"));
}
