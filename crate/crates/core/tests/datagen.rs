use gridlearn::cases;
use gridlearn::datagen::{
    generate, manifest_path, read_dataset, sample_bounds, snapshot, split, write_dataset, DataError, GenConfig,
};
use gridlearn::rng;
use gridlearn::SolverConfig;
use proptest::prelude::*;

fn small_cfg(n: usize, seed: u64) -> GenConfig {
    GenConfig { n_points: n, seed, ..Default::default() }
}

#[test]
fn case9_all_candidates_feasible() {
    let net = cases::network("case9");
    let ds = generate(&net, &small_cfg(8, 1), &SolverConfig::default(), 1).unwrap();
    assert_eq!(ds.len(), 9);
    assert_eq!(ds.manifest.n_candidates, 9);
    assert_eq!(ds.manifest.n_discarded, 0);
    let cs: Vec<f64> = ds.points.iter().map(|p| p.c).collect();
    assert_eq!(cs[0], 0.0);
    assert_eq!(cs[8], 1.0);
}

#[test]
fn overloaded_ramp_discards_snapshots() {
    let net = cases::network("case9");
    // The upper endpoint exceeds total generation capacity.
    let cap: f64 = net.generators.iter().map(|g| g.p_max).sum();
    let load: f64 = net.loads.iter().map(|l| l.p0).sum();
    let m = 1.05 * cap / load;
    let cfg = GenConfig { n_points: 6, seed: 2, lb_range: [0.5, 0.5], ub_range: [m, m], noise_scale: 0.0 };
    let ds = generate(&net, &cfg, &SolverConfig::default(), 1).unwrap();
    assert!(ds.len() < 7 && ds.len() >= 2, "{}", ds.len());
    assert_eq!(ds.manifest.n_discarded, 7 - ds.len());
    assert!(ds.manifest.discarded.iter().all(|d| d.c > 0.5));
}

#[test]
fn parallel_and_serial_files_are_identical() {
    let net = cases::network("case14");
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_dataset(&a, &generate(&net, &small_cfg(6, 5), &SolverConfig::default(), 1).unwrap()).unwrap();
    write_dataset(&b, &generate(&net, &small_cfg(6, 5), &SolverConfig::default(), 4).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(manifest_path(&a)).unwrap(), std::fs::read(manifest_path(&b)).unwrap());
}

#[test]
fn roundtrip_and_corruption() {
    let net = cases::network("case9");
    let ds = generate(&net, &small_cfg(4, 3), &SolverConfig::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path, &net, 1e-6).unwrap();
    assert_eq!(back, ds);

    // Perturb one voltage in the third record.
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    let v = rec["solution"]["v"][3].as_f64().unwrap();
    rec["solution"]["v"][3] = serde_json::json!(v + 0.01);
    lines[2] = rec.to_string();
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_dataset(&path, &net, 1e-6) {
        Err(DataError::Record { line: 3, msg }) => assert!(msg.contains("infeasible"), "{msg}"),
        other => panic!("expected a rejected record, got {other:?}"),
    }
}

#[test]
fn manifest_for_another_network_is_rejected() {
    let net = cases::network("case9");
    let ds = generate(&net, &small_cfg(2, 3), &SolverConfig::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &ds).unwrap();
    let mut other = net.clone();
    other.buses[0].v_max += 0.01;
    assert!(matches!(read_dataset(&path, &other, 1e-6), Err(DataError::Manifest(_))));
}

#[test]
fn import_without_manifest() {
    let net = cases::network("case9");
    let ds = generate(&net, &small_cfg(3, 4), &SolverConfig::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &ds).unwrap();
    std::fs::remove_file(manifest_path(&path)).unwrap();
    let back = read_dataset(&path, &net, 1e-6).unwrap();
    assert_eq!(back.points, ds.points);
    assert!(back.manifest.gen.is_none());
}

#[test]
fn split_partitions_records() {
    let net = cases::network("case9");
    let ds = generate(&net, &small_cfg(9, 4), &SolverConfig::default(), 1).unwrap();
    let (tr, te) = split(&ds, 0.8, 12);
    assert_eq!((tr.len(), te.len()), (8, 2));
    let mut ids: Vec<u64> = tr.points.iter().chain(&te.points).map(|p| p.seed_index).collect();
    ids.sort();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
}

#[test]
fn bounds_scale_nominal_load() {
    let net = cases::network("case14");
    let cfg = GenConfig::default();
    let b = sample_bounds(&net, &cfg, &mut rng::stream(0, rng::BOUNDS, 0));
    for (k, l) in net.loads.iter().enumerate() {
        let (mlb, mub) = (b.lb.p[k] / l.p0, b.ub.p[k] / l.p0);
        assert!((0.8..=0.9).contains(&mlb) && (1.1..=1.2).contains(&mub));
        if l.q0 != 0.0 {
            assert!((b.lb.q[k] / l.q0 - mlb).abs() < 1e-12);
        }
    }
    assert_eq!(b, sample_bounds(&net, &cfg, &mut rng::stream(0, rng::BOUNDS, 0)));
}

#[test]
fn zero_nominal_load_stays_zero() {
    let mut net = cases::network("case9");
    net.loads[0].p0 = 0.0;
    net.loads[0].q0 = 0.0;
    let b = sample_bounds(&net, &GenConfig::default(), &mut rng::stream(1, rng::BOUNDS, 0));
    assert_eq!((b.lb.p[0], b.ub.p[0], b.lb.q[0], b.ub.q[0]), (0.0, 0.0, 0.0, 0.0));
}

proptest! {
    #[test]
    fn noiseless_ramp_is_monotone(seed in 0u64..1000, c1 in 0.0f64..1.0, c2 in 0.0f64..1.0) {
        let net = cases::network("case30");
        let cfg = GenConfig { noise_scale: 0.0, seed, ..Default::default() };
        let b = sample_bounds(&net, &cfg, &mut rng::stream(seed, rng::BOUNDS, 0));
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let mut r = rng::stream(seed, rng::SNAPSHOT, 0);
        let a = snapshot(&b, lo, &cfg, &mut r).total_active();
        let z = snapshot(&b, hi, &cfg, &mut r).total_active();
        prop_assert!(a <= z + 1e-12);
    }
}
