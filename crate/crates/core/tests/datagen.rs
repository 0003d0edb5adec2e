use fnnet_core::datagen::{
    corrupt, generate_dataset, generate_record, pair_id, parse_dataset, read_dataset, sample_scene, write_dataset,
    DataGenError, NoiseConfig, SceneConfig, INLIER_THRESHOLD,
};
use fnnet_core::geometry::{classify_by_epipolar, Pose};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noise(outlier_ratio: f64, jitter: f64) -> NoiseConfig {
    NoiseConfig {
        n_total: 512,
        outlier_ratio,
        inlier_jitter_px: jitter,
        ..NoiseConfig::default()
    }
}

#[test]
fn same_seed_same_scene() {
    let cfg = SceneConfig::default();
    let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(42), &cfg);
    let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(42), &cfg);
    assert_eq!(a, b);
}

#[test]
fn scenes_project_inside_both_images_with_valid_poses() {
    let cfg = SceneConfig {
        n_points: 64,
        ..SceneConfig::default()
    };
    for seed in 0..1000 {
        let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &cfg);
        Pose::new(scene.pose.rotation, scene.pose.translation).expect("valid rotation");
        assert!((scene.pose.translation.norm() - 1.0).abs() < 1e-12);
        let angle = ((scene.pose.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle <= 30.0 + 1e-9);
        for i in 0..cfg.n_points {
            let p = scene.points3d[i];
            assert!((4.0..=20.0).contains(&p.z));
            assert!(scene.pose.transform(&p).z > 0.0);
            let [u1, v1, u2, v2] = scene.project(i);
            for c in [u1, v1, u2, v2] {
                assert!((0.0..640.0).contains(&c), "seed {seed}: {c}");
            }
        }
    }
}

#[test]
fn no_outliers_means_all_labels_true() {
    let cfg = SceneConfig::default();
    for i in 0..100 {
        let r = generate_record(5, &pair_id(i), &cfg, &noise(0.0, 0.5)).unwrap();
        assert!(r.labels.iter().all(|&l| l), "{}", r.pair_id);
    }
}

#[test]
fn half_outliers_give_inlier_fraction_near_half() {
    let cfg = SceneConfig::default();
    let records = generate_dataset(11, 100, &cfg, &noise(0.5, 0.5)).unwrap();
    let mut total = 0.0;
    for r in &records {
        let frac = r.labels.iter().filter(|&&l| l).count() as f64 / r.len() as f64;
        assert!((0.4..=0.6).contains(&frac), "{}: {frac}", r.pair_id);
        total += frac;
    }
    let mean = total / records.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean inlier rate {mean}");
}

#[test]
fn stored_labels_are_the_epipolar_classification() {
    let cfg = SceneConfig::default();
    for r in generate_dataset(3, 20, &cfg, &noise(0.6, 1.0)).unwrap() {
        let e = r.essential().unwrap();
        assert_eq!(classify_by_epipolar(&r.normalized(), &e, INLIER_THRESHOLD), r.labels);
    }
}

#[test]
fn corrupt_rejects_invalid_noise() {
    let cfg = SceneConfig::default();
    let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(1), &cfg);
    for bad in [
        NoiseConfig { n_total: 8, ..NoiseConfig::default() },
        NoiseConfig { outlier_ratio: 1.0, ..NoiseConfig::default() },
        NoiseConfig { n_total: 16, outlier_ratio: 0.7, ..NoiseConfig::default() },
    ] {
        assert!(matches!(corrupt(&scene, &bad, &cfg, "x"), Err(DataGenError::InvalidConfig(_))));
    }
}

#[test]
fn parallel_generation_matches_serial() {
    let cfg = SceneConfig::default();
    let n = noise(0.5, 0.5);
    let par = generate_dataset(9, 8, &cfg, &n).unwrap();
    let serial: Vec<_> = (0..8).map(|i| generate_record(9, &pair_id(i), &cfg, &n).unwrap()).collect();
    assert_eq!(par, serial);
}

#[test]
fn dataset_round_trip_and_byte_determinism() {
    let cfg = SceneConfig::default();
    let n = NoiseConfig { n_total: 64, ..noise(0.5, 0.5) };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let records = generate_dataset(7, 10, &cfg, &n).unwrap();
    write_dataset(&records, &a).unwrap();
    write_dataset(&generate_dataset(7, 10, &cfg, &n).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = read_dataset(&a).unwrap();
    assert_eq!(back, records);
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(read_dataset(&p).unwrap().is_empty());
}

#[test]
fn truncated_line_is_a_parse_error_with_line_number() {
    let cfg = SceneConfig::default();
    let n = NoiseConfig { n_total: 16, outlier_ratio: 0.25, ..NoiseConfig::default() };
    let records = generate_dataset(1, 3, &cfg, &n).unwrap();
    let mut text: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    text.truncate(text.len() - 40);
    match parse_dataset(&text) {
        Err(DataGenError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_or_malformed_fields_are_schema_errors() {
    let line = r#"{"pair_id":"p","k1":[600,600,320,320],"k2":[600,600,320,320],"r":[1,0,0,0,1,0,0,0,1],"corrs":[],"labels":[]}"#;
    match parse_dataset(line) {
        Err(DataGenError::Schema { line, message }) => {
            assert_eq!(line, 1);
            assert!(message.contains("`t`"), "{message}");
        }
        other => panic!("expected schema error, got {other:?}"),
    }
    let wrong_len = r#"{"pair_id":"p","k1":[600,600,320,320],"k2":[600,600,320,320],"r":[1,0,0,0,1,0,0,0,1],"t":[0,0,1],"corrs":[1,2,3],"labels":[1]}"#;
    assert!(matches!(parse_dataset(wrong_len), Err(DataGenError::Schema { .. })));
    let bad_label = r#"{"pair_id":"p","k1":[600,600,320,320],"k2":[600,600,320,320],"r":[1,0,0,0,1,0,0,0,1],"t":[0,0,1],"corrs":[1,2,3,4],"labels":[2]}"#;
    assert!(matches!(parse_dataset(bad_label), Err(DataGenError::Schema { .. })));
}

#[test]
fn numbers_are_written_with_seventeen_significant_digits() {
    let cfg = SceneConfig::default();
    let n = NoiseConfig { n_total: 16, outlier_ratio: 0.25, ..NoiseConfig::default() };
    let line = generate_record(1, "p", &cfg, &n).unwrap().to_json_line();
    assert!(line.contains("\"k1\":[6.0000000000000000e2,6.0000000000000000e2,3.2000000000000000e2,3.2000000000000000e2]"), "{line}");
}
