use fnnet_core::datagen::{generate_dataset, generate_record, DatasetRecord, NoiseConfig, SceneConfig};
use fnnet_core::diffcore::{Adam, AdamConfig, BnMode};
use fnnet_core::fnnet::{read_checkpoint, FnNet, FnNetConfig};
use fnnet_core::geometry::{decompose_essential, pose_angular_errors, CorrespondenceSet};
use fnnet_core::pipeline::{
    evaluate, map5, ransac_essential, train, EvalOptions, GroundTruthPredictor, NetPredictor, PipelineError,
    Prediction, Predictor, RansacConfig, RansacPredictor, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64, pairs: usize, n: usize, outlier_ratio: f64, jitter: f64) -> Vec<DatasetRecord> {
    let noise = NoiseConfig {
        n_total: n,
        outlier_ratio,
        inlier_jitter_px: jitter,
        ..NoiseConfig::default()
    };
    generate_dataset(seed, pairs, &SceneConfig::default(), &noise).unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        net: FnNetConfig {
            channels: 8,
            n_clusters: 4,
            n_blocks_pre: 1,
            n_blocks_post: 1,
            n_fn_blocks: 1,
            ..FnNetConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn ransac_recovers_noiseless_poses() {
    for r in dataset(1, 10, 128, 0.0, 0.0) {
        let corrs = r.normalized();
        let res = ransac_essential(&corrs, &RansacConfig { iterations: 50, ..RansacConfig::default() }).unwrap();
        assert!(!res.failed);
        assert!(res.inliers.iter().all(|&m| m));
        let pose = decompose_essential(&res.essential, &corrs, Some(&res.inliers)).unwrap();
        let (er, et) = pose_angular_errors(&r.pose().unwrap(), &pose);
        assert!(er < 0.1 && et < 0.1, "{}: {er} {et}", r.pair_id);
    }
}

#[test]
fn ransac_is_deterministic_and_validates_input() {
    let r = &dataset(2, 1, 256, 0.5, 0.5)[0];
    let corrs = r.normalized();
    let cfg = RansacConfig { iterations: 200, seed: 5, ..RansacConfig::default() };
    assert_eq!(ransac_essential(&corrs, &cfg).unwrap(), ransac_essential(&corrs, &cfg).unwrap());
    for bad in [RansacConfig { iterations: 0, ..cfg }, RansacConfig { threshold: 0.0, ..cfg }] {
        assert!(matches!(ransac_essential(&corrs, &bad), Err(PipelineError::InvalidConfig(_))));
    }
    let few = CorrespondenceSet::new(corrs.points[..7].to_vec());
    assert!(matches!(ransac_essential(&few, &cfg), Err(PipelineError::TooFewCorrespondences(7))));
}

#[test]
fn ground_truth_predictor_is_perfect() {
    let records = dataset(3, 20, 128, 0.5, 0.5);
    let report = evaluate(&records, &GroundTruthPredictor, &EvalOptions::default()).unwrap();
    assert_eq!(report.map5, 100.0);
    assert_eq!(report.precision, 100.0);
    assert_eq!(report.recall, 100.0);
    assert_eq!(report.f_score, 100.0);
    assert_eq!(report.pairs.len(), 20);
    assert!(matches!(
        evaluate(&[], &GroundTruthPredictor, &EvalOptions::default()),
        Err(PipelineError::EmptyDataset)
    ));
}

#[test]
fn hand_computed_map5() {
    assert_eq!(map5(&[0.5, 10.0]), 50.0);
}

#[test]
fn evaluation_is_order_independent() {
    let records = dataset(4, 12, 128, 0.5, 0.5);
    let cfg = RansacConfig { iterations: 100, ..RansacConfig::default() };
    let base = evaluate(&records, &RansacPredictor(cfg), &EvalOptions::default()).unwrap();
    let mut shuffled = records.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let other = evaluate(&shuffled, &RansacPredictor(cfg), &EvalOptions::default()).unwrap();
    assert_eq!((base.map5, base.precision, base.recall, base.f_score), (other.map5, other.precision, other.recall, other.f_score));
    for p in &other.pairs {
        assert!(base.pairs.contains(p));
    }
}

/// Marks a fixed set of correspondences positive and returns a useless
/// estimate, so any accuracy must come from post-processing.
struct Marker {
    keep: fn(usize, bool) -> bool,
}

impl Predictor for Marker {
    fn name(&self) -> &'static str {
        "marker"
    }

    fn predict(&self, record: &DatasetRecord, _: &CorrespondenceSet) -> Result<Prediction, PipelineError> {
        let far = generate_record(99, "far", &SceneConfig::default(), &NoiseConfig { n_total: 16, outlier_ratio: 0.0, ..NoiseConfig::default() })?;
        Ok(Prediction {
            essential: far.essential()?,
            inliers: record.labels.iter().enumerate().map(|(i, &l)| (self.keep)(i, l)).collect(),
        })
    }
}

#[test]
fn ransac_post_uses_only_predicted_inliers() {
    let records = dataset(5, 6, 256, 0.5, 0.5);
    let cfg = RansacConfig { iterations: 200, ..RansacConfig::default() };
    let options = EvalOptions { ransac_post: Some(cfg) };

    // restricting to true inliers must match RANSAC on that subset alone
    let inliers_only = Marker { keep: |_, l| l };
    let report = evaluate(&records, &inliers_only, &options).unwrap();
    assert_eq!(report.precision, 100.0);
    assert_eq!(report.recall, 100.0);
    let subset: Vec<DatasetRecord> = records
        .iter()
        .map(|r| {
            let keep: Vec<usize> = (0..r.len()).filter(|&i| r.labels[i]).collect();
            DatasetRecord {
                correspondences: keep.iter().map(|&i| r.correspondences[i]).collect(),
                labels: vec![true; keep.len()],
                ..r.clone()
            }
        })
        .collect();
    let direct = evaluate(&subset, &RansacPredictor(cfg), &EvalOptions::default()).unwrap();
    assert_eq!(report.pairs, direct.pairs);

    // fewer than eight positives: the predictor's own estimate stands
    let almost_none = Marker { keep: |i, _| i < 5 };
    let without = evaluate(&records, &almost_none, &EvalOptions::default()).unwrap();
    let with = evaluate(&records, &almost_none, &options).unwrap();
    assert_eq!(with.pairs, without.pairs);
}

#[test]
fn baseline_on_clean_data_is_near_perfect() {
    let records = dataset(6, 10, 128, 0.0, 0.0);
    let report = evaluate(&records, &RansacPredictor(RansacConfig { iterations: 20, ..RansacConfig::default() }), &EvalOptions::default()).unwrap();
    assert!(report.map5 > 99.0, "{}", report.map5);
}

#[test]
fn report_json_has_the_documented_keys() {
    let records = dataset(7, 2, 64, 0.5, 0.5);
    let report = evaluate(&records, &GroundTruthPredictor, &EvalOptions::default()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["map5", "precision", "recall", "f_score", "pairs"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["pair_id", "err_r_deg", "err_t_deg"] {
        assert!(v["pairs"][0].get(key).is_some(), "{key}");
    }
}

#[test]
fn train_config_json_is_flat() {
    let cfg = TrainConfig::from_json(r#"{"channels": 16, "learning_rate": 0.01, "seed": 3, "threshold_kind": "quadratic"}"#).unwrap();
    assert_eq!(cfg.net.channels, 16);
    assert_eq!(cfg.learning_rate, 0.01);
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.net.n_clusters, 16);
    for bad in [r#"{"chanels": 16}"#, r#"{"channels": 2}"#, r#"{"learning_rate": -1}"#, "[]", "{"] {
        assert!(matches!(TrainConfig::from_json(bad), Err(PipelineError::InvalidConfig(_))), "{bad}");
    }
}

#[test]
fn one_epoch_checkpoint_reloads_to_identical_eval() {
    let train_set = dataset(8, 10, 64, 0.5, 0.5);
    let val_set = dataset(9, 4, 64, 0.5, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let (net, logs) = train(&train_set, &val_set, &tiny_train_config(), 1, &path, |_| {}).unwrap();
    assert_eq!(logs.len(), 1);
    let ck = read_checkpoint(&path).unwrap();
    assert_eq!(ck.epoch, 1);
    let a = evaluate(&val_set, &NetPredictor(&net), &EvalOptions::default()).unwrap();
    let b = evaluate(&val_set, &NetPredictor(&ck.net), &EvalOptions::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.f_score, logs[0].val_f_score);
}

#[test]
fn training_is_deterministic() {
    let train_set = dataset(10, 6, 64, 0.5, 0.5);
    let val_set = dataset(11, 3, 64, 0.5, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let mut lines = Vec::new();
        train(&train_set, &val_set, &tiny_train_config(), 3, &path, |l| lines.push(l.line())).unwrap();
        (lines, std::fs::read(path).unwrap())
    };
    let (la, ca) = run("a.json");
    let (lb, cb) = run("b.json");
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
}

#[test]
fn loss_decreases_on_a_fixed_record() {
    let r = &dataset(12, 1, 64, 0.5, 0.5)[0];
    let corrs = r.normalized();
    let e_gt = r.essential().unwrap();
    let cfg = FnNetConfig { alpha_warmup_epochs: 0, ..tiny_train_config().net };
    let mut net = FnNet::new(cfg, 0).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut fwd = net.forward(&corrs, BnMode::Train).unwrap();
        let terms = net.loss(&mut fwd, &r.labels, &e_gt, cfg.loss_alpha).unwrap();
        losses.push(fwd.graph.value(terms.total).data()[0]);
        net.weights.params.zero_grad();
        fwd.graph.backward(terms.total, &mut net.weights.params).unwrap();
        adam.step(&mut net.weights.params);
        net.apply_bn_updates(fwd.bn_updates);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn divergence_aborts_and_keeps_the_last_checkpoint() {
    let train_set = dataset(13, 4, 64, 0.5, 0.5);
    let val_set = dataset(14, 2, 64, 0.5, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    train(&train_set, &val_set, &tiny_train_config(), 1, &path, |_| {}).unwrap();
    let before = std::fs::read(&path).unwrap();
    let wild = TrainConfig { learning_rate: 1e300, ..tiny_train_config() };
    let err = train(&train_set, &val_set, &wild, 2, &path, |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::NonFiniteLoss { epoch: 1, .. }), "{err:?}");
    assert_eq!(std::fs::read(&path).unwrap(), before);
}
