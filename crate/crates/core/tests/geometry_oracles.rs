use fnnet_core::datagen::{sample_scene, SceneConfig, ScenePair};
use fnnet_core::geometry::{
    classify_by_epipolar, decompose_essential, eig_backward, epipolar_residual, essential_from_pose,
    gram_to_weight_gradient, jacobi_eigen, normalize_points, pose_angular_errors, symmetric_epipolar_distance,
    weighted_eight_point, weighted_eight_point_solve, weighted_gram, CorrespondenceSet, EssentialMatrix,
};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64, n: usize) -> ScenePair {
    let cfg = SceneConfig {
        n_points: n,
        ..SceneConfig::default()
    };
    sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &cfg)
}

/// Exact (noise-free) normalized correspondences of a scene.
fn exact(scene: &ScenePair) -> CorrespondenceSet {
    CorrespondenceSet::new(
        scene
            .points3d
            .iter()
            .map(|p| {
                let q = scene.pose.transform(p);
                [p.x / p.z, p.y / p.z, q.x / q.z, q.y / q.z]
            })
            .collect(),
    )
}

fn random_matches(rng: &mut ChaCha8Rng, n: usize) -> CorrespondenceSet {
    CorrespondenceSet::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.55..0.55))).collect())
}

#[test]
fn essential_from_pose_annihilates_projections() {
    for seed in 0..20 {
        let s = scene(seed, 50);
        let e = essential_from_pose(&s.pose).unwrap();
        for p in &exact(&s).points {
            assert!(epipolar_residual([p[0], p[1]], [p[2], p[3]], &e).abs() <= 1e-12);
            assert!(symmetric_epipolar_distance([p[0], p[1]], [p[2], p[3]], &e) <= 1e-16);
        }
    }
}

#[test]
fn distance_grows_with_drift_along_line_normal() {
    let s = scene(4, 10);
    let e = essential_from_pose(&s.pose).unwrap();
    for p in &exact(&s).points {
        let line = e.matrix() * Vector3::new(p[0], p[1], 1.0);
        let normal = Vector3::new(line.x, line.y, 0.0).normalize();
        let mut last = symmetric_epipolar_distance([p[0], p[1]], [p[2], p[3]], &e);
        for step in 1..=20 {
            let h = step as f64 * 1e-4;
            let d = symmetric_epipolar_distance([p[0], p[1]], [p[2] + h * normal.x, p[3] + h * normal.y], &e);
            assert!(d > last);
            last = d;
        }
    }
}

#[test]
fn eight_point_recovers_ground_truth_from_noiseless_inliers() {
    for seed in 0..20 {
        let s = scene(seed, 20);
        let c = exact(&s);
        let e = weighted_eight_point(&c, &[1.0; 20]).unwrap();
        let max_res = c
            .points
            .iter()
            .map(|p| epipolar_residual([p[0], p[1]], [p[2], p[3]], &e).abs())
            .fold(0.0, f64::max);
        assert!(max_res <= 1e-10, "residual {max_res}");
        assert!(e.distance(&essential_from_pose(&s.pose).unwrap()) <= 1e-8);
    }
}

#[test]
fn eight_point_weight_scaling_and_zeroed_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = scene(8, 12);
    let inliers = exact(&s);
    let reference = weighted_eight_point(&inliers, &[1.0; 12]).unwrap();

    let mut all = inliers.points.clone();
    all.extend(random_matches(&mut rng, 100).points);
    let mut weights = vec![1.0; 12];
    weights.extend(vec![0.0; 100]);
    let mixed = weighted_eight_point(&CorrespondenceSet::new(all), &weights).unwrap();
    assert!((mixed.matrix() - reference.matrix()).norm() <= 1e-12);

    let noisy = random_matches(&mut rng, 40);
    let w: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..1.0)).collect();
    let base = weighted_eight_point(&noisy, &w).unwrap();
    for c in [1e-3, 0.5, 7.0, 1e3] {
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let e = weighted_eight_point(&noisy, &scaled).unwrap();
        assert!((e.matrix() - base.matrix()).norm() <= 1e-12, "scale {c}");
    }
}

#[test]
fn eight_point_residual_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = random_matches(&mut rng, 60);
    let w: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
    let sol = weighted_eight_point_solve(&c, &w).unwrap();
    let g = weighted_gram(&c, &w);
    let quad = |v: &[f64]| -> f64 { (0..9).map(|i| (0..9).map(|j| v[i] * g[i * 9 + j] * v[j]).sum::<f64>()).sum() };
    let lam = quad(&sol.vector);
    assert!((lam - sol.eigen.values[0]).abs() <= 1e-10);
    for _ in 0..1000 {
        let mut v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        assert!(lam <= quad(&v));
    }
}

#[test]
fn eig_backward_on_diagonal_matrix_matches_finite_differences() {
    let mut g: Vec<f64> = vec![0.0; 81];
    for i in 0..9 {
        g[i * 9 + i] = (i + 1) as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let upstream: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |g: &[f64]| {
        let e = jacobi_eigen(g, 9);
        let mut v = e.vector(0);
        if v[0] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut e = jacobi_eigen(&g, 9);
    if e.vector(0)[0] < 0.0 {
        for i in 0..9 {
            e.vectors[i * 9] = -e.vectors[i * 9];
        }
    }
    let analytic = eig_backward(&e, &upstream).unwrap();
    let h = 1e-6;
    for i in 0..9 {
        for j in i..9 {
            // symmetric perturbation of (i, j) and (j, i)
            let mut plus = g.clone();
            let mut minus = g.clone();
            let delta = if i == j { h } else { h / 2.0 };
            for (a, b) in [(i, j), (j, i)] {
                plus[a * 9 + b] += delta;
                minus[a * 9 + b] -= delta;
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[i * 9 + j];
            assert!((a - numeric).abs() <= 1e-5, "({i},{j}) {a} vs {numeric}");
        }
    }
}

#[test]
fn smallest_eigenvalue_gradient_is_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b: Vec<f64> = (0..81).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = vec![0.0; 81];
    for i in 0..9 {
        for j in 0..9 {
            g[i * 9 + j] = (0..9).map(|k| b[k * 9 + i] * b[k * 9 + j]).sum();
        }
    }
    let e = jacobi_eigen(&g, 9);
    assert!(e.lowest_gap() > 1e-3);
    let v = e.vector(0);
    let h = 1e-6;
    for i in 0..9 {
        for j in 0..9 {
            let mut plus = g.clone();
            let mut minus = g.clone();
            plus[i * 9 + j] += h;
            minus[i * 9 + j] -= h;
            let numeric = (jacobi_eigen(&plus, 9).values[0] - jacobi_eigen(&minus, 9).values[0]) / (2.0 * h);
            // the solver reads only the symmetric part of its input
            let expected = v[i] * v[j];
            assert!((numeric - expected).abs() <= 1e-6, "({i},{j}) {numeric} vs {expected}");
        }
    }
}

#[test]
fn weight_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let s = scene(17, 40);
    let mut c = exact(&s);
    for p in c.points.iter_mut().skip(28) {
        p[2] += rng.random_range(-0.05..0.05);
        p[3] += rng.random_range(-0.05..0.05);
    }
    for p in c.points.iter_mut() {
        p[2] += rng.random_range(-1e-3..1e-3);
    }
    let w: Vec<f64> = (0..40).map(|_| rng.random_range(0.2..1.0)).collect();
    let upstream: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |w: &[f64]| {
        let sol = weighted_eight_point_solve(&c, w).unwrap();
        sol.vector.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let sol = weighted_eight_point_solve(&c, &w).unwrap();
    let dg = eig_backward(&sol.eigen, &upstream).unwrap();
    let analytic = gram_to_weight_gradient(&c, &w, &dg);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..40)
        .map(|k| {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[k] += h;
            minus[k] -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
}

#[test]
fn decomposition_round_trip_on_noiseless_scenes() {
    for seed in 0..50 {
        let s = scene(seed, 30);
        let c = exact(&s);
        let e = essential_from_pose(&s.pose).unwrap();
        let pose = decompose_essential(&e, &c, None).unwrap();
        let (er, et) = pose_angular_errors(&s.pose, &pose);
        assert!(er.to_radians() <= 1e-6 && et.to_radians() <= 1e-6, "seed {seed}: {er} {et}");
        assert!(pose.translation.dot(&s.pose.translation) > 0.0, "translation sign resolved");

        let neg = EssentialMatrix::from_matrix(-e.matrix()).unwrap();
        let pose_neg = decompose_essential(&neg, &c, None).unwrap();
        assert!((pose_neg.rotation - pose.rotation).norm() < 1e-9);
        assert!((pose_neg.translation - pose.translation).norm() < 1e-9);

        let est = weighted_eight_point(&c, &vec![1.0; 30]).unwrap();
        let (er, et) = pose_angular_errors(&s.pose, &decompose_essential(&est, &c, None).unwrap());
        assert!(er < 1e-4 && et < 1e-4, "seed {seed}: {er} {et}");
    }
}

#[test]
fn classification_examples() {
    let s = scene(2, 100);
    let e = essential_from_pose(&s.pose).unwrap();
    let c = exact(&s);
    assert!(classify_by_epipolar(&c, &e, 1e-4).iter().all(|&l| l));
    assert!(classify_by_epipolar(&c, &e, f64::MAX).iter().all(|&l| l));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = SceneConfig::default().intrinsics();
    let px: Vec<[f64; 4]> = (0..2000).map(|_| std::array::from_fn(|_| rng.random_range(0.0..640.0))).collect();
    let labels = classify_by_epipolar(&normalize_points(&px, &k, &k), &e, 1e-4);
    let rate = labels.iter().filter(|&&l| l).count() as f64 / 2000.0;
    assert!(rate < 0.05, "random matches labeled inliers at rate {rate}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eight_point_is_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_matches(&mut rng, 32);
        let w: Vec<f64> = (0..32).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut order: Vec<usize> = (0..32).collect();
        order.shuffle(&mut rng);
        let pc = CorrespondenceSet::new(order.iter().map(|&i| c.points[i]).collect());
        let pw: Vec<f64> = order.iter().map(|&i| w[i]).collect();
        let a = weighted_eight_point(&c, &w).unwrap();
        let b = weighted_eight_point(&pc, &pw).unwrap();
        prop_assert!((a.matrix() - b.matrix()).norm() <= 1e-10);
    }
}
