use std::path::Path;

use nalgebra::{Matrix4, SymmetricEigen, Vector2, Vector3};
use proptest::prelude::*;
use splatpose::eval::{ate, psnr, rpe, ssim, SimilarityTransform, Trajectory};
use splatpose::gaussians::{adjust_opacity, build_covariance, sigmoid, transform_set, Gaussian, GaussianSet};
use splatpose::geom::{backproject, project_point, se3_exp, se3_log, Intrinsics, Quaternion, Se3Transform, Twist};
use splatpose::image::Image;
use splatpose::losses::{loss_cor_depth, loss_cor_rgb, loss_pix_rgb};
use splatpose::renderer::render;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn quaternion() -> impl Strategy<Value = Quaternion> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z))
}

fn transform() -> impl Strategy<Value = Se3Transform> {
    (quaternion(), vec3(5.0)).prop_map(|(q, t)| Se3Transform::new(q, t))
}

fn twist(max_angle: f64) -> impl Strategy<Value = Twist> {
    (vec3(1.0), 0.0..max_angle, vec3(3.0)).prop_filter_map("axis", |(axis, angle, v)| {
        (axis.norm() > 1e-3).then(|| {
            let w = axis.normalize() * angle;
            Twist::new(w.x, w.y, w.z, v.x, v.y, v.z)
        })
    })
}

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (vec3(1.0), vec3(1.0), quaternion(), (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 0.01..0.99f64).prop_map(
        |(p, ls, q, (r, g, b), a)| {
            Gaussian::new(
                p + Vector3::new(0.0, 0.0, 3.0),
                ls.map(|v| (v * 1.5 - 2.0).exp()),
                q,
                Vector3::new(r, g, b),
                a,
            )
        },
    )
}

fn intrinsics() -> Intrinsics {
    Intrinsics::new(40.0, 42.0, 15.5, 12.0, 32, 24).unwrap()
}

fn trajectory(poses: &[Se3Transform]) -> Trajectory {
    Trajectory::new(poses.iter().copied().enumerate().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_quaternion_has_unit_norm(q in quaternion()) {
        prop_assert!((q.normalized().norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity(t in transform()) {
        let m = t.compose(&t.inverse()).to_matrix();
        prop_assert!((m - Matrix4::identity()).amax() <= 1e-9);
        let m = t.inverse().compose(&t).to_matrix();
        prop_assert!((m - Matrix4::identity()).amax() <= 1e-9);
    }

    #[test]
    fn compose_matches_matrix_product(a in transform(), b in transform(), p in vec3(4.0)) {
        let c = a.compose(&b);
        prop_assert!((c.to_matrix() - a.to_matrix() * b.to_matrix()).amax() <= 1e-9);
        prop_assert!((c.apply(&p) - a.apply(&b.apply(&p))).amax() <= 1e-9);
    }

    #[test]
    fn exp_log_round_trip(v in twist(3.1)) {
        let back = se3_log(&se3_exp(&v).unwrap());
        prop_assert!((back - v).amax() <= 1e-7, "{:?} vs {:?}", back, v);
    }

    #[test]
    fn backproject_then_project_is_identity(u in 0.0..31.0f64, v in 0.0..23.0f64, d in 0.05..50.0f64) {
        let k = intrinsics();
        let p = backproject(u, v, d, &k).unwrap();
        let (uv, depth) = project_point(&p, &Se3Transform::identity(), &k).unwrap();
        prop_assert!((uv - Vector2::new(u, v)).amax() <= 1e-9);
        prop_assert!((depth - d).abs() <= 1e-9);
    }

    #[test]
    fn covariance_is_symmetric_psd_with_squared_scales(g in gaussian()) {
        let c = build_covariance(&g);
        prop_assert!((c - c.transpose()).amax() <= 1e-12);
        let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
        let mut s2: Vec<f64> = g.scale().iter().map(|s| s * s).collect();
        eig.sort_by(f64::total_cmp);
        s2.sort_by(f64::total_cmp);
        for (e, s) in eig.iter().zip(&s2) {
            prop_assert!(*e >= -1e-12);
            prop_assert!((e - s).abs() <= 1e-9 * s.max(1.0));
        }
    }

    #[test]
    fn parameter_maps_stay_in_range(g in gaussian(), x in -30.0..30.0f64) {
        prop_assert!(g.scale().iter().all(|s| *s > 0.0));
        let s = sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!((g.rotation.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn moving_the_scene_matches_moving_the_camera(gs in prop::collection::vec(gaussian(), 1..8), t in twist(0.3)) {
        let set = GaussianSet::new(gs);
        let t = se3_exp(&t).unwrap();
        let k = intrinsics();
        let cam = Se3Transform::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let a = render(&transform_set(&set, &t), &cam, &k, [0.1, 0.2, 0.3]);
        let b = render(&set, &cam.compose(&t), &k, [0.1, 0.2, 0.3]);
        for (x, y) in a.color.data.iter().zip(&b.color.data) {
            for ch in 0..3 {
                prop_assert!((x[ch] - y[ch]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn opacity_adjustment_never_raises_opacity(gs in prop::collection::vec(gaussian(), 1..10), ceiling in 0.02..0.999f64, reset: bool) {
        let set = GaussianSet::new(gs);
        let out = adjust_opacity(&set, ceiling, reset);
        prop_assert_eq!(out.len(), set.len());
        for (a, b) in set.iter().zip(out.iter()) {
            prop_assert!(b.opacity() <= a.opacity() + 1e-15);
            prop_assert!(b.opacity() <= ceiling + 1e-12);
            prop_assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn scene_serialization_round_trips(gs in prop::collection::vec(gaussian(), 0..10)) {
        let set = GaussianSet::new(gs);
        let bytes = set.to_bytes();
        let back = GaussianSet::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.len(), set.len());
        for (a, b) in set.iter().zip(back.iter()) {
            prop_assert!((a.position - b.position).amax() <= 1e-6 * a.position.amax().max(1.0));
            prop_assert!((a.log_scale - b.log_scale).amax() <= 1e-6);
            prop_assert!((a.color - b.color).amax() <= 1e-6);
            prop_assert!((a.opacity_logit - b.opacity_logit).abs() <= 1e-6 * a.opacity_logit.abs().max(1.0));
        }
    }

    #[test]
    fn aligned_ate_ignores_similarity(poses in prop::collection::vec(transform(), 4..10), q in quaternion(), t in vec3(3.0), s in 0.2..5.0f64) {
        let gt = trajectory(&poses);
        let sim = SimilarityTransform { scale: s, rotation: q.normalized(), translation: t };
        let est = trajectory(
            &poses
                .iter()
                .map(|p| {
                    let r = sim.rotation.mul(&p.rotation);
                    Se3Transform::new(r, sim.apply(&p.translation))
                })
                .collect::<Vec<_>>(),
        );
        let spread: f64 = gt.positions().iter().map(|p| p.norm()).fold(0.0, f64::max);
        prop_assume!(spread > 0.5);
        prop_assert!(ate(&est, &gt, true).unwrap() <= 1e-6);
    }

    #[test]
    fn identical_trajectories_have_zero_error(poses in prop::collection::vec(transform(), 3..8)) {
        let gt = trajectory(&poses);
        prop_assert!(ate(&gt, &gt, false).unwrap() == 0.0);
        let r = rpe(&gt, &gt, 1).unwrap();
        prop_assert!(r.translation <= 1e-9 && r.rotation_deg <= 1e-6);
    }

    #[test]
    fn image_metrics_are_symmetric(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = Image::new(16, 12);
        let mut b = Image::new(16, 12);
        for (x, y) in a.data.iter_mut().zip(b.data.iter_mut()) {
            *x = [rng.random(), rng.random(), rng.random()];
            *y = [rng.random(), rng.random(), rng.random()];
        }
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((loss_pix_rgb(&a, &b).unwrap() - loss_pix_rgb(&b, &a).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn correspondence_terms_are_nonnegative_and_vanish_on_agreement(
        pts in prop::collection::vec((0.0..64.0f64, 0.0..64.0f64, 0.1..10.0f64), 1..30),
        shift in (-3.0..3.0f64, -3.0..3.0f64, -0.5..0.5f64),
    ) {
        let k: Vec<Vector2<f64>> = pts.iter().map(|p| Vector2::new(p.0, p.1)).collect();
        let q: Vec<Vector2<f64>> = k.iter().map(|p| p + Vector2::new(shift.0, shift.1)).collect();
        let d: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let dq: Vec<f64> = d.iter().map(|v| v + shift.2).collect();
        prop_assert_eq!(loss_cor_rgb(&k, &k).unwrap().value, 0.0);
        prop_assert_eq!(loss_cor_depth(&d, &d).unwrap().value, 0.0);
        let expect = k.len() as f64 * (shift.0.abs() + shift.1.abs());
        prop_assert!((loss_cor_rgb(&q, &k).unwrap().value - expect).abs() <= 1e-9 * expect.max(1.0));
        prop_assert!(loss_cor_depth(&dq, &d).unwrap().value >= 0.0);
    }
}
