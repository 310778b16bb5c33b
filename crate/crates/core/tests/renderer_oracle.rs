mod support {
    pub mod reference;
}

use nalgebra::Vector2;
use proptest::prelude::*;
use splatpose::renderer::{render, Projection};
use support::reference::{max_permutation_error, max_renderer_error, random_scene};

#[test]
fn rasterizer_matches_brute_force_on_random_scenes() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let err = max_renderer_error(&random_scene(seed));
        assert!(err <= 1e-6, "scene {seed}: max error {err:e}");
        worst = worst.max(err);
    }
    println!("worst error over 100 scenes: {worst:e}");
}

#[test]
fn render_is_invariant_to_gaussian_order() {
    for seed in 0..100 {
        let err = max_permutation_error(&random_scene(seed), seed + 1000);
        assert!(err <= 1e-12, "scene {seed}: permutation changed output by {err:e}");
    }
}

#[test]
fn queries_outside_the_image_are_empty() {
    let s = random_scene(5);
    let (w, h) = (s.intrinsics.width as f64, s.intrinsics.height as f64);
    let outside = [Vector2::new(-0.5, 3.0), Vector2::new(3.0, -0.01), Vector2::new(w + 0.5, 1.0), Vector2::new(1.0, h + 2.0)];
    let samples = splatpose::renderer::render_surface_points(&s.set, &s.pose, &s.intrinsics, &outside);
    assert!(samples.iter().all(|x| x.is_empty()));
}

#[test]
fn empty_set_renders_background() {
    let scene = random_scene(3);
    let empty = splatpose::gaussians::GaussianSet::default();
    let out = render(&empty, &scene.pose, &scene.intrinsics, scene.background);
    assert!(out.color.data.iter().all(|c| *c == scene.background));
    assert!(out.depth.data.iter().all(|d| *d == 0.0));
    assert!(!out.all_culled);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_is_bounded_and_empty_pixels_show_background(seed in 0u64..1_000_000) {
        let s = random_scene(seed);
        let out = render(&s.set, &s.pose, &s.intrinsics, s.background);
        for (i, a) in out.alpha.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(a));
            if *a == 0.0 {
                prop_assert_eq!(out.color.data[i], s.background);
                prop_assert_eq!(out.depth.data[i], 0.0);
            }
        }
    }

    #[test]
    fn fragments_arrive_in_depth_order(seed in 0u64..1_000_000, x in 0.0f64..24.0, y in 0.0f64..16.0) {
        let s = random_scene(seed);
        let proj = Projection::new(&s.set, &s.pose, &s.intrinsics, s.background);
        let mut frags = Vec::new();
        proj.fragments_at(&Vector2::new(x, y), &mut frags);
        for pair in frags.windows(2) {
            prop_assert!(proj.splats[pair[0].splat].depth <= proj.splats[pair[1].splat].depth);
        }
    }
}

