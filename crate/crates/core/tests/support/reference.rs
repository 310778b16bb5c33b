//! Brute-force per-pixel reference for the rasterizer: every Gaussian is
//! projected and tested at every query, with no tiling or shared state.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatpose::gaussians::{Gaussian, GaussianSet};
use splatpose::geom::{Intrinsics, Quaternion, Se3Transform};
use splatpose::renderer::{COV_DILATION, FOOTPRINT_MAHALANOBIS_SQ, MIN_TRANSMITTANCE};

#[derive(Clone, Copy, Debug)]
pub struct RefPixel {
    pub color: [f64; 3],
    pub depth: f64,
    pub alpha: f64,
    pub psi: Vector3<f64>,
    pub weight: f64,
}

fn quat_matrix(q: &Quaternion) -> Matrix3<f64> {
    let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

struct Projected {
    index: usize,
    depth: f64,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    world: Vector3<f64>,
}

fn project_all(set: &GaussianSet, pose: &Se3Transform, k: &Intrinsics) -> Vec<Projected> {
    let rw = quat_matrix(&pose.rotation);
    let mut out = Vec::new();
    for (index, g) in set.gaussians.iter().enumerate() {
        let c = rw * g.position + pose.translation;
        if !(c.z > 1e-6) {
            continue;
        }
        let r = quat_matrix(&g.rotation);
        let s = g.log_scale.map(f64::exp);
        let sigma = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
        let j = Matrix2x3::new(
            k.fx / c.z,
            0.0,
            -k.fx * c.x / (c.z * c.z),
            0.0,
            k.fy / c.z,
            -k.fy * c.y / (c.z * c.z),
        );
        let cov = j * rw * sigma * rw.transpose() * j.transpose() + Matrix2::identity() * COV_DILATION;
        let Some(conic) = cov.try_inverse() else {
            continue;
        };
        out.push(Projected {
            index,
            depth: c.z,
            mean: Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy),
            conic,
            opacity: 1.0 / (1.0 + (-g.opacity_logit).exp()),
            color: g.color,
            world: g.position,
        });
    }
    out.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    out
}

fn shade(splats: &[Projected], p: &Vector2<f64>, bg: [f64; 3]) -> RefPixel {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut psi = Vector3::zeros();
    let mut weight = 0.0;
    let mut t = 1.0;
    for s in splats {
        let d = p - s.mean;
        let maha = (d.transpose() * s.conic * d)[(0, 0)];
        if maha > FOOTPRINT_MAHALANOBIS_SQ {
            continue;
        }
        let a = s.opacity * (-0.5 * maha).exp();
        let w = a * t;
        for (ch, c) in color.iter_mut().enumerate() {
            *c += s.color[ch] * w;
        }
        depth += s.depth * w;
        psi += s.world * w;
        weight += w;
        t *= 1.0 - a;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for (ch, c) in color.iter_mut().enumerate() {
        *c += t * bg[ch];
    }
    RefPixel {
        color,
        depth,
        alpha: 1.0 - t,
        psi,
        weight,
    }
}

/// Reference values at every integer pixel, row-major.
pub fn reference_image(set: &GaussianSet, pose: &Se3Transform, k: &Intrinsics, bg: [f64; 3]) -> Vec<RefPixel> {
    let splats = project_all(set, pose, k);
    let mut out = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            out.push(shade(&splats, &Vector2::new(x as f64, y as f64), bg));
        }
    }
    out
}

/// Reference values at sub-pixel queries inside the image.
pub fn reference_queries(set: &GaussianSet, pose: &Se3Transform, k: &Intrinsics, queries: &[Vector2<f64>]) -> Vec<RefPixel> {
    let splats = project_all(set, pose, k);
    queries.iter().map(|q| shade(&splats, q, [0.0; 3])).collect()
}

pub struct RandomScene {
    pub set: GaussianSet,
    pub pose: Se3Transform,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub queries: Vec<Vector2<f64>>,
}

/// Small random scene with a few Gaussians near or behind the camera.
pub fn random_scene(seed: u64) -> RandomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (24 + rng.random_range(0..12), 16 + rng.random_range(0..12));
    let k = Intrinsics::new(
        rng.random_range(18.0..30.0),
        rng.random_range(18.0..30.0),
        w as f64 / 2.0 + rng.random_range(-2.0..2.0),
        h as f64 / 2.0 + rng.random_range(-2.0..2.0),
        w,
        h,
    )
    .unwrap();
    let n = rng.random_range(1..=14);
    let gaussians = (0..n)
        .map(|_| {
            let z = if rng.random_bool(0.1) {
                rng.random_range(-1.0..0.2)
            } else {
                rng.random_range(1.5..4.0)
            };
            Gaussian::new(
                Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6), z),
                Vector3::new(
                    rng.random_range(0.04..0.4),
                    rng.random_range(0.04..0.4),
                    rng.random_range(0.04..0.4),
                ),
                Quaternion::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                Vector3::new(rng.random(), rng.random(), rng.random()),
                rng.random_range(0.05..0.99),
            )
        })
        .collect();
    let rot = Quaternion::from_rotation_vector(&Vector3::new(
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    ));
    let pose = Se3Transform::new(
        rot,
        Vector3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        ),
    );
    let queries = (0..40)
        .map(|_| Vector2::new(rng.random_range(0.0..=(w - 1) as f64), rng.random_range(0.0..=(h - 1) as f64)))
        .collect();
    RandomScene {
        set: GaussianSet::new(gaussians),
        pose,
        intrinsics: k,
        background: [rng.random(), rng.random(), rng.random()],
        queries,
    }
}

/// Largest absolute difference between the rasterizer and the reference over
/// colour, depth, alpha, blended centres and blended depth.
pub fn max_renderer_error(scene: &RandomScene) -> f64 {
    let (set, pose, k, bg) = (&scene.set, &scene.pose, &scene.intrinsics, scene.background);
    let out = splatpose::renderer::render(set, pose, k, bg);
    let reference = reference_image(set, pose, k, bg);
    let mut err: f64 = 0.0;
    for (i, r) in reference.iter().enumerate() {
        for ch in 0..3 {
            err = err.max((out.color.data[i][ch] - r.color[ch]).abs());
        }
        err = err.max((out.depth.data[i] - r.depth).abs());
        err = err.max((out.alpha[i] - r.alpha).abs());
    }
    let samples = splatpose::renderer::render_surface_points(set, pose, k, &scene.queries);
    let depths = splatpose::renderer::render_depth_at(set, pose, k, &scene.queries);
    let reference = reference_queries(set, pose, k, &scene.queries);
    for ((s, d), r) in samples.iter().zip(&depths).zip(&reference) {
        err = err.max((s.point - r.psi).amax());
        err = err.max((s.depth - r.depth).abs());
        err = err.max((s.weight - r.weight).abs());
        if let Some(d) = d {
            err = err.max((d - r.depth).abs());
        }
    }
    err
}

/// Largest difference between renders of the scene and a shuffled copy.
pub fn max_permutation_error(scene: &RandomScene, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut shuffled = scene.set.clone();
    shuffled.gaussians.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (pose, k, bg) = (&scene.pose, &scene.intrinsics, scene.background);
    let a = splatpose::renderer::render(&scene.set, pose, k, bg);
    let b = splatpose::renderer::render(&shuffled, pose, k, bg);
    let mut err: f64 = 0.0;
    for i in 0..a.alpha.len() {
        for ch in 0..3 {
            err = err.max((a.color.data[i][ch] - b.color.data[i][ch]).abs());
        }
        err = err.max((a.depth.data[i] - b.depth.data[i]).abs());
    }
    let pa = splatpose::renderer::render_surface_points(&scene.set, pose, k, &scene.queries);
    let pb = splatpose::renderer::render_surface_points(&shuffled, pose, k, &scene.queries);
    for (x, y) in pa.iter().zip(&pb) {
        err = err.max((x.point - y.point).amax());
    }
    err
}
