//! Explicit scene representation and its maintenance operations.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::{projection_jacobian, Intrinsics, Quaternion, Se3Transform, NEAR_PLANE};

/// Number of higher-order spherical-harmonic coefficients (15 per channel).
pub const SH_COEFFS: usize = 45;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Natural log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    pub rotation: Quaternion,
    pub color: Vector3<f64>,
    /// Stored and serialized, not evaluated by the renderer.
    pub sh: [f64; SH_COEFFS],
    /// Pre-sigmoid opacity.
    pub opacity_logit: f64,
}

impl Gaussian {
    pub fn new(
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Quaternion,
        color: Vector3<f64>,
        opacity: f64,
    ) -> Self {
        Self {
            position,
            log_scale: scale.map(f64::ln),
            rotation: rotation.normalized(),
            color,
            sh: [0.0; SH_COEFFS],
            opacity_logit: logit(opacity),
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn is_finite(&self) -> bool {
        let q = &self.rotation;
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && [q.w, q.x, q.y, q.z].iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    /// Length of the bounding-box diagonal of the Gaussian centres.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.position);
            hi = hi.sup(&g.position);
        }
        if self.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for g in &self.gaussians {
            g.position.iter().for_each(|v| eat(*v));
            g.log_scale.iter().for_each(|v| eat(*v));
            let q = &g.rotation;
            [q.w, q.x, q.y, q.z].iter().for_each(|v| eat(*v));
            g.color.iter().for_each(|v| eat(*v));
            g.sh.iter().for_each(|v| eat(*v));
            eat(g.opacity_logit);
        }
        h
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn build_covariance(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation.to_matrix();
    let s2 = g.scale().map(|s| s * s);
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ`, with `J` the perspective Jacobian at
/// the camera-frame mean. No dilation is applied here.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    pose: &Se3Transform,
    mean_cam: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<Matrix2<f64>> {
    if !(mean_cam.z > NEAR_PLANE) {
        return Err(Error::BehindCamera { z: mean_cam.z });
    }
    let w = pose.rotation_matrix();
    let j = projection_jacobian(mean_cam, k);
    let m = j * w;
    let out = m * cov * m.transpose();
    Ok((out + out.transpose()) * 0.5)
}

/// Applies `T` to every Gaussian: positions are mapped, rotations are
/// left-composed. Scales, colours, SH and opacities are untouched.
pub fn transform_set(set: &GaussianSet, t: &Se3Transform) -> GaussianSet {
    GaussianSet::new(
        set.gaussians
            .iter()
            .map(|g| Gaussian {
                position: t.apply(&g.position),
                rotation: t.rotation.mul(&g.rotation).normalized(),
                ..g.clone()
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyOptions {
    /// Mean screen-space positional gradient above which a Gaussian grows.
    pub grad_threshold: f64,
    /// Opacity below which a Gaussian is removed.
    pub min_opacity: f64,
    /// Largest-axis scale above which a Gaussian is split rather than cloned.
    pub split_scale: f64,
    /// Scale divisor applied to both children of a split.
    pub split_factor: f64,
    /// Upper bound on the resulting count; growth stops once reached.
    pub max_gaussians: usize,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            split_scale: 0.01,
            split_factor: 1.6,
            max_gaussians: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Pruning would have emptied the set; the most opaque Gaussian was kept.
    pub kept_last: bool,
}

pub fn densify_and_prune<R: Rng + ?Sized>(
    set: &GaussianSet,
    grad_stats: &[f64],
    opts: &DensifyOptions,
    rng: &mut R,
) -> Result<(GaussianSet, DensifyReport)> {
    if grad_stats.len() != set.len() {
        return Err(Error::ContractViolation(format!(
            "gradient statistics length {} does not match {} Gaussians",
            grad_stats.len(),
            set.len()
        )));
    }
    let mut report = DensifyReport::default();
    let mut grown: Vec<Gaussian> = Vec::with_capacity(set.len());
    let mut extra: Vec<Gaussian> = Vec::new();
    let mut budget = opts.max_gaussians.saturating_sub(set.len());

    for (g, &grad) in set.gaussians.iter().zip(grad_stats) {
        let wants_growth = grad.is_finite() && grad > opts.grad_threshold && budget > 0;
        if !wants_growth {
            grown.push(g.clone());
            continue;
        }
        let scale = g.scale();
        if scale.max() > opts.split_scale {
            let r = g.rotation.to_matrix();
            let child_log_scale = g.log_scale.add_scalar(-opts.split_factor.ln());
            for _ in 0..2 {
                let n = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                extra.push(Gaussian {
                    position: g.position + r * scale.component_mul(&n),
                    log_scale: child_log_scale,
                    ..g.clone()
                });
            }
            report.split += 1;
            budget = budget.saturating_sub(1);
        } else {
            grown.push(g.clone());
            extra.push(g.clone());
            report.cloned += 1;
            budget -= 1;
        }
    }
    grown.extend(extra);

    let before = grown.len();
    let kept: Vec<Gaussian> = grown
        .iter()
        .filter(|g| g.opacity() >= opts.min_opacity && g.is_finite())
        .cloned()
        .collect();
    report.pruned = before - kept.len();

    if kept.is_empty() {
        warn!("densify_and_prune would remove every Gaussian; keeping the most opaque one");
        report.kept_last = true;
        let best = set
            .gaussians
            .iter()
            .filter(|g| g.is_finite())
            .max_by(|a, b| a.opacity_logit.total_cmp(&b.opacity_logit))
            .or_else(|| set.gaussians.first())
            .cloned()
            .ok_or_else(|| Error::ContractViolation("cannot densify an empty set".into()))?;
        return Ok((GaussianSet::new(vec![best]), report));
    }
    Ok((GaussianSet::new(kept), report))
}

/// Clamps every opacity to `ceiling`; in reset mode additionally caps it at 0.01.
pub fn adjust_opacity(set: &GaussianSet, ceiling: f64, reset: bool) -> GaussianSet {
    let mut cap = ceiling;
    if reset {
        cap = cap.min(0.01);
    }
    let cap_logit = logit(cap);
    GaussianSet::new(
        set.gaussians
            .iter()
            .map(|g| Gaussian {
                opacity_logit: g.opacity_logit.min(cap_logit),
                ..g.clone()
            })
            .collect(),
    )
}

const SET_MAGIC: &[u8; 8] = b"SPGAUSS1";
const RECORD_FLOATS: usize = 3 + 3 + 4 + 3 + SH_COEFFS + 1;

impl GaussianSet {
    /// Binary layout: magic, `u32` count, then per Gaussian little-endian
    /// `f32` position(3), log-scale(3), quaternion wxyz(4), colour(3), SH(45), opacity logit(1).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * RECORD_FLOATS * 4);
        out.extend_from_slice(SET_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for g in &self.gaussians {
            let q = &g.rotation;
            let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
            g.position.iter().for_each(|v| push(*v));
            g.log_scale.iter().for_each(|v| push(*v));
            [q.w, q.x, q.y, q.z].into_iter().for_each(&mut push);
            g.color.iter().for_each(|v| push(*v));
            g.sh.iter().for_each(|v| push(*v));
            push(g.opacity_logit);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != SET_MAGIC {
            return Err(Error::parse(path, 1, "missing Gaussian set magic tag"));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + n * RECORD_FLOATS * 4;
        if bytes.len() != expected {
            return Err(Error::parse(
                path,
                1,
                format!("expected {expected} bytes for {n} Gaussians, found {}", bytes.len()),
            ));
        }
        let floats: Vec<f64> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let gaussians = floats
            .chunks_exact(RECORD_FLOATS)
            .map(|r| {
                let mut sh = [0.0; SH_COEFFS];
                sh.copy_from_slice(&r[13..13 + SH_COEFFS]);
                Gaussian {
                    position: Vector3::new(r[0], r[1], r[2]),
                    log_scale: Vector3::new(r[3], r[4], r[5]),
                    rotation: Quaternion::new(r[6], r[7], r[8], r[9]),
                    color: Vector3::new(r[10], r[11], r[12]),
                    sh,
                    opacity_logit: r[13 + SH_COEFFS],
                }
            })
            .collect();
        Ok(Self { gaussians })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    /// ASCII PLY with centres, 8-bit colours and scalar attributes.
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        s.push_str(&format!("element vertex {}\n", self.len()));
        for p in ["x", "y", "z"] {
            s.push_str(&format!("property float {p}\n"));
        }
        for p in ["red", "green", "blue"] {
            s.push_str(&format!("property uchar {p}\n"));
        }
        for p in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n");
        for g in &self.gaussians {
            let c = g.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            let q = &g.rotation;
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
                g.position.x as f32,
                g.position.y as f32,
                g.position.z as f32,
                c.x,
                c.y,
                c.z,
                g.opacity() as f32,
                g.log_scale.x as f32,
                g.log_scale.y as f32,
                g.log_scale.z as f32,
                q.w as f32,
                q.x as f32,
                q.y as f32,
                q.z as f32
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project_point, se3_exp, Twist};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn unit(opacity: f64) -> Gaussian {
        Gaussian::new(
            Vector3::zeros(),
            Vector3::repeat(1.0),
            Quaternion::IDENTITY,
            Vector3::new(0.5, 0.5, 0.5),
            opacity,
        )
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        GaussianSet::new(
            (0..n)
                .map(|_| {
                    Gaussian::new(
                        Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(2.0..4.0),
                        ),
                        Vector3::new(
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.05..0.3),
                        ),
                        Quaternion::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ),
                        Vector3::new(rng.random(), rng.random(), rng.random()),
                        rng.random_range(0.1..0.95),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn covariance_examples() {
        let g = unit(0.5);
        assert!((build_covariance(&g) - Matrix3::identity()).amax() < 1e-12);

        let mut g2 = unit(0.5);
        g2.log_scale = Vector3::new(2.0f64.ln(), 0.0, 0.0);
        assert!((build_covariance(&g2) - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).amax() < 1e-12);

        // oracle: R · diag(s²) · Rᵀ with R written out by hand for 90° about z
        let mut g3 = unit(0.5);
        g3.log_scale = Vector3::new(1.0f64, 2.0, 3.0).map(f64::ln);
        g3.rotation = Quaternion::from_rotation_vector(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expect = r * Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)) * r.transpose();
        assert!((build_covariance(&g3) - expect).amax() < 1e-9);
        assert!((expect - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 9.0))).amax() < 1e-12);
    }

    #[test]
    fn covariance_is_symmetric_psd_and_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in random_set(&mut rng, 200).iter() {
            let c = build_covariance(g);
            assert!((c - c.transpose()).amax() < 1e-12);
            assert!(c.symmetric_eigenvalues().iter().all(|e| *e >= -1e-15));
            let mut flipped = g.clone();
            let q = g.rotation;
            flipped.rotation = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
            assert!((build_covariance(&flipped) - c).amax() < 1e-12);
        }
    }

    /// Finite-difference Jacobian of the pixel projection, used as an
    /// independent oracle for the analytic `J`.
    fn fd_jacobian(p: &Vector3<f64>, k: &Intrinsics) -> nalgebra::Matrix2x3<f64> {
        let h = 1e-6;
        let mut j = nalgebra::Matrix2x3::zeros();
        for c in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[c] += h;
            b[c] -= h;
            let pa = project_point(&a, &Se3Transform::identity(), k).unwrap().0;
            let pb = project_point(&b, &Se3Transform::identity(), k).unwrap().0;
            j.set_column(c, &((pa - pb) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn projected_covariance_on_axis() {
        let k = Intrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap();
        let sigma = 0.1;
        let cov = Matrix3::identity() * sigma * sigma;
        for d in [1.0, 2.0, 4.0] {
            let mu = Vector3::new(0.0, 0.0, d);
            let got = project_covariance(&cov, &Se3Transform::identity(), &mu, &k).unwrap();
            let j = fd_jacobian(&mu, &k);
            let oracle = j * cov * j.transpose();
            assert!((got - oracle).amax() < 1e-6 * oracle.amax());
            let expect = (80.0 * sigma / d).powi(2);
            assert!((got[(0, 0)] - expect).abs() < 1e-9 && (got[(1, 1)] - expect).abs() < 1e-9);
        }
        let near = project_covariance(&cov, &Se3Transform::identity(), &Vector3::new(0.0, 0.0, 1.5), &k).unwrap();
        let far = project_covariance(&cov, &Se3Transform::identity(), &Vector3::new(0.0, 0.0, 3.0), &k).unwrap();
        assert!(((far[(0, 0)] / near[(0, 0)]) - 0.25).abs() < 1e-6);

        let zero = project_covariance(&Matrix3::zeros(), &Se3Transform::identity(), &Vector3::new(0.3, 0.1, 2.0), &k).unwrap();
        assert_eq!(zero, Matrix2::zeros());
        assert!(project_covariance(&cov, &Se3Transform::identity(), &Vector3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn projected_covariance_off_axis_matches_fd_oracle() {
        let k = Intrinsics::new(70.0, 75.0, 30.0, 33.0, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_set(&mut rng, 50);
        let pose = se3_exp(&Twist::new(0.05, -0.1, 0.02, 0.1, 0.0, 0.3)).unwrap();
        for g in set.iter() {
            let cov = build_covariance(g);
            let mu = pose.apply(&g.position);
            let got = project_covariance(&cov, &pose, &mu, &k).unwrap();
            let w = pose.rotation_matrix();
            let j = fd_jacobian(&mu, &k);
            let oracle = j * w * cov * w.transpose() * j.transpose();
            assert!((got - oracle).amax() <= 1e-5 * oracle.amax().max(1.0));
            assert!((got - got.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn transform_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 30);
        for (a, b) in set.iter().zip(transform_set(&set, &Se3Transform::identity()).iter()) {
            assert!((a.position - b.position).norm() < 1e-12);
            assert!((build_covariance(a) - build_covariance(b)).amax() < 1e-12);
        }

        let moved = transform_set(&set, &Se3Transform::from_translation(Vector3::new(0.0, 0.0, 1.0)));
        for (a, b) in set.iter().zip(moved.iter()) {
            assert!((b.position.z - a.position.z - 1.0).abs() < 1e-12);
            assert!((build_covariance(a) - build_covariance(b)).amax() < 1e-12);
        }

        let t = se3_exp(&Twist::new(0.3, -0.5, 1.1, 0.4, 2.0, -1.0)).unwrap();
        let there = transform_set(&set, &t);
        let back = transform_set(&there, &t.inverse());
        for (a, b) in set.iter().zip(back.iter()) {
            assert!((a.position - b.position).norm() < 1e-9);
            assert!((build_covariance(a) - build_covariance(b)).amax() < 1e-9);
            assert_eq!(a.color, b.color);
            assert_eq!(a.opacity_logit, b.opacity_logit);
        }
        for i in 0..set.len() {
            for j in 0..set.len() {
                let d0 = (set.gaussians[i].position - set.gaussians[j].position).norm();
                let d1 = (there.gaussians[i].position - there.gaussians[j].position).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn densify_leaves_quiet_set_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(&mut rng, 10);
        let (out, rep) = densify_and_prune(&set, &[0.0; 10], &DensifyOptions::default(), &mut rng).unwrap();
        assert_eq!(out, set);
        assert_eq!(rep, DensifyReport::default());
    }

    #[test]
    fn densify_prunes_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = random_set(&mut rng, 5);
        set.gaussians[2].opacity_logit = logit(1e-4);
        let (out, rep) = densify_and_prune(&set, &[0.0; 5], &DensifyOptions::default(), &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(rep.pruned, 1);
        assert!(!out.gaussians.contains(&set.gaussians[2]));
    }

    #[test]
    fn densify_splits_large_and_clones_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut big = unit(0.8);
        big.log_scale = Vector3::new(0.2f64, 0.1, 0.05).map(f64::ln);
        let mut small = unit(0.8);
        small.log_scale = Vector3::repeat(0.001f64.ln());
        small.position = Vector3::new(1.0, 0.0, 0.0);
        let quiet = unit(0.8);
        let set = GaussianSet::new(vec![big.clone(), small.clone(), quiet]);
        let opts = DensifyOptions::default();
        let (out, rep) = densify_and_prune(&set, &[1e-2, 1e-2, 0.0], &opts, &mut rng).unwrap();
        assert_eq!(rep.split, 1);
        assert_eq!(rep.cloned, 1);
        // parent replaced by two children, small one duplicated
        assert_eq!(out.len(), 1 + 1 + 1 + 2);
        let children: Vec<_> = out.iter().filter(|g| g.log_scale != big.log_scale && g.log_scale != small.log_scale && g.log_scale != Vector3::zeros()).collect();
        assert_eq!(children.len(), 2);
        for c in children {
            let ratio = big.scale().component_div(&c.scale());
            assert!((ratio - Vector3::repeat(1.6)).amax() < 1e-12);
            // sampled from the parent's own distribution: stays within 6σ
            let local = big.rotation.to_matrix().transpose() * (c.position - big.position);
            assert!(local.component_div(&big.scale()).amax() < 6.0);
        }
        assert!(out.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn densify_never_empties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = random_set(&mut rng, 3);
        for (i, g) in set.gaussians.iter_mut().enumerate() {
            g.opacity_logit = logit(1e-4 * (i + 1) as f64);
        }
        let (out, rep) = densify_and_prune(&set, &[0.0; 3], &DensifyOptions::default(), &mut rng).unwrap();
        assert!(rep.kept_last);
        assert_eq!(out.gaussians, vec![set.gaussians[2].clone()]);
        assert!(densify_and_prune(&set, &[0.0; 2], &DensifyOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn opacity_adjustment() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut set = random_set(&mut rng, 8);
        assert_eq!(adjust_opacity(&set, 0.99, false), set);
        set.gaussians[0].opacity_logit = logit(0.999);
        let out = adjust_opacity(&set, 0.99, false);
        assert!((out.gaussians[0].opacity() - 0.99).abs() < 1e-12);
        let reset = adjust_opacity(&set, 0.99, true);
        assert!(reset.iter().all(|g| g.opacity() <= 0.01 + 1e-6));
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut set = random_set(&mut rng, 7);
        set.gaussians[3].sh[10] = 0.25;
        let p = Path::new("mem.bin");
        let back = GaussianSet::from_bytes(&set.to_bytes(), p).unwrap();
        assert_eq!(back.len(), 7);
        for (a, b) in set.iter().zip(back.iter()) {
            assert!((a.position - b.position).amax() < 1e-6);
            assert!((a.opacity_logit - b.opacity_logit).abs() < 1e-5);
            assert!((a.sh[10] - b.sh[10]).abs() < 1e-7);
        }
        let mut bytes = set.to_bytes();
        bytes.pop();
        assert!(GaussianSet::from_bytes(&bytes, p).is_err());
        assert!(GaussianSet::from_bytes(b"nope", p).is_err());
        assert!(set.to_ply().contains("element vertex 7"));
    }
}
