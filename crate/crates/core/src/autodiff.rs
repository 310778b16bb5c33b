//! Reverse-mode gradients of the rasterizer and a finite-difference checker.
//!
//! The backward pass replays each pixel's fragment list from a [`Projection`]
//! and walks it back to front. Per-splat screen-space adjoints are then pushed
//! through the 2D covariance, the projection Jacobian, the camera transform and
//! the 3D covariance build. Pose gradients use a left-perturbation twist
//! `(ω, v)`; Gaussian rotations use a right-perturbation tangent vector.

use std::fmt;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::geom::{Quaternion, Se3Transform, Twist};
use crate::renderer::{Fragment, Projection, Splat, TILE_SIZE};

/// Gradients of a scalar loss with respect to every optimizable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    /// Right-perturbation tangent of each Gaussian's rotation.
    pub rotation: Vec<Vector3<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    /// Left-perturbation twist of the render pose, ordered `(ω, v)`.
    pub twist: Twist,
    /// Norm of the screen-space mean gradient, used for densification.
    pub screen_mean: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector3::zeros(); n],
            color: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            twist: Twist::zeros(),
            screen_mean: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &[Vector3<f64>]| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        v3(&self.position)
            && v3(&self.log_scale)
            && v3(&self.rotation)
            && v3(&self.color)
            && self.opacity_logit.iter().all(|c| c.is_finite())
            && self.twist.iter().all(|c| c.is_finite())
    }

    /// True if every per-Gaussian entry is exactly zero.
    pub fn gaussians_are_zero(&self) -> bool {
        let z3 = |v: &[Vector3<f64>]| v.iter().all(|x| *x == Vector3::zeros());
        z3(&self.position)
            && z3(&self.log_scale)
            && z3(&self.rotation)
            && z3(&self.color)
            && self.opacity_logit.iter().all(|c| *c == 0.0)
    }

    pub fn add_assign(&mut self, other: &ParamGradients) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ContractViolation(format!(
                "gradient sizes differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.log_scale[i] += other.log_scale[i];
            self.rotation[i] += other.rotation[i];
            self.color[i] += other.color[i];
            self.opacity_logit[i] += other.opacity_logit[i];
            self.screen_mean[i] += other.screen_mean[i];
        }
        self.twist += other.twist;
        Ok(())
    }

    /// Reads one scalar entry.
    pub fn get(&self, class: ParamClass, index: usize, component: usize) -> f64 {
        match class {
            ParamClass::Position => self.position[index][component],
            ParamClass::LogScale => self.log_scale[index][component],
            ParamClass::Rotation => self.rotation[index][component],
            ParamClass::Color => self.color[index][component],
            ParamClass::Opacity => self.opacity_logit[index],
            ParamClass::Twist => self.twist[component],
        }
    }
}

/// Adjoint at one point query: `∂L/∂Ψ` and `∂L/∂d̂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryAdjoint {
    pub at: Vector2<f64>,
    pub point: Vector3<f64>,
    pub depth: f64,
}

/// Adjoints of a scalar loss with respect to the renderer's outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderAdjoints {
    /// Per-pixel `∂L/∂Ĉ`, row-major.
    pub color: Option<Vec<[f64; 3]>>,
    /// Per-pixel `∂L/∂D̂`, row-major.
    pub depth: Option<Vec<f64>>,
    pub queries: Vec<QueryAdjoint>,
}

/// Which parameter groups the backward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardMode {
    pub gaussians: bool,
    pub pose: bool,
}

impl BackwardMode {
    pub const FULL: BackwardMode = BackwardMode {
        gaussians: true,
        pose: true,
    };
    /// Gaussians held fixed; only the pose twist is differentiated.
    pub const FROZEN: BackwardMode = BackwardMode {
        gaussians: false,
        pose: true,
    };
    pub const SCENE: BackwardMode = BackwardMode {
        gaussians: true,
        pose: false,
    };
    /// Forward pass only; all gradients come back zero.
    pub const NONE: BackwardMode = BackwardMode {
        gaussians: false,
        pose: false,
    };
}

/// Screen-space adjoints accumulated for one splat.
#[derive(Clone, Copy, Debug, Default)]
struct SplatAcc {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    world: Vector3<f64>,
}

impl SplatAcc {
    fn add(&mut self, o: &SplatAcc) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
        self.world += o.world;
    }
}

/// Back-to-front adjoint of front-to-back compositing over four channels.
/// Calls `emit(fragment, ∂L/∂α, weight)` for every fragment.
fn composite_backward(
    frags: &[Fragment],
    splats: &[Splat],
    value: impl Fn(&Splat) -> [f64; 4],
    background: [f64; 4],
    grad: [f64; 4],
    mut emit: impl FnMut(&Fragment, f64, f64),
) {
    // `suffix` is the blended value behind the current fragment, normalized
    // by the transmittance in front of it.
    let mut suffix = background;
    for f in frags.iter().rev() {
        let v = value(&splats[f.splat]);
        let mut g_alpha = 0.0;
        for c in 0..4 {
            g_alpha += (v[c] - suffix[c]) * grad[c];
        }
        emit(f, f.transmittance * g_alpha, f.alpha * f.transmittance);
        for c in 0..4 {
            suffix[c] = f.alpha * v[c] + (1.0 - f.alpha) * suffix[c];
        }
    }
}

/// Pushes `∂L/∂α` at pixel `p` onto a splat's screen-space accumulator.
#[inline]
fn alpha_backward(s: &Splat, f: &Fragment, p: &Vector2<f64>, g_alpha: f64, acc: &mut SplatAcc) {
    acc.opacity += g_alpha * f.falloff;
    let g_maha = -0.5 * f.falloff * s.opacity * g_alpha;
    let d = p - s.mean;
    let a = &s.conic;
    let g_d = (a + a.transpose()) * d * g_maha;
    acc.mean -= g_d;
    acc.conic += d * d.transpose() * g_maha;
}

/// Rotation-tangent gradient from `tr(M K(θ))`, `K(θ)` the cross-product matrix.
#[inline]
fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(1, 2)] - m[(2, 1)], m[(2, 0)] - m[(0, 2)], m[(0, 1)] - m[(1, 0)])
}

struct SplatGrad {
    index: usize,
    position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Vector3<f64>,
    color: Vector3<f64>,
    opacity_logit: f64,
    twist: Twist,
    screen_mean: f64,
}

fn splat_backward(proj: &Projection, s: &Splat, acc: &SplatAcc, mode: BackwardMode) -> SplatGrad {
    let k = &proj.intrinsics;
    let r_w = proj.pose.rotation_matrix();
    let a = &s.conic;
    let g_cov = -(a * acc.conic * a);
    let g_cov = (g_cov + g_cov.transpose()) * 0.5;
    let j = &s.jac;
    let g_cov_cam = j.transpose() * g_cov * j;
    let g_j = g_cov * j * s.cov_cam * 2.0;

    let (x, y, z) = (s.cam_pos.x, s.cam_pos.y, s.cam_pos.z);
    let (z2, z3) = (z * z, z * z * z);
    let mut g_mu = j.transpose() * acc.mean;
    g_mu.z += acc.depth;
    g_mu.x += g_j[(0, 2)] * (-k.fx / z2);
    g_mu.y += g_j[(1, 2)] * (-k.fy / z2);
    g_mu.z += g_j[(0, 0)] * (-k.fx / z2)
        + g_j[(0, 2)] * (2.0 * k.fx * x / z3)
        + g_j[(1, 1)] * (-k.fy / z2)
        + g_j[(1, 2)] * (2.0 * k.fy * y / z3);

    let mut twist = Twist::zeros();
    if mode.pose {
        let m = s.cov_cam * g_cov_cam.transpose() - g_cov_cam.transpose() * s.cov_cam;
        let omega = s.cam_pos.cross(&g_mu) + vee_antisym(&m);
        twist.fixed_rows_mut::<3>(0).copy_from(&omega);
        twist.fixed_rows_mut::<3>(3).copy_from(&g_mu);
    }

    let mut out = SplatGrad {
        index: s.index,
        position: Vector3::zeros(),
        log_scale: Vector3::zeros(),
        rotation: Vector3::zeros(),
        color: Vector3::zeros(),
        opacity_logit: 0.0,
        twist,
        screen_mean: acc.mean.norm(),
    };
    if mode.gaussians {
        out.position = r_w.transpose() * g_mu + acc.world;
        let g_sigma = r_w.transpose() * g_cov_cam * r_w;
        let g_local = s.rotation.transpose() * g_sigma * s.rotation;
        let s2 = Matrix3::from_diagonal(&s.scale.component_mul(&s.scale));
        for c in 0..3 {
            out.log_scale[c] = 2.0 * s2[(c, c)] * g_local[(c, c)];
        }
        let m = s2 * g_local - g_local * s2;
        out.rotation = vee_antisym(&m);
        out.color = acc.color;
        out.opacity_logit = acc.opacity * s.opacity * (1.0 - s.opacity);
    }
    out
}

/// Exact reverse-mode derivatives of the composited outputs recorded in `proj`.
pub fn backward(proj: &Projection, adj: &RenderAdjoints, mode: BackwardMode) -> Result<ParamGradients> {
    let k = &proj.intrinsics;
    let npix = k.width * k.height;
    if adj.color.as_ref().is_some_and(|c| c.len() != npix) || adj.depth.as_ref().is_some_and(|d| d.len() != npix) {
        return Err(Error::ContractViolation(format!(
            "adjoint image size does not match the {}x{} render",
            k.width, k.height
        )));
    }
    let n = proj.gaussian_count;
    let mut grads = ParamGradients::zeros(n);
    if !mode.gaussians && !mode.pose {
        return Ok(grads);
    }
    let mut acc = vec![SplatAcc::default(); proj.splats.len()];
    let bg = proj.background;

    if adj.color.is_some() || adj.depth.is_some() {
        let tile_accs: Vec<Vec<SplatAcc>> = (0..proj.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let mut local = vec![SplatAcc::default(); proj.tiles[tile].len()];
                if local.is_empty() {
                    return local;
                }
                let tx = tile % proj.tiles_x;
                let ty = tile / proj.tiles_x;
                let mut frags = Vec::new();
                for py in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(k.height) {
                    for px in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(k.width) {
                        let i = py * k.width + px;
                        let gc = adj.color.as_ref().map_or([0.0; 3], |c| c[i]);
                        let gd = adj.depth.as_ref().map_or(0.0, |d| d[i]);
                        if gc == [0.0; 3] && gd == 0.0 {
                            continue;
                        }
                        let p = Vector2::new(px as f64, py as f64);
                        proj.fragments_at(&p, &mut frags);
                        composite_backward(
                            &frags,
                            &proj.splats,
                            |s| [s.color.x, s.color.y, s.color.z, s.depth],
                            [bg[0], bg[1], bg[2], 0.0],
                            [gc[0], gc[1], gc[2], gd],
                            |f, g_alpha, w| {
                                let s = &proj.splats[f.splat];
                                let a = &mut local[f.slot];
                                alpha_backward(s, f, &p, g_alpha, a);
                                a.color += Vector3::new(gc[0], gc[1], gc[2]) * w;
                                a.depth += gd * w;
                            },
                        );
                    }
                }
                local
            })
            .collect();
        for (tile, local) in tile_accs.iter().enumerate() {
            for (slot, a) in local.iter().enumerate() {
                acc[proj.tiles[tile][slot] as usize].add(a);
            }
        }
    }

    let mut frags = Vec::new();
    for q in &adj.queries {
        if q.point == Vector3::zeros() && q.depth == 0.0 {
            continue;
        }
        proj.fragments_at(&q.at, &mut frags);
        let g = [q.point.x, q.point.y, q.point.z, q.depth];
        composite_backward(
            &frags,
            &proj.splats,
            |s| [s.world_pos.x, s.world_pos.y, s.world_pos.z, s.depth],
            [0.0; 4],
            g,
            |f, g_alpha, w| {
                let s = &proj.splats[f.splat];
                let a = &mut acc[f.splat];
                alpha_backward(s, f, &q.at, g_alpha, a);
                a.world += q.point * w;
                a.depth += q.depth * w;
            },
        );
    }

    let per_splat: Vec<SplatGrad> = proj
        .splats
        .par_iter()
        .zip(acc.par_iter())
        .map(|(s, a)| splat_backward(proj, s, a, mode))
        .collect();
    for g in per_splat {
        grads.twist += g.twist;
        let i = g.index;
        grads.position[i] = g.position;
        grads.log_scale[i] = g.log_scale;
        grads.rotation[i] = g.rotation;
        grads.color[i] = g.color;
        grads.opacity_logit[i] = g.opacity_logit;
        grads.screen_mean[i] = g.screen_mean;
    }
    Ok(grads)
}

/// Twist gradient of a loss on a camera-frame point `p_c = W·x`, given `∂L/∂p_c`.
pub fn point_twist_gradient(p_cam: &Vector3<f64>, g: &Vector3<f64>) -> Twist {
    let w = p_cam.cross(g);
    Twist::new(w.x, w.y, w.z, g.x, g.y, g.z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Position,
    LogScale,
    Rotation,
    Color,
    Opacity,
    Twist,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Position,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::Color,
        ParamClass::Opacity,
        ParamClass::Twist,
    ];

    pub fn components(self) -> usize {
        match self {
            ParamClass::Opacity => 1,
            ParamClass::Twist => 6,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::LogScale => "log_scale",
            ParamClass::Rotation => "rotation",
            ParamClass::Color => "color",
            ParamClass::Opacity => "opacity_logit",
            ParamClass::Twist => "twist",
        }
    }
}

/// Moves one scalar parameter by `h` along its raw coordinate.
pub fn perturb(
    set: &GaussianSet,
    pose: &Se3Transform,
    class: ParamClass,
    index: usize,
    component: usize,
    h: f64,
) -> (GaussianSet, Se3Transform) {
    let mut set = set.clone();
    let mut pose = *pose;
    match class {
        ParamClass::Twist => {
            let mut t = Twist::zeros();
            t[component] = h;
            pose = pose.retract(&t);
        }
        _ => {
            let g = &mut set.gaussians[index];
            match class {
                ParamClass::Position => g.position[component] += h,
                ParamClass::LogScale => g.log_scale[component] += h,
                ParamClass::Color => g.color[component] += h,
                ParamClass::Opacity => g.opacity_logit += h,
                ParamClass::Rotation => {
                    let mut v = Vector3::zeros();
                    v[component] = h;
                    g.rotation = g.rotation.mul(&Quaternion::from_rotation_vector(&v));
                }
                ParamClass::Twist => unreachable!(),
            }
        }
    }
    (set, pose)
}

/// Loss value, gradients and a hash of the piecewise-smooth regime that
/// produced them (fragment lists, residual signs, empty flags).
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: ParamGradients,
    pub signature: u64,
}

/// A differentiable scalar objective of a Gaussian set seen from a pose.
pub trait Objective: Sync {
    fn evaluate(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<Evaluation>;

    /// Loss and signature without gradients.
    fn value(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<(f64, u64)> {
        let e = self.evaluate(set, pose)?;
        Ok((e.loss, e.signature))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub check_gaussians: bool,
    pub check_pose: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            abs_tol: 1e-4,
            rel_tol: 1e-3,
            check_gaussians: true,
            check_pose: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    /// Entries whose finite-difference stencil crossed a non-smooth boundary.
    pub skipped: usize,
    pub worst_abs: f64,
    pub worst_rel: f64,
    pub failures: usize,
    /// First failing entry: `(gaussian index, component, analytic, numeric)`.
    pub first_failure: Option<(usize, usize, f64, f64)>,
}

impl ClassReport {
    fn new(class: ParamClass) -> Self {
        Self {
            class,
            checked: 0,
            skipped: 0,
            worst_abs: 0.0,
            worst_rel: 0.0,
            failures: 0,
            first_failure: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub classes: Vec<ClassReport>,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.classes.iter().all(|c| c.passed()) && self.classes.iter().any(|c| c.checked > 0)
    }

    pub fn failing_classes(&self) -> Vec<ParamClass> {
        self.classes.iter().filter(|c| !c.passed()).map(|c| c.class).collect()
    }

    pub fn class(&self, class: ParamClass) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>8} {:>8} {:>12} {:>12} {:>8}",
            "class", "checked", "skipped", "worst_abs", "worst_rel", "status"
        )?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<14} {:>8} {:>8} {:>12.3e} {:>12.3e} {:>8}",
                c.class.name(),
                c.checked,
                c.skipped,
                c.worst_abs,
                c.worst_rel,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
            if let Some((i, comp, a, n)) = c.first_failure {
                writeln!(f, "  first failure: gaussian {i} component {comp}: analytic {a:.6e} numeric {n:.6e}")?;
            }
        }
        write!(
            f,
            "tolerance max({:e} abs, {:e} rel): {}",
            self.abs_tol,
            self.rel_tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Number of step reductions tried before a stencil is declared to straddle a kink.
const KINK_RETRIES: usize = 4;

/// Compares analytic gradients against central finite differences on every
/// raw parameter. When a stencil's endpoints change the objective's
/// signature it straddles a kink; the step is shrunk tenfold and retried,
/// and the entry is skipped if no step stays on one smooth piece.
pub fn check_gradients(
    set: &GaussianSet,
    pose: &Se3Transform,
    objective: &dyn Objective,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let base = objective.evaluate(set, pose)?;
    if base.grads.len() != set.len() {
        return Err(Error::ContractViolation("objective returned mis-sized gradients".into()));
    }
    let mut entries: Vec<(ParamClass, usize, usize)> = Vec::new();
    for class in ParamClass::ALL {
        let wanted = if class == ParamClass::Twist {
            opts.check_pose
        } else {
            opts.check_gaussians
        };
        if !wanted {
            continue;
        }
        let count = if class == ParamClass::Twist { 1 } else { set.len() };
        for i in 0..count {
            for c in 0..class.components() {
                entries.push((class, i, c));
            }
        }
    }
    let h = opts.step;
    let results: Vec<Result<Option<f64>>> = entries
        .par_iter()
        .map(|&(class, i, c)| {
            let mut step = h;
            for _ in 0..KINK_RETRIES {
                let (sp, pp) = perturb(set, pose, class, i, c, step);
                let (sm, pm) = perturb(set, pose, class, i, c, -step);
                let (lp, sig_p) = objective.value(&sp, &pp)?;
                let (lm, sig_m) = objective.value(&sm, &pm)?;
                if sig_p == base.signature && sig_m == base.signature {
                    return Ok(Some((lp - lm) / (2.0 * step)));
                }
                step *= 0.1;
            }
            Ok(None)
        })
        .collect();

    let mut classes: Vec<ClassReport> = Vec::new();
    for (&(class, i, c), r) in entries.iter().zip(results) {
        if classes.last().is_none_or(|cr| cr.class != class) {
            classes.push(ClassReport::new(class));
        }
        let cr = classes.last_mut().unwrap();
        let Some(numeric) = r? else {
            cr.skipped += 1;
            continue;
        };
        let analytic = base.grads.get(class, i, c);
        let dev = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { dev / scale } else { 0.0 };
        cr.checked += 1;
        cr.worst_abs = cr.worst_abs.max(dev);
        cr.worst_rel = cr.worst_rel.max(rel);
        if dev > opts.abs_tol.max(opts.rel_tol * scale) || !dev.is_finite() {
            cr.failures += 1;
            cr.first_failure.get_or_insert((i, c, analytic, numeric));
        }
    }
    Ok(GradcheckReport {
        classes,
        abs_tol: opts.abs_tol,
        rel_tol: opts.rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Gaussian;
    use crate::geom::Intrinsics;

    fn k32() -> Intrinsics {
        Intrinsics::new(32.0, 32.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn zero_adjoints_give_zero_gradients() {
        let set = GaussianSet::new(vec![Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::repeat(0.2),
            Quaternion::IDENTITY,
            Vector3::new(0.3, 0.6, 0.9),
            0.7,
        )]);
        let proj = Projection::new(&set, &Se3Transform::identity(), &k32(), [0.0; 3]);
        let adj = RenderAdjoints {
            color: Some(vec![[0.0; 3]; 32 * 32]),
            depth: Some(vec![0.0; 32 * 32]),
            queries: vec![],
        };
        let g = backward(&proj, &adj, BackwardMode::FULL).unwrap();
        assert_eq!(g, ParamGradients::zeros(1));
    }

    #[test]
    fn color_gradient_is_the_fragment_weight() {
        let set = GaussianSet::new(vec![Gaussian::new(
            Vector3::new(0.01, -0.02, 2.0),
            Vector3::repeat(0.1),
            Quaternion::IDENTITY,
            Vector3::new(0.3, 0.6, 0.9),
            0.7,
        )]);
        let k = k32();
        let proj = Projection::new(&set, &Se3Transform::identity(), &k, [0.2; 3]);
        let (px, py) = (17usize, 15usize);
        let mut color = vec![[0.0; 3]; 32 * 32];
        color[py * 32 + px] = [1.0, 0.0, 0.0];
        let adj = RenderAdjoints {
            color: Some(color),
            depth: None,
            queries: vec![],
        };
        let g = backward(&proj, &adj, BackwardMode::FULL).unwrap();
        let mut frags = Vec::new();
        proj.fragments_at(&Vector2::new(px as f64, py as f64), &mut frags);
        assert_eq!(frags.len(), 1);
        let w1 = frags[0].alpha * frags[0].transmittance;
        assert_eq!(g.color[0].x, w1);
        assert_eq!(g.color[0].y, 0.0);
    }

    #[test]
    fn mis_sized_adjoint_is_rejected() {
        let set = GaussianSet::new(vec![]);
        let proj = Projection::new(&set, &Se3Transform::identity(), &k32(), [0.0; 3]);
        let adj = RenderAdjoints {
            color: Some(vec![[0.0; 3]; 10]),
            depth: None,
            queries: vec![],
        };
        assert!(matches!(backward(&proj, &adj, BackwardMode::FULL), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn frozen_mode_zeroes_gaussian_gradients() {
        let set = GaussianSet::new(vec![Gaussian::new(
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::repeat(0.2),
            Quaternion::IDENTITY,
            Vector3::new(0.3, 0.6, 0.9),
            0.7,
        )]);
        let proj = Projection::new(&set, &Se3Transform::identity(), &k32(), [0.0; 3]);
        let adj = RenderAdjoints {
            color: Some(vec![[1.0, 0.5, 0.25]; 32 * 32]),
            depth: None,
            queries: vec![],
        };
        let g = backward(&proj, &adj, BackwardMode::FROZEN).unwrap();
        assert!(g.gaussians_are_zero());
        assert!(g.twist.norm() > 0.0);
    }
}
