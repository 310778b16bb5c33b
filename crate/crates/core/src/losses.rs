//! Scalar objectives: the correspondence loss family, the pixel loss and
//! the scene-stage photometric loss, plus their render-level adjoints.

use std::fmt;

use nalgebra::{Matrix2x3, Vector2, Vector3};

use crate::autodiff::{backward, point_twist_gradient, BackwardMode, Evaluation, Objective, QueryAdjoint, RenderAdjoints};
use crate::error::{Error, Result};
use crate::eval::{ssim, ssim_with_grad};
use crate::gaussians::GaussianSet;
use crate::geom::{project_camera_point, projection_jacobian, Intrinsics, Se3Transform, NEAR_PLANE};
use crate::image::Image;
use crate::renderer::{Projection, EMPTY_SURFACE_WEIGHT};

/// Sign with `sign(0) = 0`, the subgradient used for every L1 term.
#[inline]
pub fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn sign_code(x: f64) -> u64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        2
    } else {
        3
    }
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v.wrapping_add(0x9e3779b97f4a7c15)).wrapping_mul(0x100000001b3)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    /// Pixel loss only, the "without correspondence" ablation.
    pub fn pixel_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 1.0,
            lambda3: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss term that may be inactive when it has no usable inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub value: f64,
    pub active: bool,
}

impl Term {
    pub const INACTIVE: Term = Term {
        value: 0.0,
        active: false,
    };

    pub fn active(value: f64) -> Self {
        Self { value, active: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cor_rgb: Term,
    pub pix_rgb: f64,
    pub cor_depth: Term,
    pub total: f64,
    pub m_used: usize,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iter,cor_rgb,pix_rgb,cor_depth,total,M_used";

    /// Inactive terms are written as empty fields.
    pub fn csv_row(&self, iter: usize) -> String {
        let term = |t: &Term| if t.active { format!("{:.9e}", t.value) } else { String::new() };
        format!(
            "{iter},{},{:.9e},{},{:.9e},{}",
            term(&self.cor_rgb),
            self.pix_rgb,
            term(&self.cor_depth),
            self.total,
            self.m_used
        )
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.6} (cor_rgb {:.6}{}, pix_rgb {:.6}, cor_depth {:.6}{}, M_used {})",
            self.total,
            self.cor_rgb.value,
            if self.cor_rgb.active { "" } else { " inactive" },
            self.pix_rgb,
            self.cor_depth.value,
            if self.cor_depth.active { "" } else { " inactive" },
            self.m_used
        )
    }
}

/// `Σ |q − k|₁` over pairs, in pixels.
pub fn loss_cor_rgb(q: &[Vector2<f64>], k: &[Vector2<f64>]) -> Result<Term> {
    if q.len() != k.len() {
        return Err(Error::ContractViolation(format!(
            "correspondence lists differ in length: {} vs {}",
            q.len(),
            k.len()
        )));
    }
    if q.is_empty() {
        return Ok(Term::INACTIVE);
    }
    Ok(Term::active(q.iter().zip(k).map(|(a, b)| (a - b).abs().sum()).sum()))
}

/// Mean absolute difference over all pixels and channels.
pub fn loss_pix_rgb(target: &Image, rendered: &Image) -> Result<f64> {
    if !target.same_shape(rendered) {
        return Err(Error::ContractViolation(format!(
            "image size mismatch: {}x{} vs {}x{}",
            target.width, target.height, rendered.width, rendered.height
        )));
    }
    let sum: f64 = target
        .data
        .iter()
        .zip(&rendered.data)
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs())
        .sum();
    Ok(sum / (3 * target.data.len()) as f64)
}

/// `Σ |d̂ − d|` over pairs, in scene units.
pub fn loss_cor_depth(rendered: &[f64], reference: &[f64]) -> Result<Term> {
    if rendered.len() != reference.len() {
        return Err(Error::ContractViolation(format!(
            "depth lists differ in length: {} vs {}",
            rendered.len(),
            reference.len()
        )));
    }
    if rendered.is_empty() {
        return Ok(Term::INACTIVE);
    }
    Ok(Term::active(rendered.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum()))
}

/// Weighted sum of the three terms. Terms with zero weight or marked inactive
/// are left out of the sum entirely.
pub fn loss_correspondence_total(
    cor_rgb: Term,
    pix_rgb: f64,
    cor_depth: Term,
    weights: &LossWeights,
    m_used: usize,
) -> LossBreakdown {
    let mut total = 0.0;
    if cor_rgb.active && weights.lambda1 != 0.0 {
        total += weights.lambda1 * cor_rgb.value;
    }
    if weights.lambda2 != 0.0 {
        total += weights.lambda2 * pix_rgb;
    }
    if cor_depth.active && weights.lambda3 != 0.0 {
        total += weights.lambda3 * cor_depth.value;
    }
    LossBreakdown {
        cor_rgb,
        pix_rgb,
        cor_depth,
        total,
        m_used,
    }
}

/// `mean|Î − I| + w·(1 − SSIM(Î, I))`.
pub fn loss_scene(target: &Image, rendered: &Image, ssim_weight: f64) -> Result<f64> {
    let l1 = loss_pix_rgb(target, rendered)?;
    if ssim_weight == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + ssim_weight * (1.0 - ssim(rendered, target)?))
}

/// Scene loss and its per-pixel adjoint with respect to `rendered`.
pub fn loss_scene_with_grad(target: &Image, rendered: &Image, ssim_weight: f64) -> Result<(f64, Vec<[f64; 3]>)> {
    let l1 = loss_pix_rgb(target, rendered)?;
    let n3 = (3 * target.data.len()) as f64;
    let mut grad: Vec<[f64; 3]> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| [0, 1, 2].map(|c| l1_sign(r[c] - t[c]) / n3))
        .collect();
    if ssim_weight == 0.0 {
        return Ok((l1, grad));
    }
    let (s, g_ssim) = ssim_with_grad(rendered, target)?;
    for (g, gs) in grad.iter_mut().zip(g_ssim) {
        for c in 0..3 {
            g[c] -= ssim_weight * gs[c];
        }
    }
    Ok((l1 + ssim_weight * (1.0 - s), grad))
}

fn pixel_sign_hash(target: &Image, rendered: &Image) -> u64 {
    let mut h = 0x84222325cbf29ce4;
    for (r, t) in rendered.data.iter().zip(&target.data) {
        let code = sign_code(r[0] - t[0]) | sign_code(r[1] - t[1]) << 2 | sign_code(r[2] - t[2]) << 4;
        h = mix(h, code);
    }
    h
}

/// Photometric objective of the scene stage.
#[derive(Clone, Debug)]
pub struct SceneObjective {
    pub target: Image,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub ssim_weight: f64,
    pub mode: BackwardMode,
}

impl Objective for SceneObjective {
    fn evaluate(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<Evaluation> {
        let proj = Projection::new(set, pose, &self.intrinsics, self.background);
        let out = proj.render();
        let (loss, grad) = loss_scene_with_grad(&self.target, &out.color, self.ssim_weight)?;
        let adj = RenderAdjoints {
            color: Some(grad),
            depth: None,
            queries: Vec::new(),
        };
        let grads = backward(&proj, &adj, self.mode)?;
        Ok(Evaluation {
            loss,
            grads,
            signature: mix(out.support_hash, pixel_sign_hash(&self.target, &out.color)),
        })
    }

    fn value(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<(f64, u64)> {
        let out = Projection::new(set, pose, &self.intrinsics, self.background).render();
        let loss = loss_scene(&self.target, &out.color, self.ssim_weight)?;
        Ok((loss, mix(out.support_hash, pixel_sign_hash(&self.target, &out.color))))
    }
}

/// One correspondence as consumed by the loss: `k` in the target image and
/// `k'` in the render, with an optional reference depth `d(k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPair {
    pub k: Vector2<f64>,
    pub k_prime: Vector2<f64>,
    pub ref_depth: Option<f64>,
    /// Surface point `Ψ(k')` frozen when the pair was matched. When set, `q`
    /// and `d̂` follow this point under the current pose instead of
    /// re-sampling the render.
    pub anchor: Option<Vector3<f64>>,
}

/// Per-pair diagnostics from one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairResidual {
    pub q: Option<Vector2<f64>>,
    pub depth: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CorrespondenceEvaluation {
    pub breakdown: LossBreakdown,
    pub eval: Evaluation,
    pub rendered: Image,
    pub residuals: Vec<PairResidual>,
    /// Fewer than `min_pairs` usable pairs; the correspondence terms were dropped.
    pub fell_back: bool,
}

/// The correspondence loss `λ1·L_cor-rgb + λ2·L_pix-rgb + λ3·L_cor-depth`
/// of a render against a target image.
#[derive(Clone, Debug)]
pub struct CorrespondenceObjective {
    pub target: Image,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub pairs: Vec<LossPair>,
    pub weights: LossWeights,
    pub mode: BackwardMode,
    /// Below this many usable pairs only the pixel term is kept.
    pub min_pairs: usize,
}

/// Jacobian of the pinhole projection at a camera-frame point.
fn proj_jac(p: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    projection_jacobian(p, k)
}

impl CorrespondenceObjective {
    pub fn evaluate_full(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<CorrespondenceEvaluation> {
        self.evaluate_with(set, pose, self.mode)
    }

    fn evaluate_with(&self, set: &GaussianSet, pose: &Se3Transform, mode: BackwardMode) -> Result<CorrespondenceEvaluation> {
        self.weights.validate()?;
        let k = &self.intrinsics;
        let proj = Projection::new(set, pose, k, self.background);
        let out = proj.render();
        let pix = loss_pix_rgb(&self.target, &out.color)?;
        let mut signature = mix(out.support_hash, pixel_sign_hash(&self.target, &out.color));
        let n3 = (3 * self.target.data.len()) as f64;
        let color_adj: Vec<[f64; 3]> = if self.weights.lambda2 != 0.0 {
            out.color
                .data
                .iter()
                .zip(&self.target.data)
                .map(|(r, t)| [0, 1, 2].map(|c| self.weights.lambda2 * l1_sign(r[c] - t[c]) / n3))
                .collect()
        } else {
            vec![[0.0; 3]; self.target.data.len()]
        };

        let live: Vec<Vector2<f64>> = self
            .pairs
            .iter()
            .filter(|p| p.anchor.is_none())
            .map(|p| p.k_prime)
            .collect();
        let samples = proj.sample_surface(&live);
        let mut live_iter = samples.iter();

        struct Usable {
            pair: usize,
            p_cam: Vector3<f64>,
            q: Vector2<f64>,
            depth: f64,
            live: bool,
        }
        let r_w = pose.rotation_matrix();
        let mut usable = Vec::new();
        let mut residuals = Vec::with_capacity(self.pairs.len());
        for (i, pair) in self.pairs.iter().enumerate() {
            let (point, depth, live_flag) = match pair.anchor {
                Some(a) => {
                    let pc = pose.apply(&a);
                    (Some(a), pc.z, false)
                }
                None => {
                    let s = live_iter.next().unwrap();
                    signature = mix(signature, s.support_hash);
                    if s.weight < EMPTY_SURFACE_WEIGHT {
                        (None, 0.0, true)
                    } else {
                        (Some(s.point), s.depth, true)
                    }
                }
            };
            let p_cam = point.map(|p| r_w * p + pose.translation);
            match p_cam {
                Some(pc) if pc.z > NEAR_PLANE => {
                    let q = project_camera_point(&pc, k);
                    residuals.push(PairResidual {
                        q: Some(q),
                        depth: Some(depth),
                    });
                    usable.push(Usable {
                        pair: i,
                        p_cam: pc,
                        q,
                        depth,
                        live: live_flag,
                    });
                }
                _ => {
                    signature = mix(signature, 0xdead ^ i as u64);
                    residuals.push(PairResidual { q: None, depth: None });
                }
            }
        }

        let m_used = usable.len();
        let fell_back = m_used < self.min_pairs.max(1);
        let (cor_rgb, cor_depth) = if fell_back {
            (Term::INACTIVE, Term::INACTIVE)
        } else {
            let qs: Vec<_> = usable.iter().map(|u| u.q).collect();
            let ks: Vec<_> = usable.iter().map(|u| self.pairs[u.pair].k).collect();
            let with_depth: Vec<&Usable> = usable.iter().filter(|u| self.pairs[u.pair].ref_depth.is_some()).collect();
            let dh: Vec<f64> = with_depth.iter().map(|u| u.depth).collect();
            let dr: Vec<f64> = with_depth.iter().map(|u| self.pairs[u.pair].ref_depth.unwrap()).collect();
            (loss_cor_rgb(&qs, &ks)?, loss_cor_depth(&dh, &dr)?)
        };
        let breakdown = loss_correspondence_total(cor_rgb, pix, cor_depth, &self.weights, m_used);

        let mut explicit_twist = crate::geom::Twist::zeros();
        let mut queries = Vec::new();
        if !fell_back {
            let w = &self.weights;
            for u in &usable {
                let pair = &self.pairs[u.pair];
                let r = u.q - pair.k;
                let sx = l1_sign(r.x);
                let sy = l1_sign(r.y);
                signature = mix(signature, sign_code(r.x) | sign_code(r.y) << 2);
                let g_q = Vector2::new(sx, sy) * w.lambda1;
                let mut g_pc = proj_jac(&u.p_cam, k).transpose() * g_q;
                let mut g_depth = 0.0;
                if let Some(d) = pair.ref_depth {
                    let s = l1_sign(u.depth - d);
                    signature = mix(signature, sign_code(u.depth - d));
                    g_depth = w.lambda3 * s;
                }
                if !u.live {
                    g_pc.z += g_depth;
                    g_depth = 0.0;
                }
                if w.lambda1 == 0.0 && g_depth == 0.0 && u.live {
                    continue;
                }
                if mode.pose {
                    explicit_twist += point_twist_gradient(&u.p_cam, &g_pc);
                }
                if u.live {
                    queries.push(QueryAdjoint {
                        at: pair.k_prime,
                        point: r_w.transpose() * g_pc,
                        depth: g_depth,
                    });
                }
            }
        }

        let adj = RenderAdjoints {
            color: Some(color_adj),
            depth: None,
            queries,
        };
        let mut grads = backward(&proj, &adj, mode)?;
        grads.twist += explicit_twist;
        Ok(CorrespondenceEvaluation {
            breakdown,
            eval: Evaluation {
                loss: breakdown.total,
                grads,
                signature,
            },
            rendered: out.color,
            residuals,
            fell_back,
        })
    }
}

impl Objective for CorrespondenceObjective {
    fn evaluate(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<Evaluation> {
        Ok(self.evaluate_full(set, pose)?.eval)
    }

    fn value(&self, set: &GaussianSet, pose: &Se3Transform) -> Result<(f64, u64)> {
        let e = self.evaluate_with(set, pose, BackwardMode::NONE)?.eval;
        Ok((e.loss, e.signature))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ssim;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn cor_rgb_examples() {
        let k = vec![v(1.0, 2.0), v(3.0, 4.0)];
        assert_eq!(loss_cor_rgb(&k, &k).unwrap(), Term::active(0.0));
        assert_eq!(loss_cor_rgb(&[v(3.0, -4.0)], &[v(0.0, 0.0)]).unwrap().value, 7.0);
        let q: Vec<_> = k.iter().map(|p| p + v(1.0, 0.0)).collect();
        assert_eq!(loss_cor_rgb(&q, &k).unwrap().value, 2.0);
        assert_eq!(loss_cor_rgb(&[], &[]).unwrap(), Term::INACTIVE);
        assert!(loss_cor_rgb(&k, &k[..1]).is_err());
    }

    #[test]
    fn pix_rgb_examples() {
        let a = Image::filled(8, 8, [0.5; 3]);
        assert_eq!(loss_pix_rgb(&a, &a).unwrap(), 0.0);
        let b = Image::filled(8, 8, [0.6; 3]);
        assert!((loss_pix_rgb(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        let mut c = a.clone();
        for p in c.data.iter_mut().take(32) {
            *p = [0.7; 3];
        }
        assert!((loss_pix_rgb(&a, &c).unwrap() - 0.1).abs() < 1e-12);
        assert!(loss_pix_rgb(&a, &Image::new(4, 8)).is_err());
    }

    #[test]
    fn cor_depth_examples() {
        assert_eq!(loss_cor_depth(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 0.0);
        assert_eq!(loss_cor_depth(&[2.0], &[1.5]).unwrap().value, 0.5);
        let a = [1.0, 2.5, 0.3];
        let b = [1.5, 2.0, 0.1];
        let s = 3.0;
        let sa: Vec<_> = a.iter().map(|x| x * s).collect();
        let sb: Vec<_> = b.iter().map(|x| x * s).collect();
        let l = loss_cor_depth(&a, &b).unwrap().value;
        assert!((loss_cor_depth(&sa, &sb).unwrap().value - s * l).abs() < 1e-12);
        assert!(!loss_cor_depth(&[], &[]).unwrap().active);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let b = loss_correspondence_total(Term::active(1.0), 1.0, Term::active(1.0), &w, 5);
        assert_eq!(b.total, 12.0);
        let b = loss_correspondence_total(Term::active(0.0), 0.0, Term::active(0.0), &w, 5);
        assert_eq!(b.total, 0.0);
        let pix = 0.123456789;
        let b = loss_correspondence_total(Term::active(3.7), pix, Term::active(0.9), &LossWeights::pixel_only(), 5);
        assert_eq!(b.total.to_bits(), pix.to_bits());
        assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn breakdown_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let w = LossWeights::new(rng.random_range(0.0..20.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)).unwrap();
            let (a, b, c) = (rng.random_range(0.0..100.0), rng.random_range(0.0..1.0), rng.random_range(0.0..10.0));
            let r = loss_correspondence_total(Term::active(a), b, Term::active(c), &w, 3);
            assert!((r.total - (w.lambda1 * a + w.lambda2 * b + w.lambda3 * c)).abs() < 1e-9);
        }
    }

    #[test]
    fn scene_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Image::new(24, 24);
        for p in a.data.iter_mut() {
            *p = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        }
        assert_eq!(loss_scene(&a, &a, 0.2).unwrap(), 0.0);

        let mut b = a.clone();
        for p in b.data.iter_mut() {
            *p = p.map(|c| c + 0.1);
        }
        let expect = 0.1 + 0.2 * (1.0 - ssim(&b, &a).unwrap());
        assert!((loss_scene(&a, &b, 0.2).unwrap() - expect).abs() < 1e-12);

        let mut noisy = a.clone();
        for p in noisy.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let mut mix_img = noisy.clone();
            for (m, (n, x)) in mix_img.data.iter_mut().zip(noisy.data.iter().zip(&a.data)) {
                *m = [0, 1, 2].map(|c| n[c] * (1.0 - t) + x[c] * t);
            }
            let l = loss_scene(&a, &mix_img, 0.2).unwrap();
            assert!(l < prev || (l == 0.0 && prev == 0.0), "step {step}: {l} after {prev}");
            prev = l;
        }
        assert_eq!(prev, 0.0);
        assert!(loss_scene(&a, &Image::new(10, 10), 0.2).is_err());
    }

    #[test]
    fn cor_rgb_gradient_is_sign() {
        let k = [v(1.0, 2.0), v(-3.0, 0.5)];
        let q = [v(1.5, 1.0), v(-2.0, 0.75)];
        let h = 1e-6;
        for i in 0..2 {
            for c in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[i][c] += h;
                qm[i][c] -= h;
                let fd = (loss_cor_rgb(&qp, &k).unwrap().value - loss_cor_rgb(&qm, &k).unwrap().value) / (2.0 * h);
                assert!((fd - l1_sign(q[i][c] - k[i][c])).abs() < 1e-6);
            }
        }
    }
}
