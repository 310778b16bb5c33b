//! The two-stage algorithm: per-frame Gaussian fitting chained with
//! frozen-scene relative pose estimation, then scene optimization with the
//! learned poses held fixed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BackwardMode, Objective, ParamGradients};
use crate::correspond::{
    CorrespondenceCache, CorrespondenceSet, ExternalMatcher, MatchContext, Matcher, NccMatcher, OracleMatcher, SceneTruth,
};
use crate::eval::Trajectory;
use crate::error::{Error, Result};
use crate::gaussians::{adjust_opacity, densify_and_prune, logit, transform_set, DensifyOptions, Gaussian, GaussianSet};
use crate::geom::{backproject, Intrinsics, Quaternion, Se3Transform, Twist};
use crate::image::{DepthMap, Image};
use crate::losses::{CorrespondenceObjective, LossBreakdown, LossPair, LossWeights, SceneObjective, Term};
use crate::renderer::Projection;

/// Opacity of a freshly initialized Gaussian.
pub const INIT_OPACITY: f64 = 0.1;
/// Accumulated opacity a pinned anchor needs to count as a surface.
pub const ANCHOR_MIN_COVERAGE: f64 = 0.5;
/// Below this many valid depth pixels initialization fails.
pub const MIN_INIT_POINTS: usize = 8;

/// Derives an independent seed for a named random stream.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    // splitmix64 finalizer
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}

/// How correspondence terms follow the surface between matcher refreshes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrespondenceMode {
    /// `Ψ(k')` is sampled when the pair is matched and then moves rigidly with the pose.
    Pinned,
    /// `Ψ(k')` and `d̂(k')` are re-rendered at the cached `k'` every step.
    Live,
}

impl FromStr for CorrespondenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pinned" => Ok(Self::Pinned),
            "live" => Ok(Self::Live),
            o => Err(Error::InvalidArgument(format!("correspondence_mode must be pinned or live, got `{o}`"))),
        }
    }
}

impl fmt::Display for CorrespondenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pinned => "pinned",
            Self::Live => "live",
        })
    }
}

/// Flat `key=value` configuration for every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub seed: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_mult_position: f64,
    pub lr_mult_color: f64,
    pub lr_mult_opacity: f64,
    pub lr_mult_scale: f64,
    pub lr_mult_rotation: f64,
    pub lr_mult_twist_rot: f64,
    pub lr_mult_twist_trans: f64,
    pub weights: LossWeights,
    pub ssim_weight: f64,
    pub cache_h: usize,
    pub iters_fit: usize,
    pub iters_pose: usize,
    pub iters_scene: usize,
    pub iters_test_pose: usize,
    pub init_stride: usize,
    pub scene_init_stride: usize,
    pub fit_positions: bool,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify: DensifyOptions,
    pub opacity_reset_interval: usize,
    pub opacity_ceiling: f64,
    pub matcher: String,
    pub oracle_samples: usize,
    pub oracle_noise: f64,
    pub ncc_patch: usize,
    pub ncc_stride: usize,
    pub ncc_radius: usize,
    pub min_pairs: usize,
    pub correspondence_mode: CorrespondenceMode,
    pub depth_noise: f64,
    pub test_every: usize,
    pub threads: usize,
    pub divergence_factor: f64,
    pub divergence_window: usize,
    pub rpe_delta: usize,
    pub rpe_aligned: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_init: 1e-5,
            lr_final: 1e-6,
            lr_mult_position: 16.0,
            lr_mult_color: 250.0,
            lr_mult_opacity: 5000.0,
            lr_mult_scale: 500.0,
            lr_mult_rotation: 100.0,
            lr_mult_twist_rot: 300.0,
            lr_mult_twist_trans: 300.0,
            weights: LossWeights::default(),
            ssim_weight: 0.2,
            cache_h: 50,
            iters_fit: 300,
            iters_pose: 300,
            iters_scene: 5000,
            iters_test_pose: 300,
            init_stride: 2,
            scene_init_stride: 2,
            fit_positions: false,
            densify_from: 500,
            densify_until: 3000,
            densify_interval: 100,
            densify: DensifyOptions::default(),
            opacity_reset_interval: 0,
            opacity_ceiling: 0.999,
            matcher: "oracle".into(),
            oracle_samples: 2000,
            oracle_noise: 1.0,
            ncc_patch: 7,
            ncc_stride: 4,
            ncc_radius: 6,
            min_pairs: 8,
            correspondence_mode: CorrespondenceMode::Pinned,
            depth_noise: 0.0,
            test_every: 8,
            threads: 0,
            divergence_factor: 10.0,
            divergence_window: 100,
            rpe_delta: 1,
            rpe_aligned: true,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::InvalidArgument(format!("bad value `{v}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl OptimizerConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "lr_init" => self.lr_init = parse_num(key, v)?,
            "lr_final" => self.lr_final = parse_num(key, v)?,
            "lr_mult_position" => self.lr_mult_position = parse_num(key, v)?,
            "lr_mult_color" => self.lr_mult_color = parse_num(key, v)?,
            "lr_mult_opacity" => self.lr_mult_opacity = parse_num(key, v)?,
            "lr_mult_scale" => self.lr_mult_scale = parse_num(key, v)?,
            "lr_mult_rotation" => self.lr_mult_rotation = parse_num(key, v)?,
            "lr_mult_twist_rot" => self.lr_mult_twist_rot = parse_num(key, v)?,
            "lr_mult_twist_trans" => self.lr_mult_twist_trans = parse_num(key, v)?,
            "lambda1" => self.weights.lambda1 = parse_num(key, v)?,
            "lambda2" => self.weights.lambda2 = parse_num(key, v)?,
            "lambda3" => self.weights.lambda3 = parse_num(key, v)?,
            "ssim_weight" => self.ssim_weight = parse_num(key, v)?,
            "cache_H" | "cache_h" => self.cache_h = parse_num(key, v)?,
            "iters_fit" => self.iters_fit = parse_num(key, v)?,
            "iters_pose" => self.iters_pose = parse_num(key, v)?,
            "iters_scene" => self.iters_scene = parse_num(key, v)?,
            "iters_test_pose" => self.iters_test_pose = parse_num(key, v)?,
            "init_stride" => self.init_stride = parse_num(key, v)?,
            "scene_init_stride" => self.scene_init_stride = parse_num(key, v)?,
            "fit_positions" => self.fit_positions = parse_bool(key, v)?,
            "densify_from" => self.densify_from = parse_num(key, v)?,
            "densify_until" => self.densify_until = parse_num(key, v)?,
            "densify_interval" => self.densify_interval = parse_num(key, v)?,
            "densify_grad_threshold" => self.densify.grad_threshold = parse_num(key, v)?,
            "densify_min_opacity" => self.densify.min_opacity = parse_num(key, v)?,
            "densify_split_scale" => self.densify.split_scale = parse_num(key, v)?,
            "densify_max_gaussians" => self.densify.max_gaussians = parse_num(key, v)?,
            "opacity_reset_interval" => self.opacity_reset_interval = parse_num(key, v)?,
            "opacity_ceiling" => self.opacity_ceiling = parse_num(key, v)?,
            "matcher" => self.matcher = v.to_string(),
            "oracle_samples" => self.oracle_samples = parse_num(key, v)?,
            "oracle_noise" => self.oracle_noise = parse_num(key, v)?,
            "ncc_patch" => self.ncc_patch = parse_num(key, v)?,
            "ncc_stride" => self.ncc_stride = parse_num(key, v)?,
            "ncc_radius" => self.ncc_radius = parse_num(key, v)?,
            "min_pairs" => self.min_pairs = parse_num(key, v)?,
            "correspondence_mode" => self.correspondence_mode = v.parse()?,
            "depth_noise" => self.depth_noise = parse_num(key, v)?,
            "test_every" => self.test_every = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "divergence_factor" => self.divergence_factor = parse_num(key, v)?,
            "divergence_window" => self.divergence_window = parse_num(key, v)?,
            "rpe_delta" => self.rpe_delta = parse_num(key, v)?,
            "rpe_aligned" => self.rpe_aligned = parse_bool(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(path, n + 1, "expected `key=value`"));
            };
            cfg.set(k, v).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Every key with its current value, one per line in a fixed order.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            m.insert(k, v);
        };
        put("seed", self.seed.to_string());
        put("lr_init", self.lr_init.to_string());
        put("lr_final", self.lr_final.to_string());
        put("lr_mult_position", self.lr_mult_position.to_string());
        put("lr_mult_color", self.lr_mult_color.to_string());
        put("lr_mult_opacity", self.lr_mult_opacity.to_string());
        put("lr_mult_scale", self.lr_mult_scale.to_string());
        put("lr_mult_rotation", self.lr_mult_rotation.to_string());
        put("lr_mult_twist_rot", self.lr_mult_twist_rot.to_string());
        put("lr_mult_twist_trans", self.lr_mult_twist_trans.to_string());
        put("lambda1", self.weights.lambda1.to_string());
        put("lambda2", self.weights.lambda2.to_string());
        put("lambda3", self.weights.lambda3.to_string());
        put("ssim_weight", self.ssim_weight.to_string());
        put("cache_H", self.cache_h.to_string());
        put("iters_fit", self.iters_fit.to_string());
        put("iters_pose", self.iters_pose.to_string());
        put("iters_scene", self.iters_scene.to_string());
        put("iters_test_pose", self.iters_test_pose.to_string());
        put("init_stride", self.init_stride.to_string());
        put("scene_init_stride", self.scene_init_stride.to_string());
        put("fit_positions", self.fit_positions.to_string());
        put("densify_from", self.densify_from.to_string());
        put("densify_until", self.densify_until.to_string());
        put("densify_interval", self.densify_interval.to_string());
        put("densify_grad_threshold", self.densify.grad_threshold.to_string());
        put("densify_min_opacity", self.densify.min_opacity.to_string());
        put("densify_split_scale", self.densify.split_scale.to_string());
        put("densify_max_gaussians", self.densify.max_gaussians.to_string());
        put("opacity_reset_interval", self.opacity_reset_interval.to_string());
        put("opacity_ceiling", self.opacity_ceiling.to_string());
        put("matcher", self.matcher.clone());
        put("oracle_samples", self.oracle_samples.to_string());
        put("oracle_noise", self.oracle_noise.to_string());
        put("ncc_patch", self.ncc_patch.to_string());
        put("ncc_stride", self.ncc_stride.to_string());
        put("ncc_radius", self.ncc_radius.to_string());
        put("min_pairs", self.min_pairs.to_string());
        put("correspondence_mode", self.correspondence_mode.to_string());
        put("depth_noise", self.depth_noise.to_string());
        put("test_every", self.test_every.to_string());
        put("threads", self.threads.to_string());
        put("divergence_factor", self.divergence_factor.to_string());
        put("divergence_window", self.divergence_window.to_string());
        put("rpe_delta", self.rpe_delta.to_string());
        put("rpe_aligned", self.rpe_aligned.to_string());
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("lr_init", self.lr_init),
            ("lr_final", self.lr_final),
            ("lr_mult_position", self.lr_mult_position),
            ("lr_mult_color", self.lr_mult_color),
            ("lr_mult_opacity", self.lr_mult_opacity),
            ("lr_mult_scale", self.lr_mult_scale),
            ("lr_mult_rotation", self.lr_mult_rotation),
            ("lr_mult_twist_rot", self.lr_mult_twist_rot),
            ("lr_mult_twist_trans", self.lr_mult_twist_trans),
            ("divergence_factor", self.divergence_factor),
            ("opacity_ceiling", self.opacity_ceiling),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{k} must be positive, got {v}")));
            }
        }
        if self.lr_final > self.lr_init {
            return Err(Error::InvalidArgument("learning-rate schedule must be non-increasing".into()));
        }
        if self.cache_h == 0 || self.init_stride == 0 || self.scene_init_stride == 0 {
            return Err(Error::InvalidArgument("cache_H and strides must be at least 1".into()));
        }
        if self.test_every == 1 {
            return Err(Error::InvalidArgument("test_every=1 would leave no training frames".into()));
        }
        if !(self.ssim_weight >= 0.0) || !(self.oracle_noise >= 0.0) || !(self.depth_noise >= 0.0) {
            return Err(Error::InvalidArgument("weights and noise levels must be >= 0".into()));
        }
        if self.rpe_delta == 0 {
            return Err(Error::InvalidArgument("rpe_delta must be at least 1".into()));
        }
        Ok(())
    }

    /// Base learning rate at `iter` of `total`, decaying exponentially from
    /// `lr_init` to `lr_final`.
    pub fn base_lr(&self, iter: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr_init;
        }
        let s = (iter as f64 / (total - 1) as f64).min(1.0);
        (self.lr_init.ln() * (1.0 - s) + self.lr_final.ln() * s).exp()
    }
}

/// Adam over a flat parameter vector with per-entry learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Returns the update to subtract from the parameters.
    pub fn step(&mut self, grad: &[f64], lr: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1 = 1.0 - self.beta1.powi(self.t);
        let b2 = 1.0 - self.beta2.powi(self.t);
        (0..grad.len())
            .map(|i| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = self.m[i] / b1;
                let vh = self.v[i] / b2;
                lr[i] * mh / (vh.sqrt() + self.eps)
            })
            .collect()
    }
}

/// Scalars per Gaussian in the packed optimizer layout:
/// position 3, log-scale 3, rotation tangent 3, colour 3, opacity logit 1.
const GAUSSIAN_DOF: usize = 13;

fn pack_gradients(g: &ParamGradients) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len() * GAUSSIAN_DOF);
    for i in 0..g.len() {
        out.extend(g.position[i].iter());
        out.extend(g.log_scale[i].iter());
        out.extend(g.rotation[i].iter());
        out.extend(g.color[i].iter());
        out.push(g.opacity_logit[i]);
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct GaussianRates {
    position: f64,
    scale: f64,
    rotation: f64,
    color: f64,
    opacity: f64,
}

fn gaussian_rates(cfg: &OptimizerConfig, base: f64, extent: f64, positions: bool) -> GaussianRates {
    GaussianRates {
        position: if positions { base * cfg.lr_mult_position * extent } else { 0.0 },
        scale: base * cfg.lr_mult_scale,
        rotation: base * cfg.lr_mult_rotation,
        color: base * cfg.lr_mult_color,
        opacity: base * cfg.lr_mult_opacity,
    }
}

fn apply_gaussian_step(set: &mut GaussianSet, adam: &mut Adam, grads: &ParamGradients, rates: GaussianRates) {
    let n = set.len();
    let mut lr = Vec::with_capacity(n * GAUSSIAN_DOF);
    for _ in 0..n {
        lr.extend([rates.position; 3]);
        lr.extend([rates.scale; 3]);
        lr.extend([rates.rotation; 3]);
        lr.extend([rates.color; 3]);
        lr.push(rates.opacity);
    }
    let delta = adam.step(&pack_gradients(grads), &lr);
    for (i, g) in set.gaussians.iter_mut().enumerate() {
        let d = &delta[i * GAUSSIAN_DOF..(i + 1) * GAUSSIAN_DOF];
        g.position -= Vector3::new(d[0], d[1], d[2]);
        g.log_scale -= Vector3::new(d[3], d[4], d[5]);
        let rv = -Vector3::new(d[6], d[7], d[8]);
        if rv != Vector3::zeros() {
            g.rotation = g.rotation.mul(&Quaternion::from_rotation_vector(&rv)).normalized();
        }
        for c in 0..3 {
            g.color[c] = (g.color[c] - d[9 + c]).clamp(0.0, 1.0);
        }
        g.opacity_logit -= d[12];
    }
}

/// An ordered image sequence with shared intrinsics and optional depth and poses.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub intrinsics: Intrinsics,
    /// Dataset index of each frame, used to address ground truth.
    pub indices: Vec<usize>,
    pub depths: Option<Vec<DepthMap>>,
    /// Ground-truth world-to-camera poses.
    pub gt_poses: Option<Vec<Se3Transform>>,
    pub background: [f64; 3],
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, intrinsics: Intrinsics, background: [f64; 3]) -> Result<Self> {
        let n = frames.len();
        let s = Self {
            frames,
            intrinsics,
            indices: (0..n).collect(),
            depths: None,
            gt_poses: None,
            background,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("frame sequence is empty".into()));
        }
        if self.frames.iter().any(|f| f.width != k.width || f.height != k.height) {
            return Err(Error::InvalidArgument(format!(
                "every frame must be {}x{} to match the intrinsics",
                k.width, k.height
            )));
        }
        if self.indices.len() != self.frames.len() {
            return Err(Error::ContractViolation("index list does not match frames".into()));
        }
        if let Some(d) = &self.depths {
            if d.len() != self.frames.len() || d.iter().any(|m| m.width != k.width || m.height != k.height) {
                return Err(Error::InvalidArgument("depth maps do not match the frames".into()));
            }
        }
        if let Some(p) = &self.gt_poses {
            if p.len() != self.frames.len() {
                return Err(Error::InvalidArgument("ground-truth pose count does not match frames".into()));
            }
        }
        Ok(())
    }

    /// The frames at `positions`, keeping their dataset indices.
    pub fn subset(&self, positions: &[usize]) -> FrameSequence {
        FrameSequence {
            frames: positions.iter().map(|&i| self.frames[i].clone()).collect(),
            intrinsics: self.intrinsics,
            indices: positions.iter().map(|&i| self.indices[i]).collect(),
            depths: self.depths.as_ref().map(|d| positions.iter().map(|&i| d[i].clone()).collect()),
            gt_poses: self.gt_poses.as_ref().map(|p| positions.iter().map(|&i| p[i]).collect()),
            background: self.background,
        }
    }

    /// Multiplies every valid depth by `1 + σ·n`, `n ~ N(0, 1)` per pixel.
    pub fn add_depth_noise(&mut self, sigma: f64, rng: &mut impl Rng) {
        if sigma == 0.0 {
            return;
        }
        if let Some(depths) = &mut self.depths {
            for d in depths.iter_mut() {
                for v in d.data.iter_mut() {
                    if *v > 0.0 {
                        let n: f64 = rng.sample(StandardNormal);
                        *v *= (1.0 + sigma * n).max(0.05);
                    }
                }
            }
        }
    }

    pub fn depth(&self, i: usize) -> Option<&DepthMap> {
        self.depths.as_ref().map(|d| &d[i])
    }
}

/// Depth at the nearest pixel to `p`, if valid.
pub fn depth_at(d: &DepthMap, p: &Vector2<f64>) -> Option<f64> {
    let x = p.x.round();
    let y = p.y.round();
    if x < 0.0 || y < 0.0 || x >= d.width as f64 || y >= d.height as f64 {
        return None;
    }
    let v = d.get(x as usize, y as usize);
    (v > 0.0).then_some(v)
}

/// Train/test split holding out every `test_every`-th frame (the last of each block).
pub fn split_indices(n: usize, test_every: usize) -> (Vec<usize>, Vec<usize>) {
    if test_every == 0 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % test_every != test_every - 1)
}

/// One Gaussian per sampled pixel with valid depth, at identity pose.
pub fn init_from_depth(image: &Image, depth: &DepthMap, k: &Intrinsics, stride: usize) -> Result<GaussianSet> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if image.width != k.width || image.height != k.height || depth.width != k.width || depth.height != k.height {
        return Err(Error::InvalidArgument("image, depth and intrinsics sizes differ".into()));
    }
    let gw = k.width.div_ceil(stride);
    let gh = k.height.div_ceil(stride);
    let mut grid: Vec<Option<usize>> = vec![None; gw * gh];
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let (u, v) = (gx * stride, gy * stride);
            let d = depth.get(u, v);
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            grid[gy * gw + gx] = Some(points.len());
            points.push(backproject(u as f64, v as f64, d, k)?);
            colors.push(image.get(u, v));
        }
    }
    if points.len() < MIN_INIT_POINTS {
        return Err(Error::InitFailure(format!(
            "only {} valid depth pixels at stride {stride}; need at least {MIN_INIT_POINTS}",
            points.len()
        )));
    }
    // Nearest neighbours are searched among samples within a few grid cells.
    const WINDOW: isize = 3;
    let opacity_logit = logit(INIT_OPACITY);
    let mut gaussians = Vec::with_capacity(points.len());
    for gy in 0..gh as isize {
        for gx in 0..gw as isize {
            let Some(i) = grid[gy as usize * gw + gx as usize] else {
                continue;
            };
            let mut best = [f64::INFINITY; 3];
            for dy in -WINDOW..=WINDOW {
                for dx in -WINDOW..=WINDOW {
                    let (nx, ny) = (gx + dx, gy + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= gw as isize || ny >= gh as isize {
                        continue;
                    }
                    if let Some(j) = grid[ny as usize * gw + nx as usize] {
                        let d = (points[i] - points[j]).norm();
                        if d < best[2] {
                            best[2] = d;
                            best.sort_by(|a, b| a.total_cmp(b));
                        }
                    }
                }
            }
            let found: Vec<f64> = best.iter().copied().filter(|d| d.is_finite()).collect();
            let scale = if found.is_empty() {
                points[i].z * stride as f64 / k.fx
            } else {
                found.iter().sum::<f64>() / found.len() as f64
            }
            .max(1e-7);
            let c = colors[i];
            gaussians.push(Gaussian {
                position: points[i],
                log_scale: Vector3::repeat(scale.ln()),
                rotation: Quaternion::IDENTITY,
                color: Vector3::new(c[0], c[1], c[2]),
                sh: [0.0; crate::gaussians::SH_COEFFS],
                opacity_logit,
            });
        }
    }
    Ok(GaussianSet::new(gaussians))
}

/// Per-iteration loss records, grouped by optimization session.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub sessions: Vec<(String, Vec<(usize, LossBreakdown)>)>,
}

impl TrainingLog {
    pub fn begin(&mut self, name: impl Into<String>) {
        self.sessions.push((name.into(), Vec::new()));
    }

    pub fn record(&mut self, iter: usize, b: LossBreakdown) {
        if self.sessions.is_empty() {
            self.begin("default");
        }
        self.sessions.last_mut().unwrap().1.push((iter, b));
    }

    pub fn session_csv(rows: &[(usize, LossBreakdown)]) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for (i, b) in rows {
            s.push_str(&b.csv_row(*i));
            s.push('\n');
        }
        s
    }
}

/// A frame to explain: its image, optional reference depth and dataset index.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub image: &'a Image,
    pub depth: Option<&'a DepthMap>,
    pub index: usize,
}

/// Shared machinery for every stage: the matcher and the training log.
pub struct Session<'a> {
    pub cfg: &'a OptimizerConfig,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub matcher: &'a mut dyn Matcher,
    pub log: &'a mut TrainingLog,
    /// Matcher invocations over the session.
    pub matcher_calls: usize,
}

impl<'a> Session<'a> {
    pub fn new(
        cfg: &'a OptimizerConfig,
        intrinsics: Intrinsics,
        background: [f64; 3],
        matcher: &'a mut dyn Matcher,
        log: &'a mut TrainingLog,
    ) -> Self {
        Self {
            cfg,
            intrinsics,
            background,
            matcher,
            log,
            matcher_calls: 0,
        }
    }

    fn check_image(&self, image: &Image) -> Result<Intrinsics> {
        let k = self.intrinsics;
        if image.width != k.width || image.height != k.height {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{} but intrinsics are {}x{}",
                image.width, image.height, k.width, k.height
            )));
        }
        Ok(k)
    }

    fn uses_correspondences(&self) -> bool {
        self.cfg.weights.lambda1 != 0.0 || self.cfg.weights.lambda3 != 0.0
    }
}

fn build_pairs(
    set: &CorrespondenceSet,
    proj: &Projection,
    depth: Option<&DepthMap>,
    mode: CorrespondenceMode,
) -> Vec<LossPair> {
    let anchors = match mode {
        CorrespondenceMode::Pinned => {
            let qs: Vec<Vector2<f64>> = set.pairs.iter().map(|p| p.k_prime).collect();
            Some(proj.sample_surface(&qs))
        }
        CorrespondenceMode::Live => None,
    };
    let to_world = proj.pose.inverse();
    let mut out = Vec::with_capacity(set.len());
    for (i, p) in set.pairs.iter().enumerate() {
        let anchor = match &anchors {
            Some(a) if a[i].weight < ANCHOR_MIN_COVERAGE => continue,
            // On the ray through k' at the coverage-normalized depth, so the
            // anchor reprojects exactly onto k' from the render pose.
            Some(a) => match backproject(p.k_prime.x, p.k_prime.y, a[i].depth / a[i].weight, &proj.intrinsics) {
                Ok(x) => Some(to_world.apply(&x)),
                Err(_) => continue,
            },
            None => None,
        };
        out.push(LossPair {
            k: p.k,
            k_prime: p.k_prime,
            ref_depth: depth.and_then(|d| depth_at(d, &p.k)),
            anchor,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseResult {
    pub pose: Se3Transform,
    pub diverged: bool,
    pub initial: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub iterations: usize,
    /// Iterations that dropped the correspondence terms for lack of pairs.
    pub fallbacks: usize,
}

/// Frozen-scene pose optimization: finds the world-to-camera pose `P` from
/// which `set` best explains `target`. `base` maps the matcher's world into
/// the frame `set` lives in, so the oracle sees the render pose `P ∘ base`.
pub fn optimize_pose(
    set: &GaussianSet,
    target: Target<'_>,
    init: Se3Transform,
    base: &Se3Transform,
    iters: usize,
    session: &mut Session<'_>,
) -> Result<PoseResult> {
    let cfg = session.cfg;
    let k = session.check_image(target.image)?;
    let bg = session.background;
    let extent = set.extent().max(1e-9);
    let mut cache = CorrespondenceCache::new(cfg.cache_h)?;
    let mut pairs: Vec<LossPair> = Vec::new();
    let centroid = set.iter().map(|g| g.position).sum::<Vector3<f64>>() / set.len().max(1) as f64;
    let mut adam = Adam::new(6);
    adam.eps = 1e-12;
    let mut pose = init;
    let mut result = PoseResult {
        pose: init,
        diverged: false,
        initial: None,
        last: None,
        iterations: 0,
        fallbacks: 0,
    };
    let mut over = 0usize;
    for it in 0..iters {
        if session.uses_correspondences() && cache.needs_refresh(it) {
            let proj = Projection::new(set, &pose, &k, bg);
            let ctx = MatchContext {
                target_index: target.index,
                render_pose: pose.compose(base),
            };
            let (cset, _) = cache.cached_match(session.matcher, target.image, it, || Ok((proj.render().color, ctx)))?;
            pairs = build_pairs(cset, &proj, target.depth, cfg.correspondence_mode);
            session.matcher_calls += 1;
        }
        let obj = CorrespondenceObjective {
            target: target.image.clone(),
            intrinsics: k,
            background: bg,
            pairs: pairs.clone(),
            weights: cfg.weights,
            mode: BackwardMode::FROZEN,
            min_pairs: cfg.min_pairs,
        };
        let ev = obj.evaluate_full(set, &pose)?;
        let b = ev.breakdown;
        if !b.total.is_finite() || !ev.eval.grads.twist.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                stage: "pose",
                iteration: it,
            });
        }
        if ev.fell_back && session.uses_correspondences() {
            result.fallbacks += 1;
            debug!("pose iteration {it}: only {} usable pairs, pixel loss only", b.m_used);
        }
        session.log.record(it, b);
        let initial = *result.initial.get_or_insert(b);
        if b.total > cfg.divergence_factor * initial.total && initial.total > 0.0 {
            over += 1;
            if over >= cfg.divergence_window {
                warn!("pose optimization diverged at iteration {it}; returning the initial pose");
                result.diverged = true;
                result.pose = init;
                result.iterations = it + 1;
                result.last = Some(b);
                return Ok(result);
            }
        } else {
            over = 0;
        }
        let base_lr = cfg.base_lr(it, iters);
        let lr_r = base_lr * cfg.lr_mult_twist_rot;
        let lr_t = base_lr * cfg.lr_mult_twist_trans * extent;
        // Adam runs on a twist about the scene centroid, where orbiting the
        // scene is a pure rotation instead of a coupled rotation and translation.
        let c = pose.apply(&centroid);
        let g = ev.eval.grads.twist;
        let (g_w, g_v) = (g.fixed_rows::<3>(0).into_owned(), g.fixed_rows::<3>(3).into_owned());
        let g_pivot = g_w - c.cross(&g_v);
        let gp = [g_pivot.x, g_pivot.y, g_pivot.z, g_v.x, g_v.y, g_v.z];
        let d = adam.step(&gp, &[lr_r, lr_r, lr_r, lr_t, lr_t, lr_t]);
        let w = -Vector3::new(d[0], d[1], d[2]);
        let v = -Vector3::new(d[3], d[4], d[5]) + c.cross(&w);
        pose = pose.retract(&Twist::new(w.x, w.y, w.z, v.x, v.y, v.z));
        result.last = Some(b);
        result.iterations = it + 1;
    }
    result.pose = pose;
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub set: GaussianSet,
    pub initial: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
}

/// Minimizes the correspondence loss of `set` rendered at identity against
/// `target`, over colour, rotation, scale and opacity (and positions if
/// configured). `world` is the render pose in the matcher's world.
pub fn fit_frame_gaussians(
    init: GaussianSet,
    target: Target<'_>,
    world: &Se3Transform,
    session: &mut Session<'_>,
) -> Result<FitResult> {
    let cfg = session.cfg;
    let k = session.check_image(target.image)?;
    let iters = cfg.iters_fit;
    let mut set = init;
    let extent = set.extent().max(1e-9);
    let mut adam = Adam::new(set.len() * GAUSSIAN_DOF);
    let mut cache = CorrespondenceCache::new(cfg.cache_h)?;
    let mut pairs: Vec<LossPair> = Vec::new();
    let identity = Se3Transform::identity();
    let bg = session.background;
    let mut out = FitResult {
        set: GaussianSet::default(),
        initial: None,
        last: None,
    };
    for it in 0..iters {
        if session.uses_correspondences() && cache.needs_refresh(it) {
            let proj = Projection::new(&set, &identity, &k, bg);
            let ctx = MatchContext {
                target_index: target.index,
                render_pose: *world,
            };
            let (cset, _) = cache.cached_match(session.matcher, target.image, it, || Ok((proj.render().color, ctx)))?;
            pairs = build_pairs(cset, &proj, target.depth, CorrespondenceMode::Live);
            session.matcher_calls += 1;
        }
        let obj = CorrespondenceObjective {
            target: target.image.clone(),
            intrinsics: k,
            background: bg,
            pairs: pairs.clone(),
            weights: cfg.weights,
            mode: BackwardMode::SCENE,
            min_pairs: cfg.min_pairs,
        };
        let ev = obj.evaluate_full(&set, &identity)?;
        let b = ev.breakdown;
        if !b.total.is_finite() || !ev.eval.grads.is_finite() {
            return Err(Error::NonFinite {
                stage: "fit",
                iteration: it,
            });
        }
        session.log.record(it, b);
        out.initial.get_or_insert(b);
        out.last = Some(b);
        let rates = gaussian_rates(cfg, cfg.base_lr(it, iters), extent, cfg.fit_positions);
        apply_gaussian_step(&mut set, &mut adam, &ev.eval.grads, rates);
    }
    out.set = set;
    Ok(out)
}

/// Relative transforms `T_t` and the absolute poses `W_{t+1} = T_t ∘ W_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseChain {
    pub relative: Vec<Se3Transform>,
    pub absolute: Vec<Se3Transform>,
    /// Per relative pose: the estimate diverged and was reset.
    pub failed: Vec<bool>,
}

impl PoseChain {
    pub fn from_relative(relative: Vec<Se3Transform>, failed: Vec<bool>) -> Self {
        let mut absolute = vec![Se3Transform::identity()];
        for t in &relative {
            let next = t.compose(absolute.last().unwrap());
            absolute.push(next);
        }
        Self {
            relative,
            absolute,
            failed,
        }
    }

    /// Largest matrix deviation between stored absolutes and a recomposition.
    pub fn consistency_error(&self) -> f64 {
        let re = Self::from_relative(self.relative.clone(), self.failed.clone());
        re.absolute
            .iter()
            .zip(&self.absolute)
            .map(|(a, b)| (a.to_matrix() - b.to_matrix()).amax())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSummary {
    pub index: usize,
    pub gaussians: usize,
    pub checksum: u64,
    pub fit_loss: Option<f64>,
    pub pose_loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct PoseStageResult {
    pub chain: PoseChain,
    pub frames: Vec<FrameSummary>,
    pub matcher_calls: usize,
}

/// Fits each frame's Gaussians and chains frozen-scene relative poses.
pub fn run_pose_stage(seq: &FrameSequence, session: &mut Session<'_>) -> Result<PoseStageResult> {
    seq.validate()?;
    if seq.len() < 2 {
        return Err(Error::InvalidArgument("the pose stage needs at least 2 frames".into()));
    }
    let depths = seq
        .depths
        .as_ref()
        .ok_or_else(|| Error::InitFailure("the pose stage needs a depth map for the first frame".into()))?;
    if session.intrinsics != seq.intrinsics {
        return Err(Error::ContractViolation("session intrinsics differ from the sequence".into()));
    }
    let cfg = session.cfg;
    let mut set = init_from_depth(&seq.frames[0], &depths[0], &seq.intrinsics, cfg.init_stride)?;
    let mut world = Se3Transform::identity();
    let mut relative = Vec::new();
    let mut failed = Vec::new();
    let mut frames = Vec::new();
    let calls_before = session.matcher_calls;
    for t in 0..seq.len() - 1 {
        let target = Target {
            image: &seq.frames[t],
            depth: seq.depth(t),
            index: seq.indices[t],
        };
        session.log.begin(format!("fit_{:03}", seq.indices[t]));
        let fit = fit_frame_gaussians(set, target, &world, session)?;
        let fitted = fit.set;
        let checksum = fitted.checksum();

        let next = Target {
            image: &seq.frames[t + 1],
            depth: seq.depth(t + 1),
            index: seq.indices[t + 1],
        };
        session.log.begin(format!("pose_{:03}", seq.indices[t + 1]));
        let est = optimize_pose(&fitted, next, Se3Transform::identity(), &world, cfg.iters_pose, session)?;
        debug_assert_eq!(fitted.checksum(), checksum);
        info!(
            "frame {} -> {}: relative pose {} ({} iterations{})",
            seq.indices[t],
            seq.indices[t + 1],
            est.pose,
            est.iterations,
            if est.diverged { ", diverged" } else { "" }
        );
        frames.push(FrameSummary {
            index: seq.indices[t],
            gaussians: fitted.len(),
            checksum,
            fit_loss: fit.last.map(|b| b.total),
            pose_loss: est.last.map(|b| b.total),
            diverged: est.diverged,
        });
        world = est.pose.compose(&world);
        relative.push(est.pose);
        failed.push(est.diverged);
        set = transform_set(&fitted, &est.pose);
    }
    Ok(PoseStageResult {
        chain: PoseChain::from_relative(relative, failed),
        frames,
        matcher_calls: session.matcher_calls - calls_before,
    })
}

/// Photometric optimization of a fresh set initialized from the first
/// frame's depth, with `poses` (world-to-camera, one per frame) held fixed.
pub fn run_scene_stage(seq: &FrameSequence, poses: &[Se3Transform], cfg: &OptimizerConfig, log: &mut TrainingLog) -> Result<GaussianSet> {
    seq.validate()?;
    if poses.len() != seq.len() {
        return Err(Error::ContractViolation(format!(
            "{} poses for {} frames",
            poses.len(),
            seq.len()
        )));
    }
    let depths = seq
        .depths
        .as_ref()
        .ok_or_else(|| Error::InitFailure("the scene stage needs a depth map for the first frame".into()))?;
    let k = seq.intrinsics;
    let mut set = init_from_depth(&seq.frames[0], &depths[0], &k, cfg.scene_init_stride)?;
    let world0 = poses[0].inverse();
    if poses[0] != Se3Transform::identity() {
        set = transform_set(&set, &world0);
    }
    let extent = set.extent().max(1e-9);
    let mut adam = Adam::new(set.len() * GAUSSIAN_DOF);
    let mut sampling = substream(cfg.seed, "sampling");
    let mut densify_rng = substream(cfg.seed, "init");
    let mut grad_sum = vec![0.0; set.len()];
    let mut grad_count = vec![0usize; set.len()];
    // screen gradients are in pixels; thresholds follow the normalized-device convention
    let ndc_scale = k.width.max(k.height) as f64 / 2.0;
    log.begin("scene");
    let iters = cfg.iters_scene;
    for it in 0..iters {
        let f = sampling.random_range(0..seq.len());
        let obj = SceneObjective {
            target: seq.frames[f].clone(),
            intrinsics: k,
            background: seq.background,
            ssim_weight: cfg.ssim_weight,
            mode: BackwardMode::SCENE,
        };
        let ev = obj.evaluate(&set, &poses[f])?;
        if !ev.loss.is_finite() || !ev.grads.is_finite() {
            return Err(Error::NonFinite {
                stage: "scene",
                iteration: it,
            });
        }
        log.record(
            it,
            LossBreakdown {
                cor_rgb: Term::INACTIVE,
                pix_rgb: ev.loss,
                cor_depth: Term::INACTIVE,
                total: ev.loss,
                m_used: 0,
            },
        );
        for (i, g) in ev.grads.screen_mean.iter().enumerate() {
            if *g > 0.0 {
                grad_sum[i] += g * ndc_scale;
                grad_count[i] += 1;
            }
        }
        let rates = gaussian_rates(cfg, cfg.base_lr(it, iters), extent, true);
        apply_gaussian_step(&mut set, &mut adam, &ev.grads, rates);

        let step = it + 1;
        if cfg.densify_interval > 0 && step >= cfg.densify_from && step < cfg.densify_until && step % cfg.densify_interval == 0 {
            let stats: Vec<f64> = grad_sum
                .iter()
                .zip(&grad_count)
                .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
                .collect();
            let (next, report) = densify_and_prune(&set, &stats, &cfg.densify, &mut densify_rng)?;
            debug!("densify at {step}: {report:?}, {} Gaussians", next.len());
            set = next;
            adam = Adam::new(set.len() * GAUSSIAN_DOF);
            grad_sum = vec![0.0; set.len()];
            grad_count = vec![0; set.len()];
        }
        if cfg.opacity_reset_interval > 0 && step % cfg.opacity_reset_interval == 0 && step < cfg.densify_until {
            set = adjust_opacity(&set, cfg.opacity_ceiling, true);
        }
    }
    if cfg.opacity_ceiling < 1.0 {
        set = adjust_opacity(&set, cfg.opacity_ceiling, false);
    }
    Ok(set)
}

/// Pose of a held-out view against the trained scene, starting from `init`.
pub fn estimate_test_pose(
    scene: &GaussianSet,
    target: Target<'_>,
    init: Se3Transform,
    session: &mut Session<'_>,
) -> Result<PoseResult> {
    let iters = session.cfg.iters_test_pose;
    session.log.begin(format!("test_pose_{:03}", target.index));
    optimize_pose(scene, target, init, &Se3Transform::identity(), iters, session)
}

/// Sizes the global worker pool; `0` keeps the default (one per core).
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("cannot size worker pool: {e}")))
}

/// Stand-in matcher for runs whose correspondence weights are zero.
pub struct NoMatcher;

impl Matcher for NoMatcher {
    fn name(&self) -> &str {
        "none"
    }

    fn match_images(&mut self, _target: &Image, _rendered: &Image, _ctx: &MatchContext) -> Result<CorrespondenceSet> {
        Err(Error::Matcher("no matcher is configured for this run".into()))
    }
}

/// Builds the configured matcher: `oracle`, `ncc` or `external:<program>`.
/// The oracle needs ground truth for every frame of `seq`, whose poses are
/// re-expressed relative to the frame at position `origin`.
/// Runs without correspondence terms get a [`NoMatcher`].
pub fn build_matcher(cfg: &OptimizerConfig, seq: &FrameSequence, origin: usize, workdir: &Path) -> Result<Box<dyn Matcher>> {
    if cfg.weights.lambda1 == 0.0 && cfg.weights.lambda3 == 0.0 {
        return Ok(Box::new(NoMatcher));
    }
    match cfg.matcher.as_str() {
        "oracle" => {
            let (Some(poses), Some(depths)) = (&seq.gt_poses, &seq.depths) else {
                return Err(Error::InvalidArgument(
                    "the oracle matcher needs ground-truth poses and depth maps".into(),
                ));
            };
            let n = seq.indices.iter().max().map_or(0, |m| m + 1);
            let base = poses[origin].inverse();
            let k = seq.intrinsics;
            let mut truth = SceneTruth {
                intrinsics: k,
                poses: vec![Se3Transform::identity(); n],
                depths: vec![DepthMap::new(k.width, k.height); n],
            };
            for (pos, &idx) in seq.indices.iter().enumerate() {
                truth.poses[idx] = poses[pos].compose(&base);
                truth.depths[idx] = depths[pos].clone();
            }
            Ok(Box::new(OracleMatcher::new(
                truth,
                cfg.oracle_samples,
                cfg.oracle_noise,
                substream_seed(cfg.seed, "noise"),
            )))
        }
        "ncc" => Ok(Box::new(NccMatcher {
            patch: cfg.ncc_patch,
            stride: cfg.ncc_stride,
            search_radius: cfg.ncc_radius,
        })),
        m => match m.strip_prefix("external:") {
            Some(program) if !program.is_empty() => Ok(Box::new(ExternalMatcher {
                program: program.to_string(),
                workdir: workdir.to_path_buf(),
            })),
            _ => Err(Error::InvalidArgument(format!(
                "unknown matcher `{m}` (expected oracle, ncc or external:<program>)"
            ))),
        },
    }
}

/// Training frames with depth noise applied, and the held-out positions.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_seq: FrameSequence,
}

pub fn prepare_split(seq: &FrameSequence, cfg: &OptimizerConfig) -> Result<Split> {
    let (train, test) = split_indices(seq.len(), cfg.test_every);
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} frames leave {} for training; need at least 2",
            seq.len(),
            train.len()
        )));
    }
    let mut train_seq = seq.subset(&train);
    train_seq.add_depth_noise(cfg.depth_noise, &mut substream(cfg.seed, "noise/depth"));
    Ok(Split { train, test, train_seq })
}

#[derive(Clone, Debug)]
pub struct TestView {
    /// Position in the full sequence.
    pub position: usize,
    pub index: usize,
    pub pose: PoseResult,
    /// Quantized render at the estimated pose; `None` when estimation diverged.
    pub render: Option<Image>,
}

/// Estimates each held-out pose from the nearest training pose and renders it.
pub fn estimate_test_views(
    scene: &GaussianSet,
    seq: &FrameSequence,
    split: &Split,
    train_poses: &[Se3Transform],
    session: &mut Session<'_>,
) -> Result<Vec<TestView>> {
    let mut out = Vec::with_capacity(split.test.len());
    for &pos in &split.test {
        let nearest = (0..split.train.len())
            .min_by_key(|&j| (split.train[j] as isize - pos as isize).unsigned_abs())
            .ok_or_else(|| Error::ContractViolation("no training poses".into()))?;
        let target = Target {
            image: &seq.frames[pos],
            depth: seq.depth(pos),
            index: seq.indices[pos],
        };
        let pose = estimate_test_pose(scene, target, train_poses[nearest], session)?;
        let render = (!pose.diverged).then(|| {
            crate::renderer::render(scene, &pose.pose, &seq.intrinsics, seq.background)
                .color
                .quantized()
        });
        out.push(TestView {
            position: pos,
            index: seq.indices[pos],
            pose,
            render,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub split: Split,
    pub pose_stage: PoseStageResult,
    /// World-to-camera pose per training frame.
    pub train_poses: Vec<Se3Transform>,
    pub scene: GaussianSet,
    pub test_views: Vec<TestView>,
    pub log: TrainingLog,
    pub metrics: Option<crate::eval::MetricsReport>,
}

impl RunOutput {
    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::from_world_to_camera(&self.split.train_seq.indices, &self.train_poses)
    }

    pub fn test_trajectory(&self) -> Result<Trajectory> {
        let idx: Vec<usize> = self.test_views.iter().map(|v| v.index).collect();
        let poses: Vec<Se3Transform> = self.test_views.iter().map(|v| v.pose.pose).collect();
        Trajectory::from_world_to_camera(&idx, &poses)
    }
}

/// Pose stage, scene stage and held-out evaluation in one call.
pub fn run_full(seq: &FrameSequence, cfg: &OptimizerConfig, matcher: &mut dyn Matcher) -> Result<RunOutput> {
    cfg.validate()?;
    seq.validate()?;
    let split = prepare_split(seq, cfg)?;
    let mut log = TrainingLog::default();
    let (pose_stage, test_views, scene, train_poses) = {
        let mut session = Session::new(cfg, seq.intrinsics, seq.background, matcher, &mut log);
        let pose_stage = run_pose_stage(&split.train_seq, &mut session)?;
        let train_poses = pose_stage.chain.absolute.clone();
        let mut scene_log = TrainingLog::default();
        let scene = run_scene_stage(&split.train_seq, &train_poses, cfg, &mut scene_log)?;
        let test_views = estimate_test_views(&scene, seq, &split, &train_poses, &mut session)?;
        session.log.sessions.extend(scene_log.sessions);
        (pose_stage, test_views, scene, train_poses)
    };
    let mut out = RunOutput {
        split,
        pose_stage,
        train_poses,
        scene,
        test_views,
        log,
        metrics: None,
    };
    if let Some(gt) = &seq.gt_poses {
        let gt = Trajectory::from_world_to_camera(&seq.indices, gt)?;
        let views: Vec<(usize, Image, Image)> = out
            .test_views
            .iter()
            .filter_map(|v| v.render.clone().map(|r| (v.index, r, seq.frames[v.position].clone())))
            .collect();
        out.metrics = Some(crate::eval::evaluate(&out.trajectory()?, &gt, &views, cfg.rpe_delta, cfg.rpe_aligned)?);
    }
    Ok(out)
}
