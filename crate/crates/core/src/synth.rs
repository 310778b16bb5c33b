//! Procedural ground-truth scenes, camera trajectories and rendered datasets.
//!
//! Scenes are compact clusters of Gaussians centred on the optical axis of
//! the first camera, which sits at the world origin looking down `+z`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::gaussians::{logit, Gaussian, GaussianSet};
use crate::geom::{Intrinsics, Quaternion, Se3Transform};
use crate::image::{DepthMap, Image};
use crate::renderer::{render, Projection};

/// Accumulated opacity below which a synthetic depth pixel is marked invalid.
pub const DEPTH_VALID_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub gaussians: usize,
    /// Half-width of the box holding the Gaussian centres (x and y; z is half of it).
    pub half_size: f64,
    /// Distance from the first camera to the scene centre.
    pub distance: f64,
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            gaussians: 32,
            half_size: 0.8,
            distance: 3.0,
            scale_range: (0.12, 0.3),
            opacity_range: (0.75, 0.98),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn centre(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.distance)
    }
}

fn random_rotation(rng: &mut impl Rng) -> Quaternion {
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            break v / n;
        }
    };
    Quaternion::from_rotation_vector(&(axis * rng.random_range(0.0..std::f64::consts::PI)))
}

/// Colours are kept away from 0 and 1 so pixel residuals are two-sided.
pub fn generate_scene(spec: &SceneSpec) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.centre();
    let h = spec.half_size;
    let gaussians = (0..spec.gaussians)
        .map(|_| {
            let pos = c + Vector3::new(
                rng.random_range(-h..h),
                rng.random_range(-h..h),
                rng.random_range(-0.5 * h..0.5 * h),
            );
            let scale = Vector3::new(
                rng.random_range(spec.scale_range.0..spec.scale_range.1),
                rng.random_range(spec.scale_range.0..spec.scale_range.1),
                rng.random_range(spec.scale_range.0..spec.scale_range.1),
            );
            let color = Vector3::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            );
            let opacity = rng.random_range(spec.opacity_range.0..spec.opacity_range.1);
            let rot = random_rotation(&mut rng);
            Gaussian::new(pos, scale, rot, color, opacity)
        })
        .collect();
    GaussianSet::new(gaussians)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Circle around the scene centre, always looking at it.
    Orbit,
    /// Pure sideways translation along `+x`.
    Line,
    /// Circle of twice the scene distance, looking at a point behind the scene.
    Arc,
    /// Every camera at the origin.
    Static,
}

impl FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "line" => Ok(Self::Line),
            "arc" => Ok(Self::Arc),
            "static" | "zero" => Ok(Self::Static),
            other => Err(Error::InvalidArgument(format!(
                "unknown trajectory type `{other}` (expected orbit, line, arc or static)"
            ))),
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Orbit => "orbit",
            Self::Line => "line",
            Self::Arc => "arc",
            Self::Static => "static",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub frames: usize,
    /// Camera travel per frame as a fraction of the scene extent.
    pub step: f64,
}

fn look_rotation_y(theta: f64) -> Quaternion {
    Quaternion::from_rotation_vector(&Vector3::new(0.0, theta, 0.0))
}

/// World-to-camera poses; the first is the identity.
pub fn generate_trajectory(spec: &TrajectorySpec, scene: &SceneSpec, extent: f64) -> Vec<Se3Transform> {
    let d = scene.distance;
    let travel = spec.step * extent;
    (0..spec.frames)
        .map(|i| {
            let i = i as f64;
            let (rot_c2w, centre) = match spec.kind {
                TrajectoryKind::Static => (Quaternion::IDENTITY, Vector3::zeros()),
                TrajectoryKind::Line => (Quaternion::IDENTITY, Vector3::new(i * travel, 0.0, 0.0)),
                TrajectoryKind::Orbit | TrajectoryKind::Arc => {
                    let radius = if spec.kind == TrajectoryKind::Orbit { d } else { 2.0 * d };
                    let theta = i * travel / radius;
                    let pivot = Vector3::new(0.0, 0.0, radius);
                    let c = pivot + Vector3::new(-theta.sin(), 0.0, -theta.cos()) * radius;
                    (look_rotation_y(theta), c)
                }
            };
            Se3Transform::new(rot_c2w, centre).inverse()
        })
        .collect()
}

/// Rendered depth normalized by accumulated opacity; weakly covered pixels are invalid.
pub fn surface_depth(set: &GaussianSet, pose: &Se3Transform, k: &Intrinsics) -> DepthMap {
    let out = render(set, pose, k, [0.0; 3]);
    let mut d = out.depth;
    for (v, a) in d.data.iter_mut().zip(&out.alpha) {
        *v = if *a >= DEPTH_VALID_ALPHA { *v / a } else { 0.0 };
    }
    d
}

pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = 0.94 * width as f64;
    Intrinsics {
        fx: f,
        fy: f,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
    }
}

/// A rendered synthetic dataset with exact depth and poses.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub scene: GaussianSet,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    /// World-to-camera ground-truth poses.
    pub poses: Vec<Se3Transform>,
    pub frames: Vec<Image>,
    pub depths: Vec<DepthMap>,
    pub extent: f64,
}

pub const SYNTH_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

impl SyntheticDataset {
    pub fn generate(scene_spec: &SceneSpec, traj: &TrajectorySpec, width: usize, height: usize) -> Result<Self> {
        if traj.frames == 0 {
            return Err(Error::InvalidArgument("frame count must be positive".into()));
        }
        let scene = generate_scene(scene_spec);
        let extent = scene.extent();
        let k = default_intrinsics(width, height);
        k.validate()?;
        let poses = generate_trajectory(traj, scene_spec, extent);
        let mut frames = Vec::with_capacity(poses.len());
        let mut depths = Vec::with_capacity(poses.len());
        for p in &poses {
            // 8-bit quantization matches what a reload from PNG would give
            frames.push(render(&scene, p, &k, SYNTH_BACKGROUND).color.quantized());
            depths.push(surface_depth(&scene, p, &k));
        }
        Ok(Self {
            scene,
            intrinsics: k,
            background: SYNTH_BACKGROUND,
            poses,
            frames,
            depths,
            extent,
        })
    }

    pub fn trajectory(&self) -> Trajectory {
        let idx: Vec<usize> = (0..self.poses.len()).collect();
        Trajectory::from_world_to_camera(&idx, &self.poses).expect("indices are increasing")
    }

    /// Writes `frame_NNN.png`, `depth_NNN.bin`, `intrinsics.txt`,
    /// `groundtruth.txt`, `scene.gsplat` and `background.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, (f, d)) in self.frames.iter().zip(&self.depths).enumerate() {
            f.save_png(&dir.join(format!("frame_{i:03}.png")))?;
            d.save_f32(&dir.join(format!("depth_{i:03}.bin")))?;
        }
        self.intrinsics.save(&dir.join("intrinsics.txt"))?;
        self.trajectory().save(&dir.join("groundtruth.txt"))?;
        self.scene.save(&dir.join("scene.gsplat"))?;
        let b = self.background;
        std::fs::write(dir.join("background.txt"), format!("{} {} {}\n", b[0], b[1], b[2]))?;
        Ok(())
    }
}

/// A small randomized scene, pose, target and correspondence set for
/// gradient checks: a target render from a nearby pose with altered colours,
/// and pairs with offsets of a few pixels.
#[derive(Clone, Debug)]
pub struct GradcheckFixture {
    pub set: GaussianSet,
    pub pose: Se3Transform,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    pub target: Image,
    /// `(k, k', d(k))`.
    pub pairs: Vec<(Vector2<f64>, Vector2<f64>, f64)>,
}

pub fn gradcheck_fixture(seed: u64, gaussians: usize, size: usize) -> Result<GradcheckFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let spec = SceneSpec {
        gaussians,
        half_size: 0.7,
        distance: 3.0,
        scale_range: (0.12, 0.35),
        opacity_range: (0.3, 0.9),
        seed,
    };
    let set = generate_scene(&spec);
    let k = default_intrinsics(size, size);
    let small = |rng: &mut ChaCha8Rng, s: f64| -> f64 { rng.random_range(-s..s) };
    let pose = crate::geom::se3_exp(&crate::geom::Twist::new(
        small(&mut rng, 0.03),
        small(&mut rng, 0.03),
        small(&mut rng, 0.03),
        small(&mut rng, 0.05),
        small(&mut rng, 0.05),
        small(&mut rng, 0.05),
    ))?;
    let mut tset = set.clone();
    for g in tset.gaussians.iter_mut() {
        for c in 0..3 {
            g.color[c] = (g.color[c] + rng.random_range(-0.2..0.2)).clamp(0.05, 0.95);
        }
    }
    let tpose = pose.retract(&crate::geom::Twist::new(0.01, -0.01, 0.005, 0.03, -0.02, 0.01));
    let bg = [0.3, 0.4, 0.5];
    let target = render(&tset, &tpose, &k, bg).color;

    let proj = Projection::new(&set, &pose, &k, bg);
    let mut pairs = Vec::new();
    let mut tries = 0;
    while pairs.len() < 24 && tries < 2000 {
        tries += 1;
        let kp = Vector2::new(
            rng.random_range(2.0..size as f64 - 3.0),
            rng.random_range(2.0..size as f64 - 3.0),
        );
        let s = proj.sample_surface(&[kp])[0];
        if s.weight < 0.05 {
            continue;
        }
        let kk = kp + Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let d = s.depth / s.weight * rng.random_range(0.9..1.1);
        pairs.push((kk, kp, d));
    }
    Ok(GradcheckFixture {
        set,
        pose,
        intrinsics: k,
        background: bg,
        target,
        pairs,
    })
}

/// Sets every Gaussian's opacity to `alpha`, used to build semi-transparent fixtures.
pub fn with_uniform_opacity(set: &GaussianSet, alpha: f64) -> GaussianSet {
    let l = logit(alpha);
    GaussianSet::new(
        set.gaussians
            .iter()
            .map(|g| Gaussian {
                opacity_logit: l,
                ..g.clone()
            })
            .collect(),
    )
}
