//! 2D correspondences between a target image and a render, the matchers
//! that produce them, and the refresh cache used during optimization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::warn;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::{backproject, project_point, Intrinsics, Se3Transform};
use crate::image::{DepthMap, Image};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Pixel in the target image.
    pub k: Vector2<f64>,
    /// Pixel in the rendered image.
    pub k_prime: Vector2<f64>,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    /// Iterations since the set was computed.
    pub age: usize,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs, age: 0 }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub const CSV_HEADER: &'static str = "kx,ky,kpx,kpy,conf";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                p.k.x, p.k.y, p.k_prime.x, p.k_prime.y, p.confidence
            );
        }
        s
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let l = line.trim();
            if l.is_empty() || (n == 0 && l.starts_with("kx")) {
                continue;
            }
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::parse(path, n + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let mut v = [0.0; 5];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = f[i]
                    .parse()
                    .map_err(|e| Error::parse(path, n + 1, format!("field {}: {e}", i + 1)))?;
            }
            pairs.push(Correspondence {
                k: Vector2::new(v[0], v[1]),
                k_prime: Vector2::new(v[2], v[3]),
                confidence: v[4].clamp(0.0, 1.0),
            });
        }
        Ok(Self::new(pairs))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?, path)
    }

    /// Drops pairs with either endpoint outside `[0, w-1] × [0, h-1]`.
    pub fn retain_in_bounds(&mut self, k: &Intrinsics) {
        self.pairs.retain(|p| k.contains(&p.k) && k.contains(&p.k_prime));
    }
}

/// What the caller knows about a match request. The oracle uses it to look
/// up ground truth; image-based matchers ignore it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchContext {
    /// Index of the target frame in the ground-truth sequence.
    pub target_index: usize,
    /// World-to-camera pose the render was made from.
    pub render_pose: Se3Transform,
}

pub trait Matcher: Send {
    fn name(&self) -> &str;
    fn match_images(&mut self, target: &Image, rendered: &Image, ctx: &MatchContext) -> Result<CorrespondenceSet>;
}

/// Ground truth available to the oracle matcher.
#[derive(Clone, Debug)]
pub struct SceneTruth {
    pub intrinsics: Intrinsics,
    /// World-to-camera pose of every frame.
    pub poses: Vec<Se3Transform>,
    pub depths: Vec<DepthMap>,
}

/// Samples valid pixels in the target, lifts them with the true depth and
/// pose, reprojects into `hypothesis` and adds isotropic pixel noise.
pub fn oracle_match(
    truth: &SceneTruth,
    target_index: usize,
    hypothesis: &Se3Transform,
    sample_count: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<CorrespondenceSet> {
    let k = &truth.intrinsics;
    let depth = truth
        .depths
        .get(target_index)
        .ok_or_else(|| Error::Matcher(format!("no ground-truth depth for frame {target_index}")))?;
    let target_pose = truth.poses[target_index];
    let valid: Vec<usize> = (0..depth.data.len()).filter(|&i| depth.data[i] > 0.0).collect();
    let mut pairs = Vec::with_capacity(sample_count);
    if !valid.is_empty() {
        let to_world = target_pose.inverse();
        for _ in 0..sample_count {
            let i = valid[rng.random_range(0..valid.len())];
            let (u, v) = ((i % k.width) as f64, (i / k.width) as f64);
            let noise = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * noise_sigma;
            let x_cam = backproject(u, v, depth.data[i], k)?;
            let x_world = to_world.apply(&x_cam);
            let Ok((kp, _)) = project_point(&x_world, hypothesis, k) else {
                continue;
            };
            let kp = kp + noise;
            let pair = Correspondence {
                k: Vector2::new(u, v),
                k_prime: kp,
                confidence: 1.0,
            };
            if k.contains(&pair.k_prime) {
                pairs.push(pair);
            }
        }
    }
    if pairs.is_empty() {
        warn!("oracle matcher: hypothesis view sees none of the sampled points");
    }
    Ok(CorrespondenceSet::new(pairs))
}

/// Oracle with frame-consistent errors: every request for a given target frame
/// samples the same pixels with the same noise, so repeated matching against
/// one frame behaves like a deterministic image matcher.
pub struct OracleMatcher {
    pub truth: SceneTruth,
    pub sample_count: usize,
    pub noise_sigma: f64,
    seed: u64,
}

impl OracleMatcher {
    pub fn new(truth: SceneTruth, sample_count: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            truth,
            sample_count,
            noise_sigma,
            seed,
        }
    }
}

impl Matcher for OracleMatcher {
    fn name(&self) -> &str {
        "oracle"
    }

    fn match_images(&mut self, _target: &Image, _rendered: &Image, ctx: &MatchContext) -> Result<CorrespondenceSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ctx.target_index as u64);
        oracle_match(
            &self.truth,
            ctx.target_index,
            &ctx.render_pose,
            self.sample_count,
            self.noise_sigma,
            &mut rng,
        )
    }
}

/// Minimum normalized cross-correlation for an accepted match.
pub const NCC_THRESHOLD: f64 = 0.7;
/// Patches with lower intensity variance are treated as textureless.
pub const NCC_MIN_VARIANCE: f64 = 1e-8;

struct Patch {
    values: Vec<f64>,
    norm: f64,
}

fn patch_at(gray: &[f64], w: usize, cx: usize, cy: usize, r: usize) -> Option<Patch> {
    let n = (2 * r + 1) * (2 * r + 1);
    let mut values = Vec::with_capacity(n);
    for y in cy - r..=cy + r {
        values.extend_from_slice(&gray[y * w + cx - r..=y * w + cx + r]);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut ss = 0.0;
    for v in values.iter_mut() {
        *v -= mean;
        ss += *v * *v;
    }
    if ss / (n as f64) < NCC_MIN_VARIANCE {
        return None;
    }
    Some(Patch { values, norm: ss.sqrt() })
}

/// Exhaustive NCC block matching on a regular grid of `target` pixels.
/// `patch` is the side length (odd); offsets are searched within `search_radius`.
pub fn grid_ncc_match(
    target: &Image,
    rendered: &Image,
    patch: usize,
    stride: usize,
    search_radius: usize,
) -> Result<CorrespondenceSet> {
    if !target.same_shape(rendered) {
        return Err(Error::ContractViolation("matcher images differ in size".into()));
    }
    if patch % 2 == 0 || patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch must be odd and stride positive".into()));
    }
    let (w, h) = (target.width, target.height);
    let r = patch / 2;
    let a = target.to_gray();
    let b = rendered.to_gray();
    let sr = search_radius as isize;
    let mut pairs = Vec::new();
    let mut y = r;
    while y + r < h {
        let mut x = r;
        while x + r < w {
            if let Some(pa) = patch_at(&a, w, x, y, r) {
                let score = |dx: isize, dy: isize| -> Option<f64> {
                    let (bx, by) = (x as isize + dx, y as isize + dy);
                    if bx < r as isize || by < r as isize || bx as usize + r >= w || by as usize + r >= h {
                        return None;
                    }
                    let pb = patch_at(&b, w, bx as usize, by as usize, r)?;
                    let dot: f64 = pa.values.iter().zip(&pb.values).map(|(p, q)| p * q).sum();
                    Some(dot / (pa.norm * pb.norm))
                };
                let mut best: Option<(f64, isize, isize)> = None;
                for dy in -sr..=sr {
                    for dx in -sr..=sr {
                        let Some(ncc) = score(dx, dy) else {
                            continue;
                        };
                        let better = match best {
                            None => true,
                            Some((s, bdx, bdy)) => {
                                ncc > s + 1e-12
                                    || ((ncc - s).abs() <= 1e-12 && dx * dx + dy * dy < bdx * bdx + bdy * bdy)
                            }
                        };
                        if better {
                            best = Some((ncc, dx, dy));
                        }
                    }
                }
                if let Some((ncc, dx, dy)) = best {
                    if ncc >= NCC_THRESHOLD {
                        pairs.push(Correspondence {
                            k: Vector2::new(x as f64, y as f64),
                            k_prime: Vector2::new((x as isize + dx) as f64, (y as isize + dy) as f64),
                            confidence: ncc.clamp(0.0, 1.0),
                        });
                    }
                }
            }
            x += stride;
        }
        y += stride;
    }
    Ok(CorrespondenceSet::new(pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NccMatcher {
    pub patch: usize,
    pub stride: usize,
    pub search_radius: usize,
}

impl Matcher for NccMatcher {
    fn name(&self) -> &str {
        "ncc"
    }

    fn match_images(&mut self, target: &Image, rendered: &Image, _ctx: &MatchContext) -> Result<CorrespondenceSet> {
        grid_ncc_match(target, rendered, self.patch, self.stride, self.search_radius)
    }
}

/// Runs `program target.png rendered.png out.csv` and reads back the CSV.
#[derive(Clone, Debug)]
pub struct ExternalMatcher {
    pub program: String,
    pub workdir: PathBuf,
}

impl Matcher for ExternalMatcher {
    fn name(&self) -> &str {
        "external"
    }

    fn match_images(&mut self, target: &Image, rendered: &Image, _ctx: &MatchContext) -> Result<CorrespondenceSet> {
        std::fs::create_dir_all(&self.workdir)?;
        let t = self.workdir.join("target.png");
        let r = self.workdir.join("rendered.png");
        let out = self.workdir.join("matches.csv");
        target.save_png(&t)?;
        rendered.save_png(&r)?;
        let status = Command::new(&self.program)
            .arg(&t)
            .arg(&r)
            .arg(&out)
            .status()
            .map_err(|e| Error::Matcher(format!("cannot run `{}`: {e}", self.program)))?;
        if !status.success() {
            return Err(Error::Matcher(format!("`{}` exited with {status}", self.program)));
        }
        let mut set = CorrespondenceSet::load_csv(&out)?;
        let k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: target.width,
            height: target.height,
        };
        set.retain_in_bounds(&k);
        Ok(set)
    }
}

/// Reuses a correspondence set for `interval` iterations.
#[derive(Clone, Debug)]
pub struct CorrespondenceCache {
    pub interval: usize,
    current: Option<CorrespondenceSet>,
    refreshed_at: usize,
    calls: usize,
}

impl CorrespondenceCache {
    pub fn new(interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidArgument("cache interval H must be at least 1".into()));
        }
        Ok(Self {
            interval,
            current: None,
            refreshed_at: 0,
            calls: 0,
        })
    }

    /// Number of matcher invocations so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn needs_refresh(&self, iteration: usize) -> bool {
        self.current.is_none() || iteration % self.interval == 0
    }

    /// Returns the set for `iteration`, calling the matcher on a fresh render
    /// from `render` only when a refresh is due. The flag reports a refresh.
    pub fn cached_match(
        &mut self,
        matcher: &mut dyn Matcher,
        target: &Image,
        iteration: usize,
        render: impl FnOnce() -> Result<(Image, MatchContext)>,
    ) -> Result<(&CorrespondenceSet, bool)> {
        let refresh = self.needs_refresh(iteration);
        if refresh {
            let (rendered, ctx) = render()?;
            let set = matcher.match_images(target, &rendered, &ctx)?;
            self.calls += 1;
            self.refreshed_at = iteration;
            self.current = Some(set);
        }
        let age = iteration - self.refreshed_at;
        let set = self.current.as_mut().expect("cache was just filled");
        set.age = age;
        Ok((set, refresh))
    }
}
