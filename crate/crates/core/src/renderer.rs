//! CPU rasterizer for Gaussian sets.
//!
//! Gaussians are projected once per view, sorted globally by camera-frame
//! depth (ties broken by index), binned into 16×16 tiles and composited
//! front to back. The same compositing weights drive the colour/depth images
//! and the point queries that blend Gaussian centres (`Ψ`) and depths (`d̂`)
//! at arbitrary sub-pixel locations.

use log::warn;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::gaussians::{build_covariance, sigmoid, GaussianSet};
use crate::geom::{project_camera_point, projection_jacobian, Intrinsics, Se3Transform, NEAR_PLANE};
use crate::image::{DepthMap, Image};

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every screen-space covariance (px²).
pub const COV_DILATION: f64 = 0.3;
/// Squared Mahalanobis radius of a splat's footprint (3 standard deviations).
pub const FOOTPRINT_MAHALANOBIS_SQ: f64 = 9.0;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Point queries whose accumulated weight is below this are empty.
pub const EMPTY_SURFACE_WEIGHT: f64 = 1e-4;

/// One projected Gaussian, plus the intermediates its adjoint needs.
#[derive(Clone, Debug)]
pub struct Splat {
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Dilated screen-space covariance.
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Camera-frame depth `d_i`.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub world_pos: Vector3<f64>,
    pub cam_pos: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jac: Matrix2x3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
}

impl Splat {
    /// Effective opacity at `p` and the Gaussian falloff, or `None` outside the footprint.
    #[inline]
    pub fn alpha_at(&self, p: &Vector2<f64>) -> Option<(f64, f64)> {
        let d = p - self.mean;
        let c = &self.conic;
        let maha = c[(0, 0)] * d.x * d.x + (c[(0, 1)] + c[(1, 0)]) * d.x * d.y + c[(1, 1)] * d.y * d.y;
        if !(maha <= FOOTPRINT_MAHALANOBIS_SQ) {
            return None;
        }
        let falloff = (-0.5 * maha).exp();
        Some((self.opacity * falloff, falloff))
    }
}

/// A view of a Gaussian set from one camera: projected, sorted and binned.
#[derive(Clone, Debug)]
pub struct Projection {
    pub pose: Se3Transform,
    pub intrinsics: Intrinsics,
    pub background: [f64; 3],
    /// Sorted front to back.
    pub splats: Vec<Splat>,
    pub gaussian_count: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, indices into `splats` in compositing order.
    pub tiles: Vec<Vec<u32>>,
}

/// One processed fragment during compositing.
#[derive(Clone, Copy, Debug)]
pub struct Fragment {
    /// Index into [`Projection::splats`].
    pub splat: usize,
    /// Position of the splat within its tile list.
    pub slot: usize,
    pub alpha: f64,
    pub falloff: f64,
    /// Transmittance before this fragment.
    pub transmittance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: DepthMap,
    pub alpha: Vec<f64>,
    /// Every Gaussian was culled; the output is pure background.
    pub all_culled: bool,
    /// Hash of the fragment lists of every pixel. Equal hashes mean the
    /// piecewise-smooth structure (footprints, order, termination) is unchanged.
    pub support_hash: u64,
}

/// Blended centre, depth and total weight at a query location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    /// `Ψ(k)`: alpha-blended world-space centres (not renormalized).
    pub point: Vector3<f64>,
    /// `d̂(k)`: alpha-blended camera-frame depths.
    pub depth: f64,
    /// Sum of blending weights.
    pub weight: f64,
    pub support_hash: u64,
}

impl SurfaceSample {
    pub fn is_empty(&self) -> bool {
        !(self.weight >= EMPTY_SURFACE_WEIGHT)
    }
}

#[inline]
fn mix_hash(h: u64, v: u64) -> u64 {
    (h ^ v.wrapping_add(0x9e3779b97f4a7c15)).wrapping_mul(0x100000001b3)
}

impl Projection {
    pub fn new(set: &GaussianSet, pose: &Se3Transform, k: &Intrinsics, background: [f64; 3]) -> Self {
        let r_w = pose.rotation_matrix();
        let mut splats: Vec<Splat> = set
            .gaussians
            .iter()
            .enumerate()
            .filter_map(|(index, g)| {
                let cam_pos = r_w * g.position + pose.translation;
                if !(cam_pos.z > NEAR_PLANE) || !cam_pos.iter().all(|v| v.is_finite()) {
                    return None;
                }
                let cov3 = build_covariance(g);
                let cov_cam = r_w * cov3 * r_w.transpose();
                let jac = projection_jacobian(&cam_pos, k);
                let mut cov = jac * cov_cam * jac.transpose();
                cov = (cov + cov.transpose()) * 0.5;
                cov[(0, 0)] += COV_DILATION;
                cov[(1, 1)] += COV_DILATION;
                let conic = cov.try_inverse()?;
                let mean = project_camera_point(&cam_pos, k);
                if !mean.iter().all(|v| v.is_finite()) || !conic.iter().all(|v| v.is_finite()) {
                    return None;
                }
                Some(Splat {
                    index,
                    mean,
                    cov,
                    conic,
                    depth: cam_pos.z,
                    opacity: sigmoid(g.opacity_logit),
                    color: g.color,
                    world_pos: g.position,
                    cam_pos,
                    cov_cam,
                    jac,
                    rotation: g.rotation.to_matrix(),
                    scale: g.scale(),
                })
            })
            .collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let tiles_x = k.width.div_ceil(TILE_SIZE);
        let tiles_y = k.height.div_ceil(TILE_SIZE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        let ts = TILE_SIZE as f64;
        for (si, s) in splats.iter().enumerate() {
            let rx = FOOTPRINT_MAHALANOBIS_SQ.sqrt() * s.cov[(0, 0)].sqrt();
            let ry = FOOTPRINT_MAHALANOBIS_SQ.sqrt() * s.cov[(1, 1)].sqrt();
            let (x0, x1) = ((s.mean.x - rx) / ts, (s.mean.x + rx) / ts);
            let (y0, y1) = ((s.mean.y - ry) / ts, (s.mean.y + ry) / ts);
            if x1 < 0.0 || y1 < 0.0 || x0 >= tiles_x as f64 || y0 >= tiles_y as f64 {
                continue;
            }
            let tx0 = x0.floor().max(0.0) as usize;
            let ty0 = y0.floor().max(0.0) as usize;
            let tx1 = (x1.floor() as usize).min(tiles_x - 1);
            let ty1 = (y1.floor() as usize).min(tiles_y - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
        Self {
            pose: *pose,
            intrinsics: *k,
            background,
            splats,
            gaussian_count: set.len(),
            tiles_x,
            tiles_y,
            tiles,
        }
    }

    /// Tile containing a continuous pixel location; `None` outside the image.
    #[inline]
    pub fn tile_of(&self, p: &Vector2<f64>) -> Option<usize> {
        let k = &self.intrinsics;
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x < k.width as f64 && p.y < k.height as f64) {
            return None;
        }
        let tx = (p.x / TILE_SIZE as f64).floor() as usize;
        let ty = (p.y / TILE_SIZE as f64).floor() as usize;
        (tx < self.tiles_x && ty < self.tiles_y).then(|| ty * self.tiles_x + tx)
    }

    /// Walks the fragments covering `p` front to back, appending them to
    /// `out`. Returns the final transmittance and a hash of the visited list.
    pub fn fragments_at(&self, p: &Vector2<f64>, out: &mut Vec<Fragment>) -> (f64, u64) {
        out.clear();
        let mut t = 1.0;
        let mut h: u64 = 0xcbf29ce484222325;
        let Some(tile) = self.tile_of(p) else {
            return (t, h);
        };
        for (slot, &si) in self.tiles[tile].iter().enumerate() {
            let s = &self.splats[si as usize];
            let Some((alpha, falloff)) = s.alpha_at(p) else {
                continue;
            };
            out.push(Fragment {
                splat: si as usize,
                slot,
                alpha,
                falloff,
                transmittance: t,
            });
            h = mix_hash(h, s.index as u64);
            t *= 1.0 - alpha;
            if t < MIN_TRANSMITTANCE {
                h = mix_hash(h, u64::MAX);
                break;
            }
        }
        (t, h)
    }

    pub fn render(&self) -> RenderOutput {
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let bg = self.background;
        let tile_results: Vec<(Vec<(usize, [f64; 3], f64, f64)>, u64)> = (0..self.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let tx = tile % self.tiles_x;
                let ty = tile / self.tiles_x;
                let mut frags = Vec::new();
                let mut px = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
                let mut tile_hash: u64 = tile as u64;
                for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                    for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                        let p = Vector2::new(x as f64, y as f64);
                        let (t, ph) = self.fragments_at(&p, &mut frags);
                        let mut c = [0.0; 3];
                        let mut d = 0.0;
                        for f in &frags {
                            let s = &self.splats[f.splat];
                            let wgt = f.alpha * f.transmittance;
                            for ch in 0..3 {
                                c[ch] += s.color[ch] * wgt;
                            }
                            d += s.depth * wgt;
                        }
                        for ch in 0..3 {
                            c[ch] += t * bg[ch];
                        }
                        tile_hash = mix_hash(tile_hash, ph);
                        px.push((y * w + x, c, d, 1.0 - t));
                    }
                }
                (px, tile_hash)
            })
            .collect();

        let mut color = Image::new(w, h);
        let mut depth = DepthMap::new(w, h);
        let mut alpha = vec![0.0; w * h];
        let mut support_hash: u64 = 0;
        for (px, th) in tile_results {
            support_hash = mix_hash(support_hash, th);
            for (i, c, d, a) in px {
                color.data[i] = c;
                depth.data[i] = d;
                alpha[i] = a;
            }
        }
        let all_culled = self.splats.is_empty() && self.gaussian_count > 0;
        if all_culled {
            warn!("every Gaussian is behind the camera; rendering background only");
        }
        RenderOutput {
            color,
            depth,
            alpha,
            all_culled,
            support_hash,
        }
    }

    pub fn sample_surface(&self, queries: &[Vector2<f64>]) -> Vec<SurfaceSample> {
        let mut frags = Vec::new();
        queries
            .iter()
            .map(|q| {
                let (_, hash) = self.fragments_at(q, &mut frags);
                let mut point = Vector3::zeros();
                let mut depth = 0.0;
                let mut weight = 0.0;
                for f in &frags {
                    let s = &self.splats[f.splat];
                    let wgt = f.alpha * f.transmittance;
                    point += s.world_pos * wgt;
                    depth += s.depth * wgt;
                    weight += wgt;
                }
                SurfaceSample {
                    point,
                    depth,
                    weight,
                    support_hash: hash,
                }
            })
            .collect()
    }

    /// `q(k) = π(W Ψ(k))`, or `None` for empty or behind-camera samples.
    pub fn screen_coord(&self, sample: &SurfaceSample) -> Option<Vector2<f64>> {
        if sample.is_empty() {
            return None;
        }
        let pc = self.pose.apply(&sample.point);
        (pc.z > NEAR_PLANE).then(|| project_camera_point(&pc, &self.intrinsics))
    }
}

/// Front-to-back blend of `(alpha, value)` layers over `background`, with the
/// same early termination as the rasterizer. Returns the blended value and the
/// accumulated opacity.
pub fn composite<const N: usize>(layers: &[(f64, [f64; N])], background: [f64; N]) -> ([f64; N], f64) {
    let mut out = [0.0; N];
    let mut t = 1.0;
    for (alpha, value) in layers {
        for c in 0..N {
            out[c] += value[c] * alpha * t;
        }
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for c in 0..N {
        out[c] += t * background[c];
    }
    (out, 1.0 - t)
}

/// Colour, depth and alpha images of `set` seen from `pose`.
pub fn render(set: &GaussianSet, pose: &Se3Transform, k: &Intrinsics, background: [f64; 3]) -> RenderOutput {
    Projection::new(set, pose, k, background).render()
}

/// Blended world-space centres `Ψ(k)` with their accumulated weights.
pub fn render_surface_points(
    set: &GaussianSet,
    pose: &Se3Transform,
    k: &Intrinsics,
    queries: &[Vector2<f64>],
) -> Vec<SurfaceSample> {
    Projection::new(set, pose, k, [0.0; 3]).sample_surface(queries)
}

/// Screen-space renders `q(k')`; `None` marks an empty surface.
pub fn render_screen_coords(
    set: &GaussianSet,
    pose: &Se3Transform,
    k: &Intrinsics,
    queries: &[Vector2<f64>],
) -> Vec<Option<Vector2<f64>>> {
    let proj = Projection::new(set, pose, k, [0.0; 3]);
    proj.sample_surface(queries)
        .iter()
        .map(|s| proj.screen_coord(s))
        .collect()
}

/// Blended depths `d̂(k')`; `None` marks an empty surface.
pub fn render_depth_at(
    set: &GaussianSet,
    pose: &Se3Transform,
    k: &Intrinsics,
    queries: &[Vector2<f64>],
) -> Vec<Option<f64>> {
    render_surface_points(set, pose, k, queries)
        .iter()
        .map(|s| (!s.is_empty()).then_some(s.depth))
        .collect()
}
