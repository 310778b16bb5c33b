//! Image-quality and trajectory metrics.
//!
//! Trajectories hold camera-to-world poses, so a pose's translation is the
//! camera centre. Pipeline poses (world-to-camera) are converted with
//! [`Trajectory::from_world_to_camera`].

use std::fmt::{self, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{Quaternion, Se3Transform};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_SENTINEL: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ContractViolation(format!(
            "image size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.data.len()) as f64)
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_SENTINEL`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_SENTINEL))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering with the SSIM window.
struct WindowFilter {
    kernel: [f64; SSIM_WINDOW],
    w: usize,
    h: usize,
}

impl WindowFilter {
    fn new(w: usize, h: usize) -> Self {
        Self {
            kernel: gaussian_kernel(),
            w,
            h,
        }
    }

    fn out_dims(&self) -> (usize, usize) {
        (self.w + 1 - SSIM_WINDOW, self.h + 1 - SSIM_WINDOW)
    }

    fn apply(&self, img: &[f64]) -> Vec<f64> {
        let (ow, oh) = self.out_dims();
        let mut rows = vec![0.0; ow * self.h];
        for y in 0..self.h {
            for x in 0..ow {
                let base = y * self.w + x;
                rows[y * ow + x] = (0..SSIM_WINDOW).map(|t| self.kernel[t] * img[base + t]).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW)
                    .map(|t| self.kernel[t] * rows[(y + t) * ow + x])
                    .sum();
            }
        }
        out
    }

    /// Transpose of [`Self::apply`].
    fn adjoint(&self, grad_out: &[f64]) -> Vec<f64> {
        let (ow, oh) = self.out_dims();
        let mut rows = vec![0.0; ow * self.h];
        for y in 0..oh {
            for x in 0..ow {
                let g = grad_out[y * ow + x];
                for t in 0..SSIM_WINDOW {
                    rows[(y + t) * ow + x] += self.kernel[t] * g;
                }
            }
        }
        let mut out = vec![0.0; self.w * self.h];
        for y in 0..self.h {
            for x in 0..ow {
                let g = rows[y * ow + x];
                for t in 0..SSIM_WINDOW {
                    out[y * self.w + x + t] += self.kernel[t] * g;
                }
            }
        }
        out
    }
}

/// Mean SSIM of two single-channel images and, optionally, its gradient
/// with respect to `a`.
pub fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let f = WindowFilter::new(w, h);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = f.apply(a);
    let mu_b = f.apply(b);
    let p_aa = f.apply(&sq(a, a));
    let p_bb = f.apply(&sq(b, b));
    let p_ab = f.apply(&sq(a, b));
    let n = mu_a.len();
    let inv_n = 1.0 / n as f64;

    let mut total = 0.0;
    let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = p_aa[i] - ma * ma;
        let var_b = p_bb[i] - mb * mb;
        let cov = p_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let denom = b1 * b2;
            g_mu[i] = inv_n * ((2.0 * mb * a2 - 2.0 * mb * a1) / denom - s * (2.0 * ma / b1 - 2.0 * ma / b2));
            g_aa[i] = -inv_n * s / b2;
            g_ab[i] = inv_n * 2.0 * a1 / denom;
        }
    }
    let value = total * inv_n;
    if !want_grad {
        return (value, None);
    }
    let d_mu = f.adjoint(&g_mu);
    let d_aa = f.adjoint(&g_aa);
    let d_ab = f.adjoint(&g_ab);
    let grad = (0..w * h)
        .map(|i| d_mu[i] + 2.0 * a[i] * d_aa[i] + b[i] * d_ab[i])
        .collect();
    (value, Some(grad))
}

fn check_ssim_size(a: &Image) -> Result<()> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ContractViolation(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Windowed SSIM (11×11 Gaussian, σ = 1.5) averaged over windows and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    check_ssim_size(a)?;
    let mut s = 0.0;
    for c in 0..3 {
        s += ssim_channel(&a.channel(c), &b.channel(c), a.width, a.height, false).0 / 3.0;
    }
    Ok(s)
}

/// SSIM of a grayscale pair stored as flat buffers.
pub fn ssim_gray(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::ContractViolation("grayscale buffer size mismatch".into()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ContractViolation("image too small for SSIM".into()));
    }
    Ok(ssim_channel(a, b, w, h, false).0)
}

/// SSIM and its per-pixel gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<[f64; 3]>)> {
    check_same(a, b)?;
    check_ssim_size(a)?;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; a.data.len()];
    for c in 0..3 {
        let (v, g) = ssim_channel(&a.channel(c), &b.channel(c), a.width, a.height, true);
        value += v / 3.0;
        for (dst, src) in grad.iter_mut().zip(g.unwrap()) {
            dst[c] = src / 3.0;
        }
    }
    Ok((value, grad))
}

/// A timestamped sequence of camera-to-world poses.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub poses: Vec<(usize, Se3Transform)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(usize, Se3Transform)>) -> Result<Self> {
        if poses.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { poses })
    }

    /// Builds a trajectory from world-to-camera poses indexed `0..n` or by `indices`.
    pub fn from_world_to_camera(indices: &[usize], poses: &[Se3Transform]) -> Result<Self> {
        Self::new(indices.iter().copied().zip(poses.iter().map(|p| p.inverse())).collect())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|(_, p)| p.translation).collect()
    }

    /// Left-applies a similarity to every pose.
    pub fn transformed(&self, s: &SimilarityTransform) -> Trajectory {
        let r = s.rotation.to_matrix();
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|(i, p)| {
                    (
                        *i,
                        Se3Transform::new(
                            s.rotation.mul(&p.rotation),
                            r * p.translation * s.scale + s.translation,
                        ),
                    )
                })
                .collect(),
        }
    }

    /// One line per pose: `index tx ty tz qx qy qz qw`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in &self.poses {
            let t = &p.translation;
            let q = &p.rotation;
            let _ = writeln!(
                s,
                "{i} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                t.x, t.y, t.z, q.x, q.y, q.z, q.w
            );
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let l = line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 8 {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected 8 fields `index tx ty tz qx qy qz qw`, got {}", f.len()),
                ));
            }
            let index: usize = f[0]
                .parse()
                .map_err(|e| Error::parse(path, line_no, format!("bad index: {e}")))?;
            let mut v = [0.0; 7];
            for (j, slot) in v.iter_mut().enumerate() {
                *slot = f[j + 1]
                    .parse()
                    .map_err(|e| Error::parse(path, line_no, format!("field {}: {e}", j + 2)))?;
            }
            let q = Quaternion::new(v[6], v[3], v[4], v[5]);
            if !(q.norm() > 1e-9) {
                return Err(Error::parse(path, line_no, "zero quaternion"));
            }
            if let Some((prev, _)) = poses.last() {
                if index <= *prev {
                    return Err(Error::parse(path, line_no, "timestamps must be strictly increasing"));
                }
            }
            poses.push((index, Se3Transform::new(q, Vector3::new(v[0], v[1], v[2]))));
        }
        Ok(Self { poses })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.to_matrix() * p * self.scale + self.translation
    }
}

fn check_lengths(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::ContractViolation(format!(
            "trajectory lengths differ: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Closed-form similarity minimizing `Σ |s R p_est + t − p_gt|²`.
pub fn umeyama_points(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<SimilarityTransform> {
    let n = est.len();
    if n != gt.len() {
        return Err(Error::ContractViolation("point set sizes differ".into()));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 poses, got {n}")));
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if !(var_e > 1e-24) || !(sv[1].1 > 1e-9 * sv[0].1.max(1e-300)) {
        return Err(Error::Degenerate(
            "positions are coincident or collinear; similarity is not unique".into(),
        ));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis with the smallest singular value
        let k = sv[2].0;
        s[(k, k)] = -1.0;
    }
    let r = u * s * v_t;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * s).trace() / var_e;
    let t = mu_g - r * mu_e * scale;
    Ok(SimilarityTransform {
        scale,
        rotation: Quaternion::from_matrix(&r),
        translation: t,
    })
}

pub fn umeyama_align(est: &Trajectory, gt: &Trajectory) -> Result<SimilarityTransform> {
    check_lengths(est, gt)?;
    umeyama_points(&est.positions(), &gt.positions())
}

fn rmse_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    if est.is_empty() {
        return 0.0;
    }
    let s: f64 = est.iter().zip(gt).map(|(e, g)| (e - g).norm_squared()).sum();
    (s / est.len() as f64).sqrt()
}

/// RMSE of camera positions, optionally after Umeyama alignment of `est` onto `gt`.
pub fn ate(est: &Trajectory, gt: &Trajectory, align: bool) -> Result<f64> {
    check_lengths(est, gt)?;
    let e = est.positions();
    let g = gt.positions();
    if !align {
        return Ok(rmse_positions(&e, &g));
    }
    let sim = umeyama_points(&e, &g)?;
    let aligned: Vec<_> = e.iter().map(|p| sim.apply(p)).collect();
    Ok(rmse_positions(&aligned, &g))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpeResult {
    /// 100 × RMSE of relative translation errors.
    pub translation: f64,
    /// RMSE of relative rotation errors, degrees.
    pub rotation_deg: f64,
}

pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<RpeResult> {
    check_lengths(est, gt)?;
    if delta == 0 || est.len() <= delta {
        return Err(Error::ContractViolation(format!(
            "RPE needs more than {delta} poses (got {})",
            est.len()
        )));
    }
    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    let m = est.len() - delta;
    for i in 0..m {
        let (g0, g1) = (&gt.poses[i].1, &gt.poses[i + delta].1);
        let (e0, e1) = (&est.poses[i].1, &est.poses[i + delta].1);
        let rel_gt = g0.inverse().compose(g1);
        let rel_est = e0.inverse().compose(e1);
        let err = rel_gt.inverse().compose(&rel_est);
        sum_t += err.translation.norm_squared();
        sum_r += err.rotation.angle().powi(2);
    }
    Ok(RpeResult {
        translation: 100.0 * (sum_t / m as f64).sqrt(),
        rotation_deg: (sum_r / m as f64).sqrt().to_degrees(),
    })
}

impl Trajectory {
    /// The poses whose indices appear in `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Trajectory> {
        let poses = indices
            .iter()
            .map(|i| {
                self.poses
                    .iter()
                    .find(|(j, _)| j == i)
                    .copied()
                    .ok_or_else(|| Error::ContractViolation(format!("trajectory has no pose for index {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(poses)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.poses.iter().map(|(i, _)| *i).collect()
    }
}

/// How the estimated trajectory was registered to ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alignment {
    Umeyama(SimilarityTransform),
    /// Positions were too degenerate for a similarity; only centroids were matched.
    Centroid(SimilarityTransform),
}

impl Alignment {
    pub fn transform(&self) -> &SimilarityTransform {
        match self {
            Self::Umeyama(s) | Self::Centroid(s) => s,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Umeyama(_) => "umeyama",
            Self::Centroid(_) => "centroid",
        }
    }
}

/// Umeyama alignment, falling back to a pure centroid shift when the
/// positions are collinear or too few.
pub fn align_trajectories(est: &Trajectory, gt: &Trajectory) -> Result<Alignment> {
    check_lengths(est, gt)?;
    match umeyama_align(est, gt) {
        Ok(s) => Ok(Alignment::Umeyama(s)),
        Err(Error::Degenerate(_)) => {
            let n = est.len().max(1) as f64;
            let ce = est.positions().iter().sum::<Vector3<f64>>() / n;
            let cg = gt.positions().iter().sum::<Vector3<f64>>() / n;
            Ok(Alignment::Centroid(SimilarityTransform {
                scale: 1.0,
                rotation: Quaternion::IDENTITY,
                translation: cg - ce,
            }))
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    pub ate: f64,
    pub ate_unaligned: f64,
    pub rpe: RpeResult,
    pub alignment: Alignment,
}

/// ATE after alignment, unaligned ATE, and RPE on the aligned (or raw) estimate.
pub fn trajectory_metrics(est: &Trajectory, gt: &Trajectory, delta: usize, rpe_aligned: bool) -> Result<TrajectoryMetrics> {
    let alignment = align_trajectories(est, gt)?;
    let aligned = est.transformed(alignment.transform());
    let g = gt.positions();
    Ok(TrajectoryMetrics {
        ate: rmse_positions(&aligned.positions(), &g),
        ate_unaligned: rmse_positions(&est.positions(), &g),
        rpe: rpe(if rpe_aligned { &aligned } else { est }, gt, delta)?,
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricValue {
    Number(f64),
    Text(String),
    NotAvailable,
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Number(v) => write!(f, "{v}"),
            Self::Text(t) => f.write_str(t),
            Self::NotAvailable => f.write_str("n/a"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub frame: Option<usize>,
    pub value: MetricValue,
}

/// Metric rows emitted as CSV (`metric,frame,value`) and as an aligned table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "metric,frame,value";

    pub fn push(&mut self, metric: &str, frame: Option<usize>, value: MetricValue) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            frame,
            value,
        });
    }

    pub fn number(&self, metric: &str, frame: Option<usize>) -> Option<f64> {
        self.rows.iter().find_map(|r| match r.value {
            MetricValue::Number(v) if r.metric == metric && r.frame == frame => Some(v),
            _ => None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let frame = r.frame.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.metric, frame, r.value);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| {
                let value = match &r.value {
                    MetricValue::Number(v) => format!("{v:.6}"),
                    other => other.to_string(),
                };
                [r.metric.clone(), r.frame.map(|f| f.to_string()).unwrap_or_else(|| "-".into()), value]
            })
            .collect();
        let head = ["metric".to_string(), "frame".to_string(), "value".to_string()];
        let mut width = [0usize; 3];
        for row in cells.iter().chain(std::iter::once(&head)) {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        for row in std::iter::once(&head).chain(cells.iter()) {
            let _ = writeln!(s, "{:<w0$}  {:>w1$}  {:>w2$}", row[0], row[1], row[2], w0 = width[0], w1 = width[1], w2 = width[2]);
        }
        s
    }

    /// Trajectory rows over the training poses.
    pub fn add_trajectory(&mut self, m: &TrajectoryMetrics) {
        self.push("ate", None, MetricValue::Number(m.ate));
        self.push("ate_unaligned", None, MetricValue::Number(m.ate_unaligned));
        self.push("rpe_t", None, MetricValue::Number(m.rpe.translation));
        self.push("rpe_r_deg", None, MetricValue::Number(m.rpe.rotation_deg));
        self.push("alignment", None, MetricValue::Text(m.alignment.name().into()));
        self.push("alignment_scale", None, MetricValue::Number(m.alignment.transform().scale));
    }

    /// PSNR, SSIM and LPIPS (not computed) for one held-out view, plus means
    /// once every view has been added via [`MetricsReport::add_view_means`].
    pub fn add_view(&mut self, frame: usize, render: &Image, gt: &Image) -> Result<()> {
        self.push("psnr", Some(frame), MetricValue::Number(psnr(render, gt)?));
        self.push("ssim", Some(frame), MetricValue::Number(ssim(render, gt)?));
        self.push("lpips", Some(frame), MetricValue::NotAvailable);
        Ok(())
    }

    pub fn add_view_means(&mut self) {
        for m in ["psnr", "ssim"] {
            let v: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.metric == m && r.frame.is_some())
                .filter_map(|r| match r.value {
                    MetricValue::Number(x) => Some(x),
                    _ => None,
                })
                .collect();
            let value = if v.is_empty() {
                MetricValue::NotAvailable
            } else {
                MetricValue::Number(v.iter().sum::<f64>() / v.len() as f64)
            };
            self.push(&format!("mean_{m}"), None, value);
        }
        self.push("mean_lpips", None, MetricValue::NotAvailable);
    }
}

/// Standalone evaluation: trajectory metrics over `est`'s indices and image
/// metrics over `(frame, render, ground truth)` triples. Ground truth is
/// re-expressed relative to its pose at `est`'s first index, the frame the
/// estimate is anchored to.
pub fn evaluate(
    est: &Trajectory,
    gt: &Trajectory,
    views: &[(usize, Image, Image)],
    rpe_delta: usize,
    rpe_aligned: bool,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let mut gt_sel = gt.select(&est.indices())?;
    if let Some(&(_, first)) = gt_sel.poses.first() {
        let inv = first.inverse();
        for (_, p) in gt_sel.poses.iter_mut() {
            *p = inv.compose(p);
        }
    }
    report.add_trajectory(&trajectory_metrics(est, &gt_sel, rpe_delta, rpe_aligned)?);
    for (f, r, g) in views {
        report.add_view(*f, r, g)?;
    }
    report.add_view_means();
    Ok(report)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{se3_exp, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for p in img.data.iter_mut() {
            *p = [rng.random(), rng.random(), rng.random()];
        }
        img
    }

    /// Smooth mid-contrast pattern in [0.25, 0.75].
    fn pattern(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.25 * ((x as f64 * 0.4).sin() * (y as f64 * 0.3).cos());
                img.set(x, y, [v, 1.0 - v, 0.5 + 0.2 * (x as f64 * 0.2).cos()]);
            }
        }
        img
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(16, 16, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_SENTINEL);
        let b = Image::filled(16, 16, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&b, &a).unwrap(), psnr(&a, &b).unwrap());
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_errors() {
        let a = fixture(1, 32, 24);
        let b = fixture(2, 32, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ssim(&Image::new(10, 20), &Image::new(10, 20)).is_err());
    }

    #[test]
    fn ssim_of_negative_is_low() {
        let a = pattern(48, 48);
        let mut neg = a.clone();
        for p in neg.data.iter_mut() {
            *p = p.map(|c| 1.0 - c);
        }
        assert!(ssim(&a, &neg).unwrap() < 0.1);
    }

    #[test]
    fn ssim_of_independent_noise_is_near_zero() {
        for seed in 0..10 {
            let a = fixture(100 + seed, 48, 48);
            let b = fixture(200 + seed, 48, 48);
            assert!(ssim(&a, &b).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = fixture(3, 14, 13);
        let b = fixture(4, 14, 13);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 50, 91, 181] {
            for c in 0..3 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap.data[idx][c] += h;
                am.data[idx][c] -= h;
                let fd = (ssim(&ap, &b).unwrap() - ssim(&am, &b).unwrap()) / (2.0 * h);
                assert!((fd - g[idx][c]).abs() < 1e-7, "{idx}/{c}: {fd} vs {}", g[idx][c]);
            }
        }
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let t = Twist::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    );
                    (i, se3_exp(&t).unwrap())
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn umeyama_identity_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_traj(&mut rng, 6);
        let s = umeyama_align(&gt, &gt).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-9);
        assert!(s.rotation.angle() < 1e-9);
        assert!(s.translation.norm() < 1e-9);

        let off = Vector3::new(1.0, 2.0, 3.0);
        let shifted = Trajectory::new(
            gt.poses.iter().map(|(i, p)| (*i, Se3Transform::new(p.rotation, p.translation + off))).collect(),
        )
        .unwrap();
        let s = umeyama_align(&shifted, &gt).unwrap();
        assert!((s.translation + off).norm() < 1e-9);
        assert!(ate(&shifted, &gt, true).unwrap() < 1e-9);
        assert!((ate(&shifted, &gt, false).unwrap() - off.norm()).abs() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_constructed_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_traj(&mut rng, 8);
        // est = 2 · R_y(30°) · gt, so the alignment must be scale 0.5 and R_y(−30°)
        let ry = Quaternion::from_rotation_vector(&Vector3::new(0.0, 30f64.to_radians(), 0.0));
        let fwd = SimilarityTransform {
            scale: 2.0,
            rotation: ry,
            translation: Vector3::zeros(),
        };
        let est = gt.transformed(&fwd);
        let s = umeyama_align(&est, &gt).unwrap();
        assert!((s.scale - 0.5).abs() < 1e-9);
        let expect = ry.conjugate().to_matrix();
        assert!((s.rotation.to_matrix() - expect).amax() < 1e-9);
        assert!(ate(&est, &gt, true).unwrap() < 1e-9);
    }

    #[test]
    fn umeyama_handles_reflection_and_degeneracy() {
        let gt: Vec<_> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            .iter()
            .map(|v| Vector3::from(*v))
            .collect();
        let mirrored: Vec<_> = gt.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let s = umeyama_points(&mirrored, &gt).unwrap();
        assert!((s.rotation.to_matrix().determinant() - 1.0).abs() < 1e-9);

        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(umeyama_points(&line, &line), Err(Error::Degenerate(_))));
        assert!(matches!(umeyama_points(&gt[..2], &gt[..2]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn alignment_never_increases_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_traj(&mut rng, 7);
            let b = random_traj(&mut rng, 7);
            assert!(ate(&a, &b, true).unwrap() <= ate(&a, &b, false).unwrap() + 1e-12);
        }
    }

    #[test]
    fn rpe_constructed_fixtures() {
        let n = 10;
        let gt = Trajectory::new((0..n).map(|i| (i, Se3Transform::identity())).collect()).unwrap();
        assert_eq!(rpe(&gt, &gt, 1).unwrap(), RpeResult { translation: 0.0, rotation_deg: 0.0 });

        let rot = Trajectory::new(
            (0..n)
                .map(|i| {
                    let q = Quaternion::from_rotation_vector(&(Vector3::new(0.3, 0.5, 0.8).normalize() * (i as f64).to_radians()));
                    (i, Se3Transform::new(q, Vector3::zeros()))
                })
                .collect(),
        )
        .unwrap();
        let r = rpe(&rot, &gt, 1).unwrap();
        assert!((r.rotation_deg - 1.0).abs() < 1e-6 && r.translation < 1e-9);

        let lin = Trajectory::new(
            (0..n)
                .map(|i| (i, Se3Transform::from_translation(Vector3::new(0.01 * i as f64, 0.0, 0.0))))
                .collect(),
        )
        .unwrap();
        let r = rpe(&lin, &gt, 1).unwrap();
        assert!((r.translation - 1.0).abs() < 1e-6 && r.rotation_deg < 1e-9);
        assert!(rpe(&lin, &gt, 10).is_err());
    }

    #[test]
    fn rpe_invariant_to_global_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_traj(&mut rng, 6);
        let b = random_traj(&mut rng, 6);
        let g = SimilarityTransform {
            scale: 1.0,
            rotation: Quaternion::from_rotation_vector(&Vector3::new(0.2, -1.0, 0.4)),
            translation: Vector3::new(3.0, -1.0, 2.0),
        };
        let r0 = rpe(&a, &b, 1).unwrap();
        let r1 = rpe(&a.transformed(&g), &b.transformed(&g), 1).unwrap();
        assert!((r0.translation - r1.translation).abs() < 1e-9);
        assert!((r0.rotation_deg - r1.rotation_deg).abs() < 1e-9);
    }

    #[test]
    fn trajectory_text_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_traj(&mut rng, 4);
        let p = Path::new("traj.txt");
        let back = Trajectory::parse(&t.to_text(), p).unwrap();
        for ((i, a), (j, b)) in t.poses.iter().zip(&back.poses) {
            assert_eq!(i, j);
            assert!((a.to_matrix() - b.to_matrix()).amax() < 1e-12);
        }
        let mut text = t.to_text();
        text.push_str("7 1 2 3\n");
        match Trajectory::parse(&text, p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(Trajectory::parse("1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n", p).is_err());
    }
}
