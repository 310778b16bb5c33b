//! Floating-point image buffers and their on-disk formats.
//!
//! Colour images round-trip through 8-bit PNG. Depth maps are stored as
//! 16-bit PNG with a scale factor in a sidecar text file (`<name>.scale`),
//! or as raw little-endian `f32` with a small header.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Channel mean, used by the correlation matcher.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    /// Single channel as a flat buffer.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Quantizes to 8 bits per channel, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0))
                .collect(),
        }
    }
}

/// Row-major depth map; zero marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

const DEPTH_MAGIC: &[u8; 8] = b"SPDEPTH1";

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    fn scale_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".scale");
        PathBuf::from(s)
    }

    /// Writes a 16-bit PNG plus `<path>.scale` holding the metres-per-unit factor.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let max = self.data.iter().cloned().fold(0.0f64, f64::max);
        let scale = if max > 0.0 { max / 65535.0 } else { 1.0 };
        let buf =
            ImageBuffer::<Luma<u16>, _>::from_fn(self.width as u32, self.height as u32, |x, y| {
                let d = self.get(x as usize, y as usize);
                Luma([(d / scale).round().clamp(0.0, 65535.0) as u16])
            });
        buf.save(path)?;
        std::fs::write(Self::scale_path(path), format!("{scale:e}\n"))?;
        Ok(())
    }

    pub fn load_png16(path: &Path) -> Result<Self> {
        let scale_path = Self::scale_path(path);
        let text = std::fs::read_to_string(&scale_path)?;
        let scale: f64 = text
            .trim()
            .parse()
            .map_err(|e| Error::parse(&scale_path, 1, format!("bad depth scale: {e}")))?;
        let img = image::open(path)?.to_luma16();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.pixels().map(|p| p.0[0] as f64 * scale).collect(),
        })
    }

    /// Raw format: magic, `u32` width, `u32` height, then `f32` values (little-endian).
    pub fn save_f32(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for d in &self.data {
            out.extend_from_slice(&(*d as f32).to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load_f32(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
            return Err(Error::parse(path, 1, "missing depth magic tag"));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 4 * w * h {
            return Err(Error::parse(path, 1, "depth payload size mismatch"));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// Loads either format, dispatching on the extension.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Self::load_png16(path),
            _ => Self::load_f32(path),
        }
    }
}
