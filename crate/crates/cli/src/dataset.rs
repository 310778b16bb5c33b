//! Dataset discovery and loading.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use splatpose::eval::Trajectory;
use splatpose::geom::{Intrinsics, Se3Transform};
use splatpose::image::{DepthMap, Image};
use splatpose::pipeline::FrameSequence;

pub const DEFAULT_FRAME_PATTERN: &str = "frame_*.png";

/// Where a dataset's files live. Frames are ordered lexicographically and
/// indexed by that order.
#[derive(Clone, Debug)]
pub struct DatasetDescriptor {
    pub root: PathBuf,
    pub frame_pattern: String,
    pub intrinsics: PathBuf,
    pub depth_dir: Option<PathBuf>,
    pub groundtruth: Option<PathBuf>,
    pub background: Option<PathBuf>,
    /// Every `test_every`-th frame is held out; 0 keeps all frames for training.
    pub test_every: usize,
}

impl DatasetDescriptor {
    /// Conventional layout under `root`; optional files are used when present.
    pub fn discover(root: &Path, test_every: usize) -> Self {
        let opt = |name: &str| {
            let p = root.join(name);
            p.exists().then_some(p)
        };
        Self {
            root: root.to_path_buf(),
            frame_pattern: DEFAULT_FRAME_PATTERN.into(),
            intrinsics: root.join("intrinsics.txt"),
            depth_dir: Some(root.to_path_buf()),
            groundtruth: opt("groundtruth.txt"),
            background: opt("background.txt"),
            test_every,
        }
    }

    pub fn frame_paths(&self) -> Result<Vec<PathBuf>> {
        list_matching(&self.root, &self.frame_pattern)
    }

    /// Every file the run reads, for content hashing.
    pub fn input_files(&self) -> Result<Vec<PathBuf>> {
        let frames = self.frame_paths()?;
        let mut files = vec![self.intrinsics.clone()];
        for f in &frames {
            if let Some(d) = self.depth_for(f) {
                files.push(d);
            }
        }
        files.extend(frames);
        files.extend(self.groundtruth.clone());
        files.extend(self.background.clone());
        files.sort();
        Ok(files)
    }

    /// Depth file for a frame: `depth_<digits>.{bin,png}` or `<stem>.{bin,png}`.
    pub fn depth_for(&self, frame: &Path) -> Option<PathBuf> {
        let dir = self.depth_dir.as_ref()?;
        let stem = frame.file_stem()?.to_str()?;
        let digits: String = {
            let rev: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
            rev.chars().rev().collect()
        };
        let mut candidates = Vec::new();
        if !digits.is_empty() {
            candidates.push(format!("depth_{digits}.bin"));
            candidates.push(format!("depth_{digits}.png"));
        }
        candidates.push(format!("{stem}.bin"));
        candidates.push(format!("{stem}.depth.png"));
        candidates
            .into_iter()
            .map(|c| dir.join(c))
            .find(|p| p.exists() && p != frame)
    }

    pub fn load(&self) -> Result<FrameSequence> {
        let paths = self.frame_paths()?;
        if paths.is_empty() {
            bail!("no frames match `{}` in {}", self.frame_pattern, self.root.display());
        }
        let k = Intrinsics::load(&self.intrinsics)
            .with_context(|| format!("reading intrinsics {}", self.intrinsics.display()))?;
        let frames = paths
            .iter()
            .map(|p| Image::load_png(p).with_context(|| format!("reading frame {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        let background = match &self.background {
            Some(p) => parse_background(&std::fs::read_to_string(p)?)
                .with_context(|| format!("reading background {}", p.display()))?,
            None => [0.0; 3],
        };
        let mut seq = FrameSequence::new(frames, k, background)?;
        let depth_paths: Vec<Option<PathBuf>> = paths.iter().map(|p| self.depth_for(p)).collect();
        if depth_paths.iter().all(Option::is_some) {
            let depths = depth_paths
                .iter()
                .flatten()
                .map(|p| DepthMap::load(p).with_context(|| format!("reading depth {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            seq.depths = Some(depths);
        } else if depth_paths.iter().any(Option::is_some) {
            log::warn!("depth maps exist for only some frames; ignoring depth");
        }
        if let Some(gt) = &self.groundtruth {
            let traj = Trajectory::load(gt)?;
            let sel = traj
                .select(&seq.indices)
                .with_context(|| format!("ground truth {} does not cover every frame", gt.display()))?;
            seq.gt_poses = Some(sel.poses.iter().map(|(_, p)| p.inverse()).collect::<Vec<Se3Transform>>());
        }
        seq.validate()?;
        Ok(seq)
    }
}

/// Files in `dir` whose names match `pattern`, sorted by name.
pub fn list_matching(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let pat = glob::Pattern::new(pattern).with_context(|| format!("bad file pattern `{pattern}`"))?;
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() && pat.matches(&entry.file_name().to_string_lossy()) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn parse_background(text: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("bad colour component `{s}`")))
        .collect::<Result<_>>()?;
    match v[..] {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([r, g, b]),
        _ => bail!("background must be three values in [0, 1]"),
    }
}

/// Trailing number of a file stem, e.g. 12 for `render_012.png`.
pub fn stem_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let rev: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    rev.chars().rev().collect::<String>().parse().ok()
}
