//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use splatpose::autodiff::{check_gradients, BackwardMode, GradcheckOptions, Objective};
use splatpose::eval::{evaluate, MetricsReport, Trajectory};
use splatpose::gaussians::GaussianSet;
use splatpose::geom::{Intrinsics, Se3Transform};
use splatpose::image::Image;
use splatpose::losses::{CorrespondenceObjective, LossPair, LossWeights, SceneObjective};
use splatpose::pipeline::{
    build_matcher, configure_threads, estimate_test_views, prepare_split, run_pose_stage, run_scene_stage, FrameSequence,
    OptimizerConfig, PoseStageResult, Session, TrainingLog,
};
use splatpose::renderer::{render, Projection};
use splatpose::synth::{gradcheck_fixture, SceneSpec, SyntheticDataset, TrajectorySpec};

use crate::dataset::{list_matching, parse_background, stem_index, DatasetDescriptor};
use crate::rundir::{RunDir, Status};
use crate::{Command, ConfigArgs, DatasetArgs, Outcome, SynthArgs};

const ABLATION_TAG: &str = "ablate-correspondence";

pub fn dispatch(cmd: Command, overrides: &[(String, String)]) -> Result<Outcome> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Run {
            data,
            cfg,
            out,
            ablate_correspondence,
        } => {
            let cfg = load_config(&cfg, overrides, ablate_correspondence)?;
            run(&data, &cfg, &out, ablate_correspondence, true)
        }
        Command::EstimatePoses {
            data,
            cfg,
            out,
            ablate_correspondence,
        } => {
            let cfg = load_config(&cfg, overrides, ablate_correspondence)?;
            run(&data, &cfg, &out, ablate_correspondence, false)
        }
        Command::TrainScene { data, cfg, poses, out } => {
            let cfg = load_config(&cfg, overrides, false)?;
            train_scene(&data, &cfg, &poses, &out)
        }
        Command::Render {
            scene,
            poses,
            intrinsics,
            out,
            background,
        } => render_views(&scene, &poses, &intrinsics, &out, &background),
        Command::Eval {
            cfg,
            est,
            gt,
            renders,
            gts,
            frames,
            out,
        } => {
            let cfg = load_config(&cfg, overrides, false)?;
            eval(&cfg, &est, &gt, renders.as_deref().zip(gts.as_deref()), &frames, out.as_deref())
        }
        Command::Gradcheck {
            fixtures,
            gaussians,
            size,
            seed,
            out,
        } => gradcheck(seed, fixtures, gaussians, size, out.as_deref()),
    }
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)], ablate: bool) -> Result<OptimizerConfig> {
    let mut cfg = match &args.config {
        Some(p) => OptimizerConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => OptimizerConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).with_context(|| format!("override --{k}={v}"))?;
    }
    if ablate {
        cfg.weights = LossWeights::pixel_only();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn descriptor(args: &DatasetArgs, test_every: usize) -> DatasetDescriptor {
    let mut d = DatasetDescriptor::discover(&args.dataset, test_every);
    d.frame_pattern = args.frames.clone();
    if let Some(k) = &args.intrinsics {
        d.intrinsics = k.clone();
    }
    if let Some(dd) = &args.depth_dir {
        d.depth_dir = Some(dd.clone());
    }
    if let Some(gt) = &args.groundtruth {
        d.groundtruth = Some(gt.clone());
    }
    d
}

fn synth(a: &SynthArgs) -> Result<Outcome> {
    let scene = SceneSpec {
        gaussians: a.gaussians,
        seed: a.seed,
        ..Default::default()
    };
    let traj = TrajectorySpec {
        kind: a.trajectory.parse()?,
        frames: a.frames,
        step: a.step,
    };
    if a.gaussians == 0 || a.width < 11 || a.height < 11 {
        bail!("need at least one Gaussian and images of at least 11x11 pixels");
    }
    let ds = SyntheticDataset::generate(&scene, &traj, a.width, a.height)?;
    ds.write(&a.out)?;
    log::info!(
        "wrote {} frames of {}x{} ({} trajectory, extent {:.4}) to {}",
        a.frames,
        a.width,
        a.height,
        traj.kind,
        ds.extent,
        a.out.display()
    );
    Ok(Outcome::Success)
}

fn frames_csv(p: &PoseStageResult) -> String {
    let mut s = String::from("index,gaussians,checksum,fit_loss,pose_loss,diverged\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for f in &p.frames {
        let _ = writeln!(
            s,
            "{},{},{:016x},{},{},{}",
            f.index,
            f.gaussians,
            f.checksum,
            opt(f.fit_loss),
            opt(f.pose_loss),
            f.diverged
        );
    }
    s
}

/// `(frame, render, ground truth)` for every `render_NNN.png`, paired with
/// the NNN-th frame in `gts` matching `pattern`.
fn collect_views(renders: &Path, gts: &Path, pattern: &str) -> Result<Vec<(usize, Image, Image)>> {
    let frames = list_matching(gts, pattern)?;
    let mut out = Vec::new();
    for r in list_matching(renders, "render_*.png")? {
        let idx = stem_index(&r).with_context(|| format!("no frame number in {}", r.display()))?;
        let gt = frames
            .get(idx)
            .with_context(|| format!("no ground-truth frame {idx} matching `{pattern}` in {}", gts.display()))?;
        out.push((idx, Image::load_png(&r)?, Image::load_png(gt)?));
    }
    Ok(out)
}

fn write_metrics(dir: &RunDir, report: &MetricsReport) -> Result<()> {
    dir.write("metrics.csv", report.to_csv())?;
    dir.write("metrics.txt", report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

/// `run` (with `full`) or `estimate-poses`.
fn run(data: &DatasetArgs, cfg: &OptimizerConfig, out: &Path, ablate: bool, full: bool) -> Result<Outcome> {
    let desc = descriptor(data, cfg.test_every);
    let seq = desc.load()?;
    configure_threads(cfg.threads)?;
    let dir = RunDir::create(out)?;
    let tag = ablate.then_some(ABLATION_TAG);
    let hash = dir.record_inputs(cfg, tag, &desc.input_files()?, &desc.root)?;
    let split = prepare_split(&seq, cfg)?;
    log::info!(
        "{} frames ({} train, {} held out with test_every={}), input hash {hash}",
        seq.len(),
        split.train.len(),
        split.test.len(),
        desc.test_every
    );
    let mut matcher = build_matcher(cfg, &seq, split.train[0], &dir.path("matcher"))?;
    let mut status = Status {
        command: if full { "run" } else { "estimate-poses" }.into(),
        tag: tag.map(String::from),
        ..Default::default()
    };
    let mut log = TrainingLog::default();
    let mut excluded = Vec::new();

    let result: std::result::Result<(), (&str, anyhow::Error)> = (|| {
        let mut session = Session::new(cfg, seq.intrinsics, seq.background, matcher.as_mut(), &mut log);
        let poses = run_pose_stage(&split.train_seq, &mut session).map_err(|e| ("pose", e.into()))?;
        let traj = Trajectory::from_world_to_camera(&split.train_seq.indices, &poses.chain.absolute)
            .map_err(|e| ("pose", e.into()))?;
        (|| -> Result<()> {
            traj.save(&dir.path("trajectory.txt"))?;
            dir.write("frames.csv", frames_csv(&poses))
        })()
        .map_err(|e| ("pose", e))?;
        status.completed.push("pose".into());
        if !full {
            return Ok(());
        }

        let scene = run_scene_stage(&split.train_seq, &poses.chain.absolute, cfg, session.log)
            .map_err(|e| ("scene", e.into()))?;
        scene.save(&dir.path("scene.gsplat")).map_err(|e| ("scene", e.into()))?;
        status.completed.push("scene".into());

        let views = estimate_test_views(&scene, &seq, &split, &poses.chain.absolute, &mut session)
            .map_err(|e| ("test-pose", e.into()))?;
        (|| -> Result<()> {
            let idx: Vec<usize> = views.iter().map(|v| v.index).collect();
            let p: Vec<Se3Transform> = views.iter().map(|v| v.pose.pose).collect();
            Trajectory::from_world_to_camera(&idx, &p)?.save(&dir.path("test_trajectory.txt"))?;
            std::fs::create_dir_all(dir.path("test_renders"))?;
            for v in &views {
                match &v.render {
                    Some(r) => r.save_png(&dir.path(&format!("test_renders/render_{:03}.png", v.index)))?,
                    None => excluded.push(v.index),
                }
            }
            Ok(())
        })()
        .map_err(|e| ("test-pose", e))?;
        status.completed.push("test-pose".into());
        Ok(())
    })();

    dir.write_logs(&log)?;
    if let Err((stage, e)) = result {
        log::error!("{stage} stage failed: {e:#}");
        status.error = Some((stage.to_string(), format!("{e:#}")));
        dir.write_status(&status)?;
        return Ok(Outcome::StageFailed);
    }
    if !excluded.is_empty() {
        log::warn!("held-out views {excluded:?} diverged and are excluded from metrics");
    }

    if let Some(gt_path) = &desc.groundtruth {
        // metrics are computed from the files just written so `eval` reproduces them
        let est = Trajectory::load(&dir.path("trajectory.txt"))?;
        let gt = Trajectory::load(gt_path)?;
        let views = if full {
            collect_views(&dir.path("test_renders"), &desc.root, &desc.frame_pattern)?
        } else {
            Vec::new()
        };
        let report = evaluate(&est, &gt, &views, cfg.rpe_delta, cfg.rpe_aligned)?;
        write_metrics(&dir, &report)?;
        status.completed.push("metrics".into());
    }
    let mut st = status;
    if !excluded.is_empty() {
        st.completed.push(format!("excluded:{}", excluded.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")));
    }
    dir.write_status(&st)?;
    Ok(Outcome::Success)
}

fn train_scene(data: &DatasetArgs, cfg: &OptimizerConfig, poses: &Path, out: &Path) -> Result<Outcome> {
    let desc = descriptor(data, 0);
    let seq = desc.load()?;
    configure_threads(cfg.threads)?;
    let traj = Trajectory::load(poses)?;
    let positions: Vec<usize> = traj
        .indices()
        .iter()
        .map(|i| {
            seq.indices
                .iter()
                .position(|j| j == i)
                .with_context(|| format!("trajectory index {i} has no frame"))
        })
        .collect::<Result<_>>()?;
    let sub: FrameSequence = seq.subset(&positions);
    let w2c: Vec<Se3Transform> = traj.poses.iter().map(|(_, p)| p.inverse()).collect();
    let dir = RunDir::create(out)?;
    let mut inputs = desc.input_files()?;
    inputs.push(poses.to_path_buf());
    dir.record_inputs(cfg, None, &inputs, &desc.root)?;
    let mut status = Status {
        command: "train-scene".into(),
        ..Default::default()
    };
    let mut log = TrainingLog::default();
    let result = run_scene_stage(&sub, &w2c, cfg, &mut log);
    dir.write_logs(&log)?;
    match result.and_then(|scene| scene.save(&dir.path("scene.gsplat"))) {
        Ok(()) => {
            status.completed.push("scene".into());
            dir.write_status(&status)?;
            Ok(Outcome::Success)
        }
        Err(e) => {
            log::error!("scene stage failed: {e}");
            status.error = Some(("scene".into(), e.to_string()));
            dir.write_status(&status)?;
            Ok(Outcome::StageFailed)
        }
    }
}

fn render_views(scene: &Path, poses: &Path, intrinsics: &Path, out: &Path, background: &str) -> Result<Outcome> {
    let set = GaussianSet::load(scene)?;
    let traj = Trajectory::load(poses)?;
    let k = Intrinsics::load(intrinsics)?;
    let bg = parse_background(background)?;
    std::fs::create_dir_all(out)?;
    for (i, c2w) in &traj.poses {
        let img = render(&set, &c2w.inverse(), &k, bg).color;
        img.save_png(&out.join(format!("render_{i:03}.png")))?;
    }
    log::info!("rendered {} views to {}", traj.len(), out.display());
    Ok(Outcome::Success)
}

fn eval(
    cfg: &OptimizerConfig,
    est: &Path,
    gt: &Path,
    images: Option<(&Path, &Path)>,
    pattern: &str,
    out: Option<&Path>,
) -> Result<Outcome> {
    let est = Trajectory::load(est)?;
    let gt = Trajectory::load(gt)?;
    let views = match images {
        Some((r, g)) => collect_views(r, g, pattern)?,
        None => Vec::new(),
    };
    let report = evaluate(&est, &gt, &views, cfg.rpe_delta, cfg.rpe_aligned)?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Outcome::Success)
}

fn gradcheck(seed: u64, fixtures: u64, gaussians: usize, size: usize, out: Option<&Path>) -> Result<Outcome> {
    let mut text = String::new();
    let mut all_passed = true;
    for s in seed..seed + fixtures {
        let fx = gradcheck_fixture(s, gaussians, size)?;
        let proj = Projection::new(&fx.set, &fx.pose, &fx.intrinsics, fx.background);
        let pairs = |pinned: bool| -> Vec<LossPair> {
            fx.pairs
                .iter()
                .map(|(k, kp, d)| LossPair {
                    k: *k,
                    k_prime: *kp,
                    ref_depth: Some(*d),
                    anchor: pinned.then(|| proj.sample_surface(&[*kp])[0].point),
                })
                .collect()
        };
        let cor = |mode, pinned| CorrespondenceObjective {
            target: fx.target.clone(),
            intrinsics: fx.intrinsics,
            background: fx.background,
            pairs: pairs(pinned),
            weights: LossWeights::default(),
            mode,
            min_pairs: 1,
        };
        let scene = SceneObjective {
            target: fx.target.clone(),
            intrinsics: fx.intrinsics,
            background: fx.background,
            ssim_weight: 0.2,
            mode: BackwardMode::FULL,
        };
        let live = cor(BackwardMode::FULL, false);
        let pinned = cor(BackwardMode::FROZEN, true);
        let full = GradcheckOptions::default();
        let twist_only = GradcheckOptions {
            check_gaussians: false,
            ..Default::default()
        };
        let checks: [(&str, &dyn Objective, &GradcheckOptions); 3] = [
            ("scene", &scene, &full),
            ("correspondence", &live, &full),
            ("correspondence-pinned-pose", &pinned, &twist_only),
        ];
        for (name, obj, opts) in checks {
            let report = check_gradients(&fx.set, &fx.pose, obj, opts)?;
            all_passed &= report.passed();
            let _ = writeln!(text, "fixture {s} {name}: {}", if report.passed() { "PASS" } else { "FAIL" });
            let _ = writeln!(text, "{report}");
        }
    }
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(if all_passed { Outcome::Success } else { Outcome::StageFailed })
}
