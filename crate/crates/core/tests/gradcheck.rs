use nalgebra::Vector3;
use splatpose::autodiff::{check_gradients, BackwardMode, GradcheckOptions, Objective, ParamClass};
use splatpose::losses::{CorrespondenceObjective, LossPair, LossWeights, SceneObjective};
use splatpose::synth::{gradcheck_fixture, GradcheckFixture};

fn pairs(fx: &GradcheckFixture, pinned: bool) -> Vec<LossPair> {
    let proj = splatpose::renderer::Projection::new(&fx.set, &fx.pose, &fx.intrinsics, fx.background);
    fx.pairs
        .iter()
        .map(|(k, kp, d)| LossPair {
            k: *k,
            k_prime: *kp,
            ref_depth: Some(*d),
            anchor: pinned.then(|| proj.sample_surface(&[*kp])[0].point),
        })
        .collect()
}

fn scene_objective(fx: &GradcheckFixture) -> SceneObjective {
    SceneObjective {
        target: fx.target.clone(),
        intrinsics: fx.intrinsics,
        background: fx.background,
        ssim_weight: 0.2,
        mode: BackwardMode::FULL,
    }
}

fn cor_objective(fx: &GradcheckFixture, mode: BackwardMode, pinned: bool) -> CorrespondenceObjective {
    CorrespondenceObjective {
        target: fx.target.clone(),
        intrinsics: fx.intrinsics,
        background: fx.background,
        pairs: pairs(fx, pinned),
        weights: LossWeights::default(),
        mode,
        min_pairs: 1,
    }
}

fn assert_passes(name: &str, fx: &GradcheckFixture, obj: &dyn Objective, opts: &GradcheckOptions) {
    let report = check_gradients(&fx.set, &fx.pose, obj, opts).unwrap();
    println!("{name}\n{report}");
    assert!(report.passed(), "{name} failed:\n{report}");
    for c in &report.classes {
        assert!(c.skipped * 5 <= c.checked + c.skipped, "{name}: too many skipped in {:?}", c.class);
    }
}

#[test]
fn scene_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        let fx = gradcheck_fixture(seed, 20, 32).unwrap();
        assert_passes(&format!("scene seed {seed}"), &fx, &scene_objective(&fx), &GradcheckOptions::default());
    }
}

#[test]
fn correspondence_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        let fx = gradcheck_fixture(seed, 20, 32).unwrap();
        let obj = cor_objective(&fx, BackwardMode::FULL, false);
        assert_passes(&format!("cor seed {seed}"), &fx, &obj, &GradcheckOptions::default());
    }
}

#[test]
fn frozen_twist_gradients_match_finite_differences() {
    for seed in 0..3 {
        let fx = gradcheck_fixture(seed, 20, 32).unwrap();
        let opts = GradcheckOptions {
            check_gaussians: false,
            ..Default::default()
        };
        for pinned in [false, true] {
            let obj = cor_objective(&fx, BackwardMode::FROZEN, pinned);
            let eval = obj.evaluate(&fx.set, &fx.pose).unwrap();
            assert!(eval.grads.gaussians_are_zero());
            assert!(eval.grads.twist.norm() > 0.0);
            assert_passes(&format!("frozen seed {seed} pinned {pinned}"), &fx, &obj, &opts);
        }
    }
}

struct Corrupted<'a>(&'a dyn Objective);

impl Objective for Corrupted<'_> {
    fn evaluate(
        &self,
        set: &splatpose::gaussians::GaussianSet,
        pose: &splatpose::geom::Se3Transform,
    ) -> splatpose::Result<splatpose::autodiff::Evaluation> {
        let mut e = self.0.evaluate(set, pose)?;
        for c in e.grads.color.iter_mut() {
            *c = *c * 1.5 + Vector3::repeat(1e-3);
        }
        Ok(e)
    }
}

#[test]
fn corrupted_adjoint_is_localized() {
    let fx = gradcheck_fixture(7, 12, 32).unwrap();
    let inner = scene_objective(&fx);
    let report = check_gradients(&fx.set, &fx.pose, &Corrupted(&inner), &GradcheckOptions::default()).unwrap();
    assert!(!report.passed());
    assert_eq!(report.failing_classes(), vec![ParamClass::Color]);
}

#[test]
fn value_agrees_with_evaluate() {
    let fx = gradcheck_fixture(3, 20, 32).unwrap();
    let scene = scene_objective(&fx);
    let cor = cor_objective(&fx, BackwardMode::FULL, false);
    let pinned = cor_objective(&fx, BackwardMode::FROZEN, true);
    for obj in [&scene as &dyn Objective, &cor, &pinned] {
        let e = obj.evaluate(&fx.set, &fx.pose).unwrap();
        let (loss, signature) = obj.value(&fx.set, &fx.pose).unwrap();
        assert!((loss - e.loss).abs() <= 1e-12 * e.loss.abs().max(1.0), "{loss} vs {}", e.loss);
        assert_eq!(signature, e.signature);
    }
}
