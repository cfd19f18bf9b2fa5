use super::*;
use crate::augment::derive_seed;
use crate::error::Error;
use crate::image::Image;
use crate::model::{Model, ModelConfig, ModelHash, PromptState};
use crate::stats::{source_stats, SourceStats};

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        d_vision: 16,
        d_text: 16,
        embed_dim: 16,
        vision_layers: 4,
        text_layers: 3,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes: 4,
        ..ModelConfig::default()
    }
}

fn image(k: u64) -> Image {
    let n = 16 * 16;
    let data = (0..n)
        .map(|i| ((i as f64 + 1.0) * (0.47 + k as f64 * 0.131)).sin())
        .collect();
    Image::new(1, 16, 16, data).unwrap()
}

struct Fixture {
    model: Model,
    prompts: PromptState,
    stats: SourceStats,
}

fn fixture() -> Fixture {
    let model = Model::new(small(), 3).unwrap();
    let prompts = model.default_prompts(4).unwrap();
    let src: Vec<Image> = (10..16).map(image).collect();
    let stats = source_stats(&model, &src, 4, false, 4, "fixture").unwrap();
    Fixture {
        model,
        prompts,
        stats,
    }
}

fn cfg() -> TtaConfig {
    TtaConfig {
        n_views: 8,
        filter_ratio: 0.25,
        beta: 1.0,
        seed: 7,
        ..TtaConfig::default()
    }
}

#[test]
fn small_sgd_step_lowers_the_objective() {
    let f = fixture();
    let c = TtaConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1e-6,
        ..cfg()
    };
    let mut p = f.prompts.clone();
    let r = adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &c).unwrap();
    let before = &r.steps[0];
    let after = evaluate_objective(&image(0), &f.model, &p, Some(&f.stats), &c).unwrap();
    assert_eq!(before.kept, after.kept);
    assert!(
        after.total < before.total,
        "{} !< {}",
        after.total,
        before.total
    );
    assert!(p.max_abs_diff(&f.prompts) > 0.0);
}

#[test]
fn first_step_log_matches_evaluate_objective() {
    let f = fixture();
    let mut p = f.prompts.clone();
    let r = adapt_and_predict(&image(1), &f.model, &mut p, Some(&f.stats), &cfg()).unwrap();
    let e = evaluate_objective(&image(1), &f.model, &f.prompts, Some(&f.stats), &cfg()).unwrap();
    assert_eq!(r.steps[0], e);
    assert_eq!(e.kept.len(), 2);
    let align = e.align.unwrap();
    assert_eq!(e.total, e.entropy + align);
}

#[test]
fn episodic_results_do_not_depend_on_history() {
    let f = fixture();
    let mut p = f.prompts.clone();
    let a1 = adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &cfg()).unwrap();
    adapt_and_predict(&image(1), &f.model, &mut p, Some(&f.stats), &cfg()).unwrap();
    let a2 = adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &cfg()).unwrap();
    assert_eq!(a1, a2);
}

#[test]
fn zero_beta_matches_the_entropy_only_run_bit_for_bit() {
    let f = fixture();
    let c = TtaConfig { beta: 0.0, ..cfg() };
    let (mut p1, mut p2) = (f.prompts.clone(), f.prompts.clone());
    let with = adapt_and_predict(&image(2), &f.model, &mut p1, Some(&f.stats), &c).unwrap();
    let without = adapt_and_predict(&image(2), &f.model, &mut p2, None, &c).unwrap();
    assert_eq!(with.probs, without.probs);
    assert_eq!(p1.max_abs_diff(&p2), 0.0);
    assert!(with.steps[0].align.is_some());
    assert!(without.steps[0].align.is_none());
}

#[test]
fn zero_steps_is_the_frozen_prediction() {
    let f = fixture();
    let c = TtaConfig {
        n_steps: 0,
        ..cfg()
    };
    let mut p = f.prompts.clone();
    let r = adapt_and_predict(&image(3), &f.model, &mut p, Some(&f.stats), &c).unwrap();
    assert_eq!(
        r.probs,
        f.model.predict(&image(3), Some(&f.prompts)).unwrap()
    );
    assert!(r.steps.is_empty());
}

#[test]
fn frozen_coupling_stays_fixed() {
    let f = fixture();
    let c = TtaConfig {
        freeze_coupling: true,
        lr: 0.01,
        ..cfg()
    };
    let mut p = f.prompts.clone();
    adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &c).unwrap();
    assert_eq!(p.coupling(), f.prompts.coupling());
    assert_ne!(p.text(), f.prompts.text());
}

#[test]
fn foreign_statistics_are_rejected() {
    let f = fixture();
    let mut other = f.stats.clone();
    other.model_hash = ModelHash([9; 32]);
    let mut p = f.prompts.clone();
    let r = adapt_and_predict(&image(0), &f.model, &mut p, Some(&other), &cfg());
    assert!(matches!(r, Err(Error::Compat(_))));
    let c = TtaConfig {
        align_loss: AlignLoss::Cmd(6),
        ..cfg()
    };
    let r = adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &c);
    assert!(matches!(r, Err(Error::Compat(_))));
}

#[test]
fn every_loss_variant_runs_and_stays_finite() {
    let f = fixture();
    for v in [
        AlignLoss::L1,
        AlignLoss::L2,
        AlignLoss::Kl,
        AlignLoss::KlReverse,
        AlignLoss::Cmd(4),
    ] {
        let c = TtaConfig {
            align_loss: v,
            ..cfg()
        };
        let mut p = f.prompts.clone();
        let r = adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &c).unwrap();
        assert!(r.steps[0].total.is_finite(), "{v}");
        assert!(r.probs.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn continuous_mode_is_required_for_streams() {
    let f = fixture();
    let mut p = f.prompts.clone();
    let r = continuous_adapt(&[image(0)], &f.model, &mut p, None, &cfg());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn continuous_first_sample_matches_an_episode_with_the_derived_seed() {
    let f = fixture();
    let c = TtaConfig {
        mode: Mode::Continuous,
        ..cfg()
    };
    let mut pc = f.prompts.clone();
    let stream =
        continuous_adapt(&[image(0), image(1)], &f.model, &mut pc, Some(&f.stats), &c).unwrap();
    let e = TtaConfig {
        seed: derive_seed(c.seed, 0),
        ..cfg()
    };
    let mut pe = f.prompts.clone();
    let ep = adapt_and_predict(&image(0), &f.model, &mut pe, Some(&f.stats), &e).unwrap();
    assert_eq!(stream[0], ep);
    assert_eq!(stream[1].view_seed, derive_seed(c.seed, 1));
}

#[test]
fn drift_penalty_has_no_effect_on_a_single_step() {
    // At the anchor the penalty and its gradient are exactly zero.
    let f = fixture();
    let base = TtaConfig {
        mode: Mode::Continuous,
        ..cfg()
    };
    let pinned = TtaConfig {
        prompt_reg_lambda: 1e9,
        ..base.clone()
    };
    let imgs = [image(0), image(1), image(2)];
    let (mut p1, mut p2) = (f.prompts.clone(), f.prompts.clone());
    let a = continuous_adapt(&imgs, &f.model, &mut p1, Some(&f.stats), &base).unwrap();
    let b = continuous_adapt(&imgs, &f.model, &mut p2, Some(&f.stats), &pinned).unwrap();
    assert_eq!(a, b);
    assert_eq!(p1.max_abs_diff(&p2), 0.0);
}

#[test]
fn drift_penalty_projects_sgd_back_to_the_anchor() {
    // With 2·lr·λ = 1 the second SGD step lands on p_prev − lr·∇L(p₁).
    let f = fixture();
    let lr = 1e-3;
    let c = TtaConfig {
        mode: Mode::Continuous,
        optimizer: OptimizerKind::Sgd,
        lr,
        n_steps: 2,
        prompt_reg_lambda: 0.5 / lr,
        ..cfg()
    };
    let mut p = f.prompts.clone();
    continuous_adapt(&[image(0)], &f.model, &mut p, Some(&f.stats), &c).unwrap();

    let one = TtaConfig {
        n_steps: 1,
        prompt_reg_lambda: 0.0,
        ..c.clone()
    };
    let mut p1 = f.prompts.clone();
    continuous_adapt(&[image(0)], &f.model, &mut p1, Some(&f.stats), &one).unwrap();
    let ep = TtaConfig {
        mode: Mode::Episodic,
        seed: derive_seed(c.seed, 0),
        ..one
    };
    let (_, grads) = objective_gradient(&image(0), &f.model, &p1, Some(&f.stats), &ep).unwrap();
    let mut want = f.prompts.clone();
    for (t, g) in want.tensors_mut().into_iter().zip(&grads) {
        for (x, d) in t.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    assert!(p.max_abs_diff(&want) < 1e-12, "{}", p.max_abs_diff(&want));
}

#[test]
fn bag_views_change_only_the_alignment_term() {
    let f = fixture();
    let mut p = f.prompts.clone();
    let solo = adapt_and_predict(&image(0), &f.model, &mut p, Some(&f.stats), &cfg()).unwrap();
    let bag = adapt_with_bag(
        &image(0),
        &[image(5)],
        &f.model,
        &mut p,
        Some(&f.stats),
        &cfg(),
    )
    .unwrap();
    assert_eq!(solo.steps[0].entropy, bag.steps[0].entropy);
    assert_eq!(solo.steps[0].kept, bag.steps[0].kept);
    assert_ne!(solo.steps[0].align, bag.steps[0].align);
}

#[test]
fn episode_gradients_match_finite_differences() {
    let f = fixture();
    let c = TtaConfig {
        n_views: 4,
        ..cfg()
    };
    for (term, loss) in [
        (ObjectiveTerm::Entropy, AlignLoss::L1),
        (ObjectiveTerm::Align, AlignLoss::Kl),
        (ObjectiveTerm::Final, AlignLoss::Cmd(4)),
    ] {
        let c = TtaConfig {
            align_loss: loss,
            ..c.clone()
        };
        let r = objective_grad_check(
            &image(4),
            &f.model,
            &f.prompts,
            Some(&f.stats),
            &c,
            term,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{term:?} {loss}: {r:?}");
    }
}
