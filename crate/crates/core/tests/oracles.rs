//! Independent oracles for the model: finite differences, a scalar forward pass,
//! Monte-Carlo KL and a per-pixel warp.

mod common;

use candle_core::{Device, Tensor};
use common::reference::{self, Weights};
use common::{library_kl, micro_config, monte_carlo_kl, randomize, uniform_video, values, MicroProblem};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidpred_core::decoders::warp;
use vidpred_core::model::TrainNoise;
use vidpred_core::{Mode, RunConfig, TrainConfig, Trainer};

#[test]
fn gradients_match_central_differences() {
    for mode in [Mode::Full, Mode::NoW, Mode::NoZ1] {
        let problem = MicroProblem::new(mode, 7);
        let groups = problem.model.params().groups();
        let teacher = problem.teacher();
        let checks = common::finite_difference_check(&problem.model, &groups, 1e-6, &|| problem.total(), &|| {
            problem.total_with_teacher(teacher.as_ref())
        });
        for c in &checks {
            assert!(c.rel_error < 1e-4, "{mode} {c:?}");
            assert!(c.analytic_norm > 0.0 || c.group == "flow_decoder", "{mode} {c:?}");
        }
    }
}

#[test]
fn both_global_paths_carry_correct_gradient() {
    let problem = MicroProblem::new(Mode::Full, 11);
    let group = vec!["global".to_string()];
    for posterior in [true, false] {
        let f = || problem.global_functional(posterior);
        let c = &common::finite_difference_check(&problem.model, &group, 1e-6, &f, &|| common::scalar(&f()))[0];
        assert!(c.analytic_norm > 1e-3, "{posterior} {c:?}");
        assert!(c.rel_error < 1e-4, "{posterior} {c:?}");
    }
}

fn micro_run(mode: Mode) -> RunConfig {
    RunConfig {
        model: micro_config(mode),
        train: TrainConfig { batch_size: 3, cond_frames: 2, train_horizon: 2, seed: 5, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn training_step_total_matches_scalar_forward() {
    for mode in [Mode::Full, Mode::NoW, Mode::NoZ1] {
        let mut trainer = Trainer::new(micro_run(mode)).unwrap();
        randomize(&trainer.model, 3, 0.5);
        let cfg = trainer.config.model.clone();
        let (b, t, k) = (3, 4, 2);
        let x = uniform_video(4, (b, t, 1, 2, 2));

        let noise = TrainNoise::draw(&mut trainer.rng.clone(), &cfg, b, t).unwrap();
        let expected = reference::batch_terms(
            &Weights(trainer.model.params()),
            &cfg,
            &values(&x),
            b,
            t,
            k,
            &values(&noise.y1),
            noise.z1.as_ref().map(values).as_deref(),
            &values(&noise.z),
            trainer.config.loss.sigma_obs,
        );
        let record = trainer.training_step(&x).unwrap();
        let got = &record.loss;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs().max(1.0);
        assert!(close(got.total, expected.total(&trainer.config.loss)), "{mode}: {got:?} vs {expected:?}");
        assert!(close(got.recon_nll, expected.recon_nll));
        assert!(close(got.kl_y1, expected.kl_y1));
        assert!(close(got.kl_z_local, expected.kl_z_local));
        assert!(close(got.flow_l2, expected.flow_l2));
        assert_eq!(got.kl_z1.is_some(), expected.kl_z1.is_some());
        assert_eq!(got.appearance_l2.is_some(), expected.appearance_l2.is_some());
        if let (Some(a), Some(b)) = (got.kl_z1, expected.kl_z1) {
            assert!(close(a, b));
        }
        if let (Some(a), Some(b)) = (got.appearance_l2, expected.appearance_l2) {
            assert!(close(a, b));
        }
    }
}

#[test]
fn scalar_forward_matches_at_default_size() {
    // Same oracle on the real architecture (4 conv blocks, 8x8 patches, 2-layer transformers).
    let cfg = vidpred_core::ModelConfig { precision: vidpred_core::config::Precision::F64, ..Default::default() };
    let model = vidpred_core::VideoPredictor::new(&cfg, 2).unwrap();
    randomize(&model, 9, 0.1);
    let (b, t, k) = (1, 4, 2);
    let x = uniform_video(1, (b, t, 1, 32, 32));
    let noise = TrainNoise::draw(&mut ChaCha8Rng::seed_from_u64(3), &cfg, b, t).unwrap();
    let loss = vidpred_core::LossConfig::default();
    let out = model.forward_train(&x, k, &noise, &loss).unwrap();
    let (_, got) = vidpred_core::objective::assemble_loss(&out.terms, &loss).unwrap();
    let expected = reference::batch_terms(
        &Weights(model.params()),
        &cfg,
        &values(&x),
        b,
        t,
        k,
        &values(&noise.y1),
        noise.z1.as_ref().map(values).as_deref(),
        &values(&noise.z),
        loss.sigma_obs,
    );
    let want = expected.total(&loss);
    assert!((got.total - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", got.total);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let d = rng.random_range(1..4);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (mq, sq, mp, sp) = (draw(-1.0, 1.0), draw(0.3, 2.0), draw(-1.0, 1.0), draw(0.3, 2.0));
        let exact = library_kl(&mq, &sq, &mp, &sp);
        let (mc, se) = monte_carlo_kl(&mq, &sq, &mp, &sp, 200_000, &mut ChaCha8Rng::seed_from_u64(d as u64));
        assert!((exact - mc).abs() < 3.0 * se + 1e-12, "{exact} vs {mc} +- {se}");
    }
}

#[test]
fn kl_spot_values() {
    assert!((library_kl(&[1.0], &[1.0], &[0.0], &[1.0]) - 0.5).abs() < 1e-12);
    let want = (4.0 - 1.0 - 2.0 * 2f64.ln()) / 2.0;
    assert!((library_kl(&[0.0], &[2.0], &[0.0], &[1.0]) - want).abs() < 1e-12);
}

fn tensor(v: &[f64], dims: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_slice(v, dims, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_matches_per_pixel_gather(
        seed in any::<u64>(),
        (c, h, w) in (1usize..3, 1usize..7, 1usize..7),
        scale in 0.0f64..4.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f64> = (0..c * h * w).map(|_| rng.random()).collect();
        let flow: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-scale..=scale)).collect();
        let got = values(&warp(&tensor(&flow, (1, 2, h, w)), &tensor(&img, (1, c, h, w))).unwrap());
        let want = reference::warp(&flow, &img, c, h, w);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_output_stays_within_source_range(seed in any::<u64>(), scale in 0.0f64..10.0) {
        let (h, w) = (5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let flow: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-scale..=scale)).collect();
        let got = values(&warp(&tensor(&flow, (1, 2, h, w)), &tensor(&img, (1, 1, h, w))).unwrap());
        let (lo, hi) = img.iter().fold((f64::MAX, f64::MIN), |(l, u), v| (l.min(*v), u.max(*v)));
        prop_assert!(got.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }
}
