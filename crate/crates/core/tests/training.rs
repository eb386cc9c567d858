use std::time::Instant;

use proptest::prelude::*;
use tardis::addressing::ReadMode;
use tardis::autodiff::{Graph, Tensor, Var};
use tardis::checks::reinforce_unbiasedness;
use tardis::config::RunConfig;
use tardis::model::{run_episode, EpisodeOptions, Model};
use tardis::rng::{Rng, SeedStream};
use tardis::tasks::TargetKind;
use tardis::training::*;

fn ln4() -> f64 {
    4f64.ln()
}

#[test]
fn nll_of_perfect_prediction_is_zero() {
    let p = vec![Tensor::matrix(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap()];
    let l = nll_loss(&p, &p, &[vec![true]], TargetKind::Classes).unwrap();
    assert!(l.abs() <= 1e-12);
}

#[test]
fn nll_of_uniform_prediction_is_log_four() {
    let p = vec![Tensor::filled(&[2, 4], 0.25)];
    let y = vec![Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap()];
    let l = nll_loss(&p, &y, &[vec![true, true]], TargetKind::Classes).unwrap();
    assert!((l - 1.3863).abs() < 1e-4);
    assert!((l - ln4()).abs() < 1e-15);
}

#[test]
fn masked_steps_contribute_nothing() {
    let good = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let bad = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    let mask = [vec![true], vec![false]];
    let a = nll_loss(&[good.clone(), bad.clone()], &[good.clone(), good.clone()], &mask, TargetKind::Classes).unwrap();
    let b = nll_loss(&[good.clone(), good.clone()], &[good.clone(), good.clone()], &mask, TargetKind::Classes).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_probability_is_clamped() {
    let p = vec![Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()];
    let y = vec![Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()];
    let l = nll_loss(&p, &y, &[vec![true]], TargetKind::Classes).unwrap();
    assert!((l + 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn bit_loss_is_per_bit_mean() {
    let p = vec![Tensor::filled(&[1, 3], 0.5)];
    let y = vec![Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap()];
    let l = nll_loss(&p, &y, &[vec![true]], TargetKind::Bits).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn advantage_examples() {
    assert_eq!(discounted_advantages(&[1.0, -2.0, 3.0], &[0.5, 0.5, 0.5], 0.0), vec![0.5, -2.5, 2.5]);
    assert_eq!(discounted_advantages(&[1.0, 1.0, 1.0], &[0.0; 3], 1.0), vec![3.0, 2.0, 1.0]);
    let a = discounted_advantages(&[0.0, 0.0, 1.0], &[0.0; 3], 0.9);
    // oracle: explicit suffix sums
    let oracle: Vec<f64> = (0..3).map(|t| (t..3).map(|j| 0.9f64.powi((j - t) as i32) * [0.0, 0.0, 1.0][j]).sum()).collect();
    for (x, y) in a.iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!((a[0] - 0.81).abs() < 1e-15 && (a[1] - 0.9).abs() < 1e-15 && a[2] == 1.0);
}

proptest! {
    #[test]
    fn advantages_match_suffix_sums(
        r in proptest::collection::vec(-5.0f64..5.0, 1..20),
        gamma in 0.0f64..=1.0,
    ) {
        let b: Vec<f64> = r.iter().map(|v| v * 0.3).collect();
        let a = discounted_advantages(&r, &b, gamma);
        for t in 0..r.len() {
            let s: f64 = (t..r.len()).map(|j| gamma.powi((j - t) as i32) * (r[j] - b[j])).sum();
            prop_assert!((a[t] - s).abs() < 1e-9);
        }
    }
}

fn surrogate_grad(adv: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Graph::new();
    let theta = g.leaf(Tensor::vector(vec![0.3, -0.7]));
    let lps: Vec<Var> = (0..adv.len())
        .map(|t| {
            let s = g.scale(theta, (t + 1) as f64);
            g.tanh(s)
        })
        .collect();
    let s = reinforce_surrogate(&mut g, &lps, adv).unwrap();
    let grads = g.backward(s).unwrap();
    grads.get(theta).data().to_vec()
}

#[test]
fn zero_advantages_give_zero_gradient() {
    assert!(surrogate_grad(&[vec![0.0, 0.0], vec![0.0, 0.0]]).iter().all(|&v| v == 0.0));
}

#[test]
fn doubling_advantages_doubles_gradient() {
    let a = vec![vec![0.4, -1.1], vec![2.0, 0.25]];
    let a2: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
    for (x, y) in surrogate_grad(&a).iter().zip(surrogate_grad(&a2)) {
        assert_eq!(2.0 * x, y);
    }
}

#[test]
fn auxiliary_reward_examples() {
    let y = [0.0, 1.0, 0.0, 0.0];
    assert!(auxiliary_reward(&[-40.0, 40.0, -40.0, -40.0], &y, TargetKind::Classes).abs() < 1e-12);
    assert!((auxiliary_reward(&[0.3; 4], &y, TargetKind::Classes) + ln4()).abs() < 1e-15);
}

#[test]
fn auxiliary_loss_does_not_reach_the_episode() {
    let mut cfg = RunConfig {
        mode: TrainMode::ReinforceAux,
        d_h: 8,
        k: 4,
        d_m: 4,
        d_att: 4,
        max_len: 3,
        n_bits: 3,
        ..RunConfig::default()
    };
    cfg.batch = 2;
    let model = Model::new(cfg.model_config(), &SeedStream::new(0)).unwrap();
    let batch = cfg.sample(&cfg.glyph_source().unwrap(), 2, &mut SeedStream::new(1).rng()).unwrap();
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let ep = run_episode(&mut g, &model, &bound, &batch.inputs, None, &EpisodeOptions::train(ReadMode::ReinforceSample), &SeedStream::new(2)).unwrap();
    let al: Vec<Var> = ep.steps.iter().map(|s| s.aux_logits.unwrap()).collect();
    let (l, _) = sequence_loss(&mut g, &batch, &al).unwrap();
    let grads = g.backward(l).unwrap();
    for e in model.store.entries() {
        let id = model.store.find(&e.name).unwrap();
        let n = grads.get(bound.var(id)).norm();
        // copy inputs are blank on scored steps, so aux.w_x sees nothing
        if e.name == "aux.w_r" || e.name == "aux.b" {
            assert!(n > 0.0, "{}", e.name);
        } else if !e.name.starts_with("aux.") {
            assert_eq!(n, 0.0, "{}", e.name);
        }
    }
}

#[test]
fn reinforce_estimator_is_unbiased() {
    let start = Instant::now();
    let blocks = reinforce_unbiasedness(0, 100_000).unwrap();
    assert!(start.elapsed().as_secs() < 120);
    assert!(blocks.iter().filter(|b| b.exact_norm > 1e-12).count() >= 4);
    for b in &blocks {
        assert!(b.rel_err < 0.05, "{b:?}");
    }
}

#[test]
fn baseline_is_a_per_position_ema() {
    let mut b = RewardBaseline::new(0.9);
    assert_eq!(b.current(3), vec![0.0; 3]);
    b.update(&[1.0, 2.0]);
    b.update(&[1.0, 2.0, 3.0]);
    let c = b.current(3);
    assert!((c[0] - 0.19).abs() < 1e-12 && (c[1] - 0.38).abs() < 1e-12 && (c[2] - 0.3).abs() < 1e-12, "{c:?}");
}

#[test]
fn normalizer_never_amplifies() {
    let mut n = VarianceNormalizer::new(0.99);
    for _ in 0..2000 {
        let mut a = vec![0.7; 8];
        n.apply(&mut a);
        assert!(a.iter().all(|v| v.abs() <= 0.7));
    }
    let mut z = vec![0.0; 5];
    n.apply(&mut z);
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn normalizer_whitens_wide_advantages() {
    let mut rng = SeedStream::new(6).rng();
    let mut n = VarianceNormalizer::new(0.99);
    let mut out = Vec::new();
    for i in 0..5000 {
        let mut a: Vec<f64> = (0..16)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random();
                10.0 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        n.apply(&mut a);
        if i >= 1000 {
            out.extend(a);
        }
    }
    let m = out.iter().sum::<f64>() / out.len() as f64;
    let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / out.len() as f64;
    assert!((v - 1.0).abs() <= 0.1, "{v}");
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
    let before = clip_global_norm(&mut g, 1.0);
    assert!((before - 5.0).abs() < 1e-12);
    let after: f64 = g.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-12);
    let mut small = vec![Tensor::vector(vec![0.3])];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.3]);
}

fn small_cfg(mode: TrainMode) -> RunConfig {
    RunConfig {
        mode,
        d_h: 10,
        k: 4,
        a: 2,
        d_m: 4,
        d_att: 6,
        batch: 4,
        max_len: 3,
        n_bits: 3,
        ..RunConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    for mode in TrainMode::ALL {
        let cfg = RunConfig { lr: 0.0, ..small_cfg(mode) };
        let model = Model::new(cfg.model_config(), &SeedStream::new(0)).unwrap();
        let before = model.store.clone();
        let mut learner = Learner::new(model, cfg.update_settings());
        let glyphs = cfg.glyph_source().unwrap();
        for step in 0..5 {
            let b = cfg.sample(&glyphs, cfg.batch, &mut SeedStream::new(step).rng()).unwrap();
            learner.update(&b, &SeedStream::new(100 + step)).unwrap();
        }
        for (a, b) in before.entries().iter().zip(learner.model.store.entries()) {
            assert_eq!(a.value, b.value, "{} {}", mode.name(), a.name);
        }
    }
}

#[test]
fn every_mode_reduces_loss_on_a_fixed_batch() {
    for mode in TrainMode::ALL {
        let cfg = RunConfig { lr: 1e-2, ..small_cfg(mode) };
        let model = Model::new(cfg.model_config(), &SeedStream::new(0)).unwrap();
        let mut learner = Learner::new(model, cfg.update_settings());
        let b = cfg.sample(&cfg.glyph_source().unwrap(), 8, &mut SeedStream::new(3).rng()).unwrap();
        let first = evaluate(&learner.model, &b).unwrap().loss;
        for step in 0..60 {
            learner.update(&b, &SeedStream::new(step)).unwrap();
        }
        let last = evaluate(&learner.model, &b).unwrap().loss;
        assert!(last < first, "{}: {first} -> {last}", mode.name());
    }
}

#[test]
fn updates_are_deterministic() {
    let run = || {
        let cfg = small_cfg(TrainMode::ReinforceAux);
        let model = Model::new(cfg.model_config(), &SeedStream::new(4)).unwrap();
        let mut learner = Learner::new(model, cfg.update_settings());
        let glyphs = cfg.glyph_source().unwrap();
        for step in 0..5 {
            let b = cfg.sample(&glyphs, cfg.batch, &mut SeedStream::new(step).rng()).unwrap();
            learner.update(&b, &SeedStream::new(50 + step)).unwrap();
        }
        learner.model.store
    };
    let (a, b) = (run(), run());
    for (x, y) in a.entries().iter().zip(b.entries()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn mode_names_round_trip() {
    for m in TrainMode::ALL {
        assert_eq!(TrainMode::parse(m.name()), Some(m));
    }
    assert_eq!(TrainMode::parse("reinforce-R"), Some(TrainMode::ReinforceR));
    assert_eq!(TrainMode::parse("sgd"), None);
}
