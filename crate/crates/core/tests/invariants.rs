//! Property suites over the model's structural invariants.
//!
//! Each property is a plain function taking the case count, so the
//! acceptance runner can drive the same suite.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{RngAlgorithm, TestCaseError, TestRng, TestRunner};
use tardis::addressing::{normalize_usage, ReadMode, USAGE_EPS};
use tardis::autodiff::{Graph, Tensor};
use tardis::checkpoint;
use tardis::model::{run_episode, Architecture, Episode, EpisodeOptions, Model, ModelConfig};
use tardis::rng::{Rng, SeedStream};

pub const CASES: u32 = 1000;

type Property = fn(u32) -> Result<(), String>;

pub const PROPERTIES: &[(&str, Property)] = &[
    ("one-hot reads", reads_are_one_hot_rows_of_memory),
    ("tied read/write after fill", writes_fill_then_follow_reads),
    ("no immediate re-read", last_read_cell_is_not_read_again),
    ("usage normalization", usage_is_centered_and_scaled),
    ("straight-through forward one-hot", straight_through_forward_is_the_hard_value),
    ("softmax normalization", softmax_rows_sum_to_one),
    ("checkpoint round-trip", checkpoint_round_trips_byte_for_byte),
];

fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn mode_of(i: usize) -> ReadMode {
    [ReadMode::ReinforceSample, ReadMode::GumbelSt, ReadMode::Argmax][i]
}

fn episode(seed: u64, k: usize, steps: usize, batch: usize, mode: ReadMode) -> (Model, Graph, Episode) {
    let cfg = ModelConfig {
        arch: Architecture::Tardis,
        d_x: 3,
        d_out: 2,
        d_h: 5,
        k,
        a: 2,
        d_m: 3,
        d_att: 4,
        aux_head: false,
    };
    let model = Model::new(cfg, &SeedStream::new(seed)).unwrap();
    let mut rng = SeedStream::new(seed).child("inputs").rng();
    let inputs: Vec<Tensor> = (0..steps)
        .map(|_| Tensor::new(vec![batch, 3], (0..batch * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
        .collect();
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let opts = if mode == ReadMode::Argmax {
        EpisodeOptions::eval()
    } else {
        EpisodeOptions::train(mode)
    };
    let ep = run_episode(&mut g, &model, &bound, &inputs, None, &opts, &SeedStream::new(seed).child("noise")).unwrap();
    (model, g, ep)
}

pub fn reads_are_one_hot_rows_of_memory(cases: u32) -> Result<(), String> {
    check(
        cases,
        (any::<u64>(), 1usize..6, 1usize..9, 1usize..4, 0usize..3),
        |(seed, k, steps, batch, m)| {
            let (model, g, ep) = episode(seed, k, steps, batch, mode_of(m));
            for (t, s) in ep.steps.iter().enumerate() {
                let d = s.decision.as_ref().unwrap();
                let content = g.value(ep.memories[t].content);
                let addresses = model.store.get(model.mem.as_ref().unwrap().addresses);
                let r = g.value(s.read.unwrap());
                for b in 0..batch {
                    let row = d.onehot.row(b);
                    prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                    prop_assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), k - 1);
                    prop_assert_eq!(row[d.indices[b]], 1.0);
                    let cell = d.indices[b];
                    prop_assert_eq!(&r.row(b)[..2], addresses.row(cell));
                    prop_assert_eq!(&r.row(b)[2..], content.row(b * k + cell));
                }
            }
            Ok(())
        },
    )
}

pub fn writes_fill_then_follow_reads(cases: u32) -> Result<(), String> {
    check(
        cases,
        (any::<u64>(), 1usize..6, 1usize..12, 1usize..4, 0usize..3),
        |(seed, k, steps, batch, m)| {
            let (_, g, ep) = episode(seed, k, steps, batch, mode_of(m));
            for (ti, s) in ep.steps.iter().enumerate() {
                let t = ti + 1;
                let d = s.decision.as_ref().unwrap();
                for b in 0..batch {
                    let expect = if t <= k { t - 1 } else { d.indices[b] };
                    prop_assert_eq!(s.written[b], expect);
                    // nothing but the written row changed
                    let before = g.value(ep.memories[ti].content);
                    let after = g.value(ep.memories[ti + 1].content);
                    for cell in 0..k {
                        if cell != expect {
                            prop_assert_eq!(before.row(b * k + cell), after.row(b * k + cell));
                        }
                    }
                }
            }
            Ok(())
        },
    )
}

pub fn last_read_cell_is_not_read_again(cases: u32) -> Result<(), String> {
    check(cases, (any::<u64>(), 2usize..6, 2usize..10, 0usize..3), |(seed, k, steps, m)| {
        let (_, _, ep) = episode(seed, k, steps, 2, mode_of(m));
        for w in ep.steps.windows(2) {
            let (a, b) = (w[0].decision.as_ref().unwrap(), w[1].decision.as_ref().unwrap());
            for e in 0..2 {
                prop_assert_ne!(a.indices[e], b.indices[e]);
            }
        }
        Ok(())
    })
}

pub fn usage_is_centered_and_scaled(cases: u32) -> Result<(), String> {
    check(cases, (proptest::collection::vec(0u32..50, 1..20), 1u32..5), |(counts, scale)| {
        let c: Vec<f64> = counts.iter().map(|&v| v as f64).collect();
        let u = normalize_usage(&c, USAGE_EPS);
        let n = u.len() as f64;
        let mean = u.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let var = u.iter().map(|v| v * v).sum::<f64>() / n;
        let distinct = c.iter().any(|&v| v != c[0]);
        if distinct {
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-4);
        } else {
            prop_assert!(u.iter().all(|&v| v == 0.0));
        }
        let scaled: Vec<f64> = c.iter().map(|v| v * scale as f64).collect();
        let us = normalize_usage(&scaled, USAGE_EPS);
        for (a, b) in u.iter().zip(&us) {
            prop_assert!((a - b).abs() < 1e-4);
        }
        Ok(())
    })
}

pub fn straight_through_forward_is_the_hard_value(cases: u32) -> Result<(), String> {
    check(
        cases,
        (proptest::collection::vec(-8.0f64..8.0, 12), proptest::collection::vec(0usize..4, 3)),
        |(vals, idx)| {
            let mut g = Graph::new();
            let logits = g.leaf(Tensor::new(vec![3, 4], vals).unwrap());
            let soft = g.softmax(logits).unwrap();
            let hard = Tensor::one_hot_rows(&idx, 4);
            let st = g.straight_through(hard.clone(), soft).unwrap();
            prop_assert_eq!(g.value(st), &hard);
            let w = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 - 5.0).collect()).unwrap());
            let y = g.mul(st, w).unwrap();
            let l = g.sum(y);
            let grads = g.backward(l).unwrap();
            // backward equals that of the soft weights alone
            let mut g2 = Graph::new();
            let logits2 = g2.leaf(g.value(logits).clone());
            let soft2 = g2.softmax(logits2).unwrap();
            let w2 = g2.constant(g.value(w).clone());
            let y2 = g2.mul(soft2, w2).unwrap();
            let l2 = g2.sum(y2);
            let grads2 = g2.backward(l2).unwrap();
            prop_assert_eq!(grads.get(logits), grads2.get(logits2));
            Ok(())
        },
    )
}

pub fn softmax_rows_sum_to_one(cases: u32) -> Result<(), String> {
    check(cases, (proptest::collection::vec(-700.0f64..700.0, 1..40), 1usize..8), |(vals, cols)| {
        let rows = vals.len() / cols;
        if rows == 0 {
            return Ok(());
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap());
        let s = g.softmax(x).unwrap();
        let v = g.value(s);
        for r in 0..rows {
            let row = v.row(r);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn checkpoint_round_trips_byte_for_byte(cases: u32) -> Result<(), String> {
    check(
        cases,
        (
            proptest::collection::vec(proptest::collection::vec(1usize..5, 0..3), 0..6),
            any::<u64>(),
            any::<u32>(),
        ),
        |(shapes, seed, step)| {
            let mut rng = SeedStream::new(seed).rng();
            let tensors: Vec<(String, Tensor)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|_| f64::from_bits(rng.random::<u64>() >> 2)).collect();
                    (format!("t{i}.w"), Tensor::new(s.clone(), data).unwrap())
                })
                .collect();
            let manifest = serde_json::json!({"seed": seed, "step": step, "note": "x"});
            let bytes = checkpoint::encode(&tensors, &manifest).unwrap();
            let (back, m) = checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(&m, &manifest);
            prop_assert_eq!(back.len(), tensors.len());
            for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                prop_assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            prop_assert_eq!(checkpoint::encode(&back, &m).unwrap(), bytes);
            Ok(())
        },
    )
}

#[test]
fn one_hot_reads() {
    reads_are_one_hot_rows_of_memory(CASES).unwrap();
}

#[test]
fn tied_writes() {
    writes_fill_then_follow_reads(CASES).unwrap();
}

#[test]
fn no_immediate_reread() {
    last_read_cell_is_not_read_again(CASES).unwrap();
}

#[test]
fn usage_normalization() {
    usage_is_centered_and_scaled(CASES).unwrap();
}

#[test]
fn straight_through() {
    straight_through_forward_is_the_hard_value(CASES).unwrap();
}

#[test]
fn softmax_normalization() {
    softmax_rows_sum_to_one(CASES).unwrap();
}

#[test]
fn checkpoint_round_trip() {
    checkpoint_round_trips_byte_for_byte(CASES).unwrap();
}

#[test]
fn model_checkpoint_round_trips() {
    let (model, _, _) = episode(3, 4, 2, 1, ReadMode::Argmax);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.trds");
    let manifest = serde_json::json!({"step": 1});
    checkpoint::save(&p, &model.store, &manifest).unwrap();
    let (tensors, m) = checkpoint::load(&p).unwrap();
    let mut fresh = Model::new(model.config, &SeedStream::new(99)).unwrap();
    checkpoint::restore(&mut fresh.store, &tensors).unwrap();
    for (a, b) in model.store.entries().iter().zip(fresh.store.entries()) {
        assert_eq!(a.value, b.value);
    }
    let again = dir.path().join("n.trds");
    checkpoint::save(&again, &fresh.store, &m).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_rejects_corruption() {
    let t = vec![("w".to_string(), Tensor::filled(&[2, 2], 1.5))];
    let bytes = checkpoint::encode(&t, &serde_json::json!({})).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(checkpoint::decode(&long).is_err());
    let mut store = tardis::params::ParamStore::new();
    store.add("w", Tensor::zeros(&[2, 3]));
    assert!(checkpoint::restore(&mut store, &t).is_err());
}
