//! Finite-difference gradient checks over named scopes of the model.

use serde::{Deserialize, Serialize};

use crate::addressing::ReadMode;
use crate::autodiff::{apply, check_gradients, GradCheckOptions, GradCheckReport, Graph, OpKind, Tensor, Var};
use crate::controller::{cell_update, gates, predict, preactivations, reset_gates, reset_noise, ControllerParams, ControllerState};
use crate::error::Result;
use crate::model::{run_episode, Architecture, EpisodeOptions, Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{Rng, SeedStream};

/// Acceptance threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Independent cases per scope.
pub const CASES: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScope {
    Ops,
    Controller,
    FullStep,
    GumbelSt,
}

impl GradScope {
    pub const ALL: [GradScope; 4] = [GradScope::Ops, GradScope::Controller, GradScope::FullStep, GradScope::GumbelSt];

    pub fn name(self) -> &'static str {
        match self {
            GradScope::Ops => "ops",
            GradScope::Controller => "controller",
            GradScope::FullStep => "full-step",
            GradScope::GumbelSt => "gumbel-st",
        }
    }

    pub fn parse(s: &str) -> Option<GradScope> {
        GradScope::ALL.into_iter().find(|m| m.name() == s)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Runs `scope` on [`CASES`] cases derived from `seed` and merges the
/// per-block results.
pub fn gradcheck_scope(scope: GradScope, seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        inject_fault,
        ..GradCheckOptions::default()
    };
    let root = SeedStream::new(seed).child("gradcheck").child(scope.name());
    let mut report = GradCheckReport::default();
    for case in 0..CASES {
        let stream = root.indexed("case", case);
        let r = match scope {
            GradScope::Ops => ops_case(&stream, opts)?,
            GradScope::Controller => controller_case(&stream, opts)?,
            GradScope::FullStep => step_case(&stream, opts, false)?,
            GradScope::GumbelSt => step_case(&stream, opts, true)?,
        };
        report.merge(r);
    }
    Ok(report)
}

type Case = (String, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn ops_case(stream: &SeedStream, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = stream.rng();
    let rng = &mut rng;
    let mut cases: Vec<Case> = Vec::new();
    let simple = [
        (OpKind::MatMul, vec![vec![3, 4], vec![4, 2]]),
        (OpKind::Add, vec![vec![3, 4], vec![1, 4]]),
        (OpKind::Mul, vec![vec![3, 4], vec![3, 1]]),
        (OpKind::Tanh, vec![vec![3, 4]]),
        (OpKind::Sigmoid, vec![vec![3, 4]]),
        (OpKind::Softplus, vec![vec![3, 4]]),
        (OpKind::Softmax, vec![vec![3, 4]]),
        (OpKind::Exp, vec![vec![3, 4]]),
        (OpKind::Concat, vec![vec![3, 2], vec![3, 3]]),
        (OpKind::Slice { start: 1, end: 3 }, vec![vec![3, 4]]),
        (OpKind::GatherRow { row: 2 }, vec![vec![3, 4]]),
        (OpKind::ScatterRow { row: 0 }, vec![vec![3, 4], vec![4]]),
        (OpKind::Sum, vec![vec![3, 4]]),
        (OpKind::Mean, vec![vec![3, 4]]),
    ];
    for (op, shapes) in simple {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(rng, s, -2.0, 2.0)).collect();
        let out_shape = {
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = apply(&mut g, &op, &v)?;
            g.shape(y).to_vec()
        };
        let w = uniform(rng, &out_shape, -1.0, 1.0);
        let name = op.name().to_string();
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let y = apply(g, &op, v)?;
                weighted_sum(g, y, &w)
            }),
        ));
    }

    let x = uniform(rng, &[3, 4], 0.25, 4.25);
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    cases.push((
        "log".into(),
        vec![x],
        Box::new(move |g, v| {
            let y = g.log(v[0]);
            weighted_sum(g, y, &w)
        }),
    ));

    let mut probs = uniform(rng, &[3, 4], 0.05, 1.0);
    for r in 0..3 {
        let s: f64 = probs.row(r).iter().sum();
        probs.row_mut(r).iter_mut().for_each(|p| *p /= s);
    }
    cases.push((
        "cross-entropy-with-softmax".into(),
        vec![uniform(rng, &[3, 4], -2.0, 2.0)],
        Box::new(move |g, v| {
            let l = g.softmax_cross_entropy(v[0], &probs)?;
            Ok(g.sum(l))
        }),
    ));

    let bits = uniform(rng, &[3, 4], 0.0, 1.0).map(|v| if v < 0.5 { 0.0 } else { 1.0 });
    cases.push((
        "bce-with-logits".into(),
        vec![uniform(rng, &[3, 4], -3.0, 3.0)],
        Box::new(move |g, v| {
            let l = g.bce_with_logits(v[0], &bits)?;
            Ok(g.sum(l))
        }),
    ));

    let w = uniform(rng, &[2, 3], -1.0, 1.0);
    cases.push((
        "mix-rows".into(),
        vec![uniform(rng, &[2, 3], 0.0, 1.0), uniform(rng, &[6, 3], -2.0, 2.0)],
        Box::new(move |g, v| {
            let y = g.mix_rows(v[0], v[1])?;
            weighted_sum(g, y, &w)
        }),
    ));

    let w = uniform(rng, &[5, 2], -1.0, 1.0);
    cases.push((
        "gather-rows/scatter-rows".into(),
        vec![uniform(rng, &[5, 2], -2.0, 2.0), uniform(rng, &[2, 2], -2.0, 2.0)],
        Box::new(move |g, v| {
            let gathered = g.gather_rows(v[0], &[4, 1])?;
            let t = g.tanh(gathered);
            let s = g.add(t, v[1])?;
            let y = g.scatter_rows(v[0], &[0, 3], s)?;
            weighted_sum(g, y, &w)
        }),
    ));

    let mut report = GradCheckReport::default();
    for (name, inputs, f) in cases {
        let params: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("{name}[{i}]"), t))
            .collect();
        let mut r = check_gradients(&*f, &params, opts)?;
        for b in &mut r.blocks {
            b.name = name.clone();
        }
        report.merge(r);
    }
    Ok(report)
}

fn jitter(store: &mut ParamStore, rng: &mut impl Rng) {
    for e in store.entries_mut().iter_mut().filter(|e| e.trainable) {
        e.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

fn controller_case(stream: &SeedStream, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (batch, d_h, d_x, d_r, d_out, steps) = (2, 6, 3, 4, 3, 4);
    let mut rng = stream.rng();
    let mut store = ParamStore::new();
    let p = ControllerParams::new(&mut store, d_h, d_x, d_r, d_out, &mut rng);
    jitter(&mut store, &mut rng);
    let xs: Vec<Tensor> = (0..steps).map(|_| uniform(&mut rng, &[batch, d_x], -1.0, 1.0)).collect();
    let noise: Vec<Tensor> = (0..steps).map(|_| reset_noise(&mut rng, batch)).collect();
    let targets: Vec<Tensor> = (0..steps)
        .map(|_| {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..d_out)).collect();
            Tensor::one_hot_rows(&idx, d_out)
        })
        .collect();
    let mut params = store.trainable_tensors();
    let n_store = params.len();
    for t in 0..steps {
        params.push((format!("input.r{t}"), uniform(&mut rng, &[batch, d_r], -1.0, 1.0)));
    }

    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let bound = store.bind_with(g, &v[..n_store]);
        let mut state = ControllerState::zeros(g, batch, d_h);
        let mut total = None;
        for t in 0..steps {
            let x = g.constant(xs[t].clone());
            let r = v[n_store + t];
            let pre = preactivations(g, &p, &bound, state.h, x, Some(r))?;
            let gs = gates(g, &p, &pre)?;
            let resets = reset_gates(g, &p, &pre, Some(&noise[t]))?;
            state = cell_update(g, &p, &state, &pre, &gs, Some(resets))?;
            let logits = predict(g, &p, &bound, state.h, Some(r))?;
            let ce = g.softmax_cross_entropy(logits, &targets[t])?;
            let l = g.sum(ce);
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        Ok(total.expect("at least one step"))
    };
    check_gradients(f, &params, opts)
}

/// Small TARDIS model used by the step-level checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        arch: Architecture::Tardis,
        d_x: 3,
        d_out: 3,
        d_h: 8,
        k: 3,
        a: 2,
        d_m: 4,
        d_att: 5,
        aux_head: true,
    }
}

/// Episode length of the step-level checks.
pub const CHECK_STEPS: usize = 6;

/// Full episodes with frozen read indices. `relaxed` forwards the
/// continuous Gumbel-softmax weights (the ST backward path) instead of the
/// one-hot reads.
fn step_case(stream: &SeedStream, opts: GradCheckOptions, relaxed: bool) -> Result<GradCheckReport> {
    let batch = 2;
    let mut model = Model::new(check_model_config(), &stream.child("model"))?;
    let mut rng = stream.child("data").rng();
    jitter(&mut model.store, &mut rng);
    let d_x = model.config.d_x;
    let d_out = model.config.d_out;
    let inputs: Vec<Tensor> = (0..CHECK_STEPS).map(|_| uniform(&mut rng, &[batch, d_x], -1.0, 1.0)).collect();
    let targets: Vec<Tensor> = (0..CHECK_STEPS)
        .map(|_| uniform(&mut rng, &[batch, d_out], 0.0, 1.0).map(|v| if v < 0.5 { 0.0 } else { 1.0 }))
        .collect();
    let coef: Vec<f64> = (0..CHECK_STEPS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mode = if relaxed { ReadMode::GumbelSt } else { ReadMode::ReinforceSample };

    // freeze the reads a sampled episode makes
    let noise = stream.child("noise");
    let forced = {
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let ep = run_episode(&mut g, &model, &bound, &inputs, None, &EpisodeOptions::train(mode), &noise)?;
        ep.steps
            .iter()
            .map(|s| s.decision.as_ref().expect("memory step").indices.clone())
            .collect::<Vec<_>>()
    };
    let ep_opts = EpisodeOptions {
        relaxed_reads: relaxed,
        forced_reads: Some(forced),
        ..EpisodeOptions::train(mode)
    };

    // the auxiliary head sees a detached read, so its loss is checked on
    // its own parameters with everything else held fixed
    let aux_only = {
        let model = model.clone();
        let (inputs, targets, ep_opts, noise) = (inputs.clone(), targets.clone(), ep_opts.clone(), noise);
        let params: Vec<(String, Tensor)> = model
            .store
            .trainable_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("aux."))
            .collect();
        let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let mut it = v.iter();
            let vars: Vec<Var> = model
                .store
                .entries()
                .iter()
                .filter(|e| e.trainable)
                .map(|e| match e.name.starts_with("aux.") {
                    true => *it.next().expect("aux leaf"),
                    false => g.constant(e.value.clone()),
                })
                .collect();
            let bound = model.store.bind_with(g, &vars);
            let ep = run_episode(g, &model, &bound, &inputs, None, &ep_opts, &noise)?;
            let mut total = None;
            for (t, s) in ep.steps.iter().enumerate() {
                let l = g.bce_with_logits(s.aux_logits.expect("aux head"), &targets[t])?;
                let l = g.sum(l);
                total = Some(match total {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
            Ok(total.expect("at least one step"))
        };
        check_gradients(f, &params, opts)?
    };

    let params: Vec<(String, Tensor)> = model
        .store
        .trainable_tensors()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("aux."))
        .collect();
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut it = v.iter();
        let vars: Vec<Var> = model
            .store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| match e.name.starts_with("aux.") {
                true => g.constant(e.value.clone()),
                false => *it.next().expect("leaf"),
            })
            .collect();
        let bound = model.store.bind_with(g, &vars);
        let ep = run_episode(g, &model, &bound, &inputs, None, &ep_opts, &noise)?;
        let mut terms = Vec::new();
        for (t, s) in ep.steps.iter().enumerate() {
            terms.push(g.bce_with_logits(s.logits, &targets[t])?);
            let lp = s.decision.as_ref().expect("memory step").log_prob;
            terms.push(g.scale(lp, coef[t]));
        }
        let mut total = g.sum(terms[0]);
        for &term in &terms[1..] {
            let s = g.sum(term);
            total = g.add(total, s)?;
        }
        Ok(total)
    };
    let mut report = check_gradients(f, &params, opts)?;
    report.merge(aux_only);
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatorBlock {
    pub name: String,
    /// `‖exact‖` of the score-function gradient.
    pub exact_norm: f64,
    /// `‖mc − exact‖ / ‖exact‖`, or the absolute difference when the exact
    /// gradient is below 1e−12.
    pub rel_err: f64,
}

/// Compares the Monte-Carlo mean of the REINFORCE term over `samples`
/// sampled episodes of a frozen two-cell, two-step model against the
/// gradient of `Σ_paths p(path) · L(path)` by enumeration, with the
/// losses held constant. Discount 1, constant baselines, no normalization.
pub fn reinforce_unbiasedness(seed: u64, samples: usize) -> Result<Vec<EstimatorBlock>> {
    use crate::tasks::{TargetKind, TaskBatch};
    use crate::training::{discounted_advantages, reinforce_surrogate, sequence_loss};

    let cfg = ModelConfig {
        arch: Architecture::Tardis,
        d_x: 2,
        d_out: 2,
        d_h: 4,
        k: 2,
        a: 2,
        d_m: 2,
        d_att: 3,
        aux_head: false,
    };
    let stream = SeedStream::new(seed).child("reinforce-check");
    let mut model = Model::new(cfg, &stream.child("model"))?;
    let mut rng = stream.child("data").rng();
    jitter(&mut model.store, &mut rng);
    let steps = 2;
    let x: Vec<Vec<f64>> = (0..steps).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let batch_of = |n: usize| -> Result<TaskBatch> {
        let rep = |rows: &Vec<f64>| Tensor::new(vec![n, 2], rows.iter().cycle().take(2 * n).copied().collect());
        Ok(TaskBatch {
            task: "reinforce-check".into(),
            kind: TargetKind::Bits,
            batch: n,
            d_x: 2,
            d_out: 2,
            inputs: x.iter().map(rep).collect::<Result<_>>()?,
            targets: y.iter().map(rep).collect::<Result<_>>()?,
            mask: vec![vec![true; n]; steps],
            lengths: vec![steps; n],
            labels: Vec::new(),
            feedback: None,
        })
    };
    let noise = stream.child("noise");
    let deterministic = EpisodeOptions {
        noisy_resets: false,
        ..EpisodeOptions::train(ReadMode::ReinforceSample)
    };
    let trainable: Vec<(String, usize)> = model
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, e)| (e.name.clone(), i))
        .collect();

    // exact: Σ_path ∇p(path) · L(path)
    let one = batch_of(1)?;
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let mut objective: Option<Var> = None;
    let mut path_losses = Vec::new();
    for path in 0..4usize {
        let forced = vec![vec![path & 1], vec![path >> 1]];
        let opts = EpisodeOptions {
            forced_reads: Some(forced),
            ..deterministic.clone()
        };
        let ep = run_episode(&mut g, &model, &bound, &one.inputs, None, &opts, &noise)?;
        let logits: Vec<Var> = ep.steps.iter().map(|s| s.logits).collect();
        let (_, rows) = sequence_loss(&mut g, &one, &logits)?;
        let loss: f64 = rows.iter().map(|r| r[0]).sum();
        let lp0 = ep.steps[0].decision.as_ref().expect("memory step").log_prob;
        let lp1 = ep.steps[1].decision.as_ref().expect("memory step").log_prob;
        let lp = g.add(lp0, lp1)?;
        let p = g.exp(lp);
        path_losses.push((g.value(p).item(), rows));
        let term = g.scale(p, loss);
        let term = g.sum(term);
        objective = Some(match objective {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let grads = g.backward(objective.expect("four paths"))?;
    let exact: Vec<Tensor> = trainable.iter().map(|&(_, i)| grads.get(bound.vars()[i])).collect();

    // constant baselines: the exact expected per-step rewards
    let baselines: Vec<f64> = (0..steps)
        .map(|t| -path_losses.iter().map(|(p, rows)| p * rows[t][0]).sum::<f64>())
        .collect();

    let many = batch_of(samples)?;
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let ep = run_episode(&mut g, &model, &bound, &many.inputs, None, &deterministic, &noise)?;
    let logits: Vec<Var> = ep.steps.iter().map(|s| s.logits).collect();
    let (_, rows) = sequence_loss(&mut g, &many, &logits)?;
    let mut adv = vec![vec![0.0; samples]; steps];
    for b in 0..samples {
        let r: Vec<f64> = (0..steps).map(|t| -rows[t][b]).collect();
        for (t, a) in discounted_advantages(&r, &baselines, 1.0).into_iter().enumerate() {
            adv[t][b] = a;
        }
    }
    let lps: Vec<Var> = ep
        .steps
        .iter()
        .map(|s| s.decision.as_ref().expect("memory step").log_prob)
        .collect();
    let surrogate = reinforce_surrogate(&mut g, &lps, &adv)?;
    let grads = g.backward(surrogate)?;

    Ok(trainable
        .iter()
        .zip(&exact)
        .map(|((name, i), ex)| {
            let mc = grads.get(bound.vars()[*i]);
            let diff: f64 = mc.data().iter().zip(ex.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = ex.norm();
            EstimatorBlock {
                name: name.clone(),
                exact_norm: norm,
                rel_err: if norm > 1e-12 { diff / norm } else { diff },
            }
        })
        .collect())
}
