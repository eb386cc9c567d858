//! Losses, the REINFORCE estimator with its baselines and normalization,
//! the optimizer, and the batched update step.

use serde::{Deserialize, Serialize};

use crate::addressing::ReadMode;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{run_episode, Episode, EpisodeOptions, Model};
use crate::params::ParamStore;
use crate::rng::SeedStream;
use crate::tasks::{per_digit_error, scored_classes, TargetKind, TaskBatch};

/// Clamp applied inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "reinforce-aux")]
    ReinforceAux,
    #[serde(rename = "reinforce-R")]
    ReinforceR,
    #[serde(rename = "gumbel-st")]
    GumbelSt,
    #[serde(rename = "lstm-baseline")]
    LstmBaseline,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::ReinforceAux,
        TrainMode::ReinforceR,
        TrainMode::GumbelSt,
        TrainMode::LstmBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::ReinforceAux => "reinforce-aux",
            TrainMode::ReinforceR => "reinforce-R",
            TrainMode::GumbelSt => "gumbel-st",
            TrainMode::LstmBaseline => "lstm-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn read_mode(self) -> ReadMode {
        match self {
            TrainMode::GumbelSt => ReadMode::GumbelSt,
            _ => ReadMode::ReinforceSample,
        }
    }

    pub fn uses_reinforce(self) -> bool {
        matches!(self, TrainMode::ReinforceAux | TrainMode::ReinforceR)
    }
}

/// Mean negative log-likelihood of probability rows over the scored
/// `(episode, step)` pairs; for bit targets, the mean per-bit Bernoulli
/// cross-entropy. `probs[t]` is `batch × d_out`.
pub fn nll_loss(probs: &[Tensor], targets: &[Tensor], mask: &[Vec<bool>], kind: TargetKind) -> Result<f64> {
    if probs.len() != targets.len() || probs.len() != mask.len() {
        return Err(Error::invalid("nll_loss", "predictions, targets and mask differ in length"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, y), m) in probs.iter().zip(targets).zip(mask) {
        if p.shape() != y.shape() {
            return Err(Error::shape("nll_loss", p.shape(), y.shape()));
        }
        for (b, &scored) in m.iter().enumerate() {
            if !scored {
                continue;
            }
            let (pr, yr) = (p.row(b), y.row(b));
            match kind {
                TargetKind::Classes => {
                    total -= pr.iter().zip(yr).map(|(&pi, &yi)| yi * pi.max(LOG_EPS).ln()).sum::<f64>();
                    count += 1;
                }
                TargetKind::Bits => {
                    total -= pr
                        .iter()
                        .zip(yr)
                        .map(|(&pi, &yi)| yi * pi.max(LOG_EPS).ln() + (1.0 - yi) * (1.0 - pi).max(LOG_EPS).ln())
                        .sum::<f64>();
                    count += yr.len();
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Differentiable mean loss of per-step logits against a batch, plus the
/// per-`[t][b]` summed losses (zero on unscored steps).
pub fn sequence_loss(g: &mut Graph, batch: &TaskBatch, logits: &[Var]) -> Result<(Var, Vec<Vec<f64>>)> {
    let mut rows_loss = vec![vec![0.0; batch.batch]; logits.len()];
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (t, &l) in logits.iter().enumerate() {
        let rows: Vec<usize> = (0..batch.batch).filter(|&b| batch.mask[t][b]).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = g.gather_rows(l, &rows)?;
        let d_out = batch.d_out;
        let mut tgt = Vec::with_capacity(rows.len() * d_out);
        for &b in &rows {
            tgt.extend_from_slice(batch.targets[t].row(b));
        }
        let tgt = Tensor::new(vec![rows.len(), d_out], tgt)?;
        let per_row = match batch.kind {
            TargetKind::Bits => g.bce_with_logits(sub, &tgt)?,
            TargetKind::Classes => g.softmax_cross_entropy(sub, &tgt)?,
        };
        for (&b, &v) in rows.iter().zip(g.value(per_row).data()) {
            rows_loss[t][b] = v;
        }
        count += match batch.kind {
            TargetKind::Bits => rows.len() * d_out,
            TargetKind::Classes => rows.len(),
        };
        let s = g.sum(per_row);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => g.scale(t, 1.0 / count as f64),
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok((total, rows_loss))
}

/// `A_t = Σ_{j≥t} γ^{j−t} (R_j − b_j)` by a reverse pass.
pub fn discounted_advantages(rewards: &[f64], baselines: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = (rewards[t] - baselines[t]) + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `−(1/B) Σ_t Σ_b A[t][b] · log w̄_t[b][index]`. The advantages enter as
/// constants.
pub fn reinforce_surrogate(g: &mut Graph, log_probs: &[Var], advantages: &[Vec<f64>]) -> Result<Var> {
    if log_probs.len() != advantages.len() {
        return Err(Error::invalid("reinforce_surrogate", "one advantage row per step required"));
    }
    let mut total: Option<Var> = None;
    let mut batch = 1;
    for (&lp, adv) in log_probs.iter().zip(advantages) {
        batch = adv.len();
        let a = g.constant(Tensor::vector(adv.clone()));
        let term = g.matmul(lp, a)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => g.scale(t, -1.0 / batch as f64),
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// `R′ = Σ_k y[k] log softmax(W_r r̄ + W_x x + b)[k]` for class targets, or
/// the summed Bernoulli log-likelihood for bit targets, from the
/// auxiliary logits.
pub fn auxiliary_reward(aux_logits: &[f64], y: &[f64], kind: TargetKind) -> f64 {
    match kind {
        TargetKind::Classes => {
            let max = aux_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + aux_logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            aux_logits.iter().zip(y).map(|(l, yk)| yk * (l - lse)).sum()
        }
        TargetKind::Bits => aux_logits
            .iter()
            .zip(y)
            .map(|(&l, &yk)| -(softplus(l) - yk * l))
            .sum(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-position exponential moving average of rewards.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub decay: f64,
    pub values: Vec<f64>,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        RewardBaseline {
            decay,
            values: Vec::new(),
        }
    }

    /// Baselines for `steps` positions, as frozen before this batch.
    pub fn current(&self, steps: usize) -> Vec<f64> {
        (0..steps).map(|t| self.values.get(t).copied().unwrap_or(0.0)).collect()
    }

    /// Folds in the batch-mean reward of every position.
    pub fn update(&mut self, mean_rewards: &[f64]) {
        if self.values.len() < mean_rewards.len() {
            self.values.resize(mean_rewards.len(), 0.0);
        }
        for (v, &r) in self.values.iter_mut().zip(mean_rewards) {
            *v = self.decay * *v + (1.0 - self.decay) * r;
        }
    }
}

/// Running mean and variance of advantages; scaling divides by
/// `max(√var, 1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceNormalizer {
    pub decay: f64,
    pub mean: f64,
    pub var: f64,
}

impl VarianceNormalizer {
    pub fn new(decay: f64) -> Self {
        VarianceNormalizer {
            decay,
            mean: 0.0,
            var: 1.0,
        }
    }

    /// Scales `advs` with the current statistics, then updates them.
    pub fn apply(&mut self, advs: &mut [f64]) {
        if advs.is_empty() {
            return;
        }
        let div = self.var.sqrt().max(1.0);
        let n = advs.len() as f64;
        let d = self.decay;
        self.mean = d * self.mean + (1.0 - d) * advs.iter().sum::<f64>() / n;
        let v = advs.iter().map(|a| (a - self.mean).powi(2)).sum::<f64>() / n;
        self.var = d * self.var + (1.0 - d) * v;
        advs.iter_mut().for_each(|a| *a /= div);
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                let gr = grads[i].data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` to global norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Optimizer-side settings of a run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct UpdateSettings {
    pub mode: TrainMode,
    pub lr: f64,
    pub gamma: f64,
    pub clip: f64,
}

/// Model plus optimizer and estimator state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub settings: UpdateSettings,
    pub adam: Adam,
    pub baseline: RewardBaseline,
    pub normalizer: VarianceNormalizer,
    pub updates: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub aux_loss: f64,
    pub grad_norm: f64,
}

/// Everything an update step builds, for inspection.
pub struct BatchGraph {
    pub graph: Graph,
    pub episode: Episode,
    pub loss: Var,
    pub aux_loss: Option<Var>,
    pub surrogate: Option<Var>,
    pub total: Var,
    pub bound: crate::params::Bound,
}

impl Learner {
    pub fn new(model: Model, settings: UpdateSettings) -> Self {
        let adam = Adam::new(&model.store, settings.lr);
        Learner {
            model,
            settings,
            adam,
            baseline: RewardBaseline::new(0.9),
            normalizer: VarianceNormalizer::new(0.99),
            updates: 0,
        }
    }

    /// Builds the training objective for one batch; updates the REINFORCE
    /// baseline and normalizer statistics.
    pub fn objective(&mut self, batch: &TaskBatch, stream: &SeedStream) -> Result<BatchGraph> {
        let mode = self.settings.mode;
        let mut g = Graph::new();
        let bound = self.model.store.bind(&mut g);
        let opts = EpisodeOptions::train(mode.read_mode());
        let episode = run_episode(&mut g, &self.model, &bound, &batch.inputs, batch.feedback.as_ref(), &opts, stream)?;
        let logits: Vec<Var> = episode.steps.iter().map(|s| s.logits).collect();
        let (loss, main_rows) = sequence_loss(&mut g, batch, &logits)?;
        let mut total = loss;

        let mut aux_loss = None;
        let mut aux_rows = None;
        if self.model.aux.is_some() {
            let al: Vec<Var> = episode.steps.iter().map(|s| s.aux_logits.unwrap()).collect();
            let (l, rows) = sequence_loss(&mut g, batch, &al)?;
            total = g.add(total, l)?;
            aux_loss = Some(l);
            aux_rows = Some(rows);
        }

        let mut surrogate = None;
        if mode.uses_reinforce() {
            let rows = match mode {
                TrainMode::ReinforceAux => aux_rows.as_ref().expect("aux head"),
                _ => &main_rows,
            };
            // rewards are log-likelihoods on scored steps
            let steps = rows.len();
            let rewards: Vec<Vec<f64>> = (0..steps)
                .map(|t| (0..batch.batch).map(|b| if batch.mask[t][b] { -rows[t][b] } else { 0.0 }).collect())
                .collect();
            let base = self.baseline.current(steps);
            let mut adv = vec![vec![0.0; batch.batch]; steps];
            for b in 0..batch.batch {
                let r: Vec<f64> = (0..steps).map(|t| rewards[t][b]).collect();
                for (t, a) in discounted_advantages(&r, &base, self.settings.gamma).into_iter().enumerate() {
                    adv[t][b] = a;
                }
            }
            let mut flat: Vec<f64> = adv.iter().flatten().copied().collect();
            self.normalizer.apply(&mut flat);
            for (t, row) in adv.iter_mut().enumerate() {
                row.copy_from_slice(&flat[t * batch.batch..(t + 1) * batch.batch]);
            }
            let means: Vec<f64> = rewards.iter().map(|r| r.iter().sum::<f64>() / batch.batch as f64).collect();
            self.baseline.update(&means);
            let lps: Vec<Var> = episode
                .steps
                .iter()
                .map(|s| s.decision.as_ref().expect("memory model").log_prob)
                .collect();
            let s = reinforce_surrogate(&mut g, &lps, &adv)?;
            total = g.add(total, s)?;
            surrogate = Some(s);
        }
        Ok(BatchGraph {
            graph: g,
            episode,
            loss,
            aux_loss,
            surrogate,
            total,
            bound,
        })
    }

    /// One optimizer update on `batch`.
    pub fn update(&mut self, batch: &TaskBatch, stream: &SeedStream) -> Result<UpdateStats> {
        let bg = self.objective(batch, stream)?;
        let g = &bg.graph;
        let loss = g.value(bg.loss).item();
        let aux_loss = bg.aux_loss.map(|a| g.value(a).item()).unwrap_or(0.0);
        if !g.value(bg.total).item().is_finite() {
            return Err(Error::NonFinite {
                what: format!("training objective at update {}", self.updates + 1),
            });
        }
        let grads = g.backward(bg.total)?;
        let mut acc = self.model.store.zeros_like();
        self.model.store.accumulate(&bg.bound, &grads, &mut acc, 1.0);
        if !acc.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite {
                what: format!("gradients at update {}", self.updates + 1),
            });
        }
        let grad_norm = clip_global_norm(&mut acc, self.settings.clip);
        self.adam.step(&mut self.model.store, &acc);
        self.updates += 1;
        Ok(UpdateStats {
            loss,
            aux_loss,
            grad_norm,
        })
    }
}

/// Deterministic evaluation metrics over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean main-head loss (per bit for bit tasks).
    pub loss: f64,
    /// Mean auxiliary-head loss, when the model has one.
    pub aux_loss: Option<f64>,
    /// Per-digit error for class tasks.
    pub error: Option<f64>,
    /// Scored predictions the means are taken over.
    pub count: usize,
}

/// Runs `batch` with argmax reads, deterministic RESET gates and free
/// running feedback.
pub fn evaluate(model: &Model, batch: &TaskBatch) -> Result<EvalStats> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let ep = run_episode(
        &mut g,
        model,
        &bound,
        &batch.inputs,
        batch.feedback.as_ref(),
        &EpisodeOptions::eval(),
        &SeedStream::new(0),
    )?;
    let logits: Vec<Var> = ep.steps.iter().map(|s| s.logits).collect();
    let (loss, _) = sequence_loss(&mut g, batch, &logits)?;
    let aux_loss = if model.aux.is_some() {
        let al: Vec<Var> = ep.steps.iter().map(|s| s.aux_logits.unwrap()).collect();
        let (l, _) = sequence_loss(&mut g, batch, &al)?;
        Some(g.value(l).item())
    } else {
        None
    };
    let error = match batch.kind {
        TargetKind::Classes => {
            let vals: Vec<Tensor> = logits.iter().map(|&l| g.value(l).clone()).collect();
            let (p, t) = scored_classes(batch, &vals);
            Some(per_digit_error(&p, &t)?)
        }
        TargetKind::Bits => None,
    };
    let count = match batch.kind {
        TargetKind::Bits => batch.scored() * batch.d_out,
        TargetKind::Classes => batch.scored(),
    };
    Ok(EvalStats {
        loss: g.value(loss).item(),
        aux_loss,
        error,
        count,
    })
}

/// Count-weighted mean of evaluation stats over several batches.
pub fn merge_eval(stats: &[EvalStats]) -> EvalStats {
    let n: usize = stats.iter().map(|s| s.count).sum();
    let w = |f: &dyn Fn(&EvalStats) -> Option<f64>| -> Option<f64> {
        let mut acc = 0.0;
        for s in stats {
            acc += f(s)? * s.count as f64;
        }
        Some(acc / n.max(1) as f64)
    };
    EvalStats {
        loss: w(&|s| Some(s.loss)).unwrap_or(0.0),
        aux_loss: w(&|s| s.aux_loss),
        error: w(&|s| s.error),
        count: n,
    }
}
