//! Read-weight generation: an MLP scores every cell from the controller
//! state, the input, the cell itself and the usage statistics; the last
//! read cell is penalized; the result is discretized to a one-hot read.

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::rng::{gumbel, sample_categorical, Rng};

/// Logit penalty applied to the cell read on the previous step.
pub const LAST_READ_PENALTY: f64 = 100.0;

/// Added to the standard deviation when normalizing usage counts.
pub const USAGE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadMode {
    /// Sample from `softmax(π)`; trained with REINFORCE.
    ReinforceSample,
    /// Gumbel-softmax with a learned inverse temperature and a
    /// straight-through backward pass.
    GumbelSt,
    /// Deterministic argmax, used for evaluation.
    Argmax,
}

#[derive(Clone, Copy, Debug)]
pub struct AddressingParams {
    pub w_h: ParamId,
    pub w_x: ParamId,
    pub w_m: ParamId,
    pub w_u: ParamId,
    pub bias: ParamId,
    /// Output vector `a` of the scoring MLP, `d_att × 1`.
    pub score: ParamId,
    pub w_tau: ParamId,
    pub b_tau: ParamId,
}

impl AddressingParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_h: usize,
        d_x: usize,
        width: usize,
        k: usize,
        d_att: usize,
        rng: &mut R,
    ) -> Self {
        AddressingParams {
            w_h: store.add("addr.w_h", glorot(rng, d_h, d_att)),
            w_x: store.add("addr.w_x", glorot(rng, d_x, d_att)),
            w_m: store.add("addr.w_m", glorot(rng, width, d_att)),
            w_u: store.add("addr.w_u", glorot(rng, k, d_att)),
            bias: store.add("addr.bias", Tensor::zeros(&[d_att])),
            score: store.add("addr.score", glorot(rng, d_att, 1)),
            w_tau: store.add("addr.w_tau", glorot(rng, d_h, 1)),
            b_tau: store.add("addr.b_tau", Tensor::zeros(&[1])),
        }
    }
}

/// Everything one addressing event produces, for a batch of episodes.
#[derive(Clone, Debug)]
pub struct ReadDecision {
    /// Masked logits `π′`, `batch × k`.
    pub logits: Var,
    /// Continuous weights `w̄`, `batch × k`, rows on the simplex.
    pub weights: Var,
    pub onehot: Tensor,
    pub indices: Vec<usize>,
    /// `log w̄[index]` per episode, shape `[batch]`.
    pub log_prob: Var,
    /// Inverse temperature `τ ≥ 1`, `batch × 1`; Gumbel mode only.
    pub temperature: Option<Var>,
}

/// Feature-wise centering followed by division by `std + eps`.
pub fn normalize_usage(counts: &[f64], eps: f64) -> Vec<f64> {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    counts
        .iter()
        .map(|c| {
            let centered = c - mean;
            if centered == 0.0 {
                0.0
            } else {
                centered / denom
            }
        })
        .collect()
}

/// Adds this step's one-hot reads to the counts and returns the normalized
/// usage rows, `batch × k`.
pub fn update_usage(counts: &mut [u32], indices: &[usize], k: usize) -> Tensor {
    for (b, &i) in indices.iter().enumerate() {
        counts[b * k + i] += 1;
    }
    usage_tensor(counts, k)
}

pub fn usage_tensor(counts: &[u32], k: usize) -> Tensor {
    let batch = counts.len() / k;
    let mut data = Vec::with_capacity(counts.len());
    for b in 0..batch {
        let row: Vec<f64> = counts[b * k..(b + 1) * k].iter().map(|&c| c as f64).collect();
        data.extend(normalize_usage(&row, USAGE_EPS));
    }
    Tensor::new(vec![batch, k], data).expect("usage shape")
}

/// `π[b,i] = aᵀ tanh(W_h h_b + W_x x_b + W_m M_b[i] + W_u u_b + bias)`.
///
/// `h` is `batch × d_h`, `x` is `batch × d_x`, `memory` is `(batch·k) × q`
/// and `usage` is `batch × k`. Returns `batch × k`.
pub fn read_logits(
    g: &mut Graph,
    p: &AddressingParams,
    bound: &Bound,
    h: Var,
    x: Var,
    memory: Var,
    usage: Var,
) -> Result<Var> {
    let batch = g.shape(h)[0];
    let k = g.shape(usage)[1];
    if g.shape(memory)[0] != batch * k {
        return Err(Error::shape("read_logits", g.shape(memory), &[batch * k]));
    }
    let hh = g.matmul(h, bound.var(p.w_h))?;
    let xx = g.matmul(x, bound.var(p.w_x))?;
    let uu = g.matmul(usage, bound.var(p.w_u))?;
    let ctx = g.add(hh, xx)?;
    let ctx = g.add(ctx, uu)?;
    let ctx = g.add(ctx, bound.var(p.bias))?;
    let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, k)).collect();
    let ctx = g.gather_rows(ctx, &rows)?;
    let cells = g.matmul(memory, bound.var(p.w_m))?;
    let pre = g.add(cells, ctx)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, bound.var(p.score))?;
    g.reshape(scores, vec![batch, k])
}

/// Subtracts [`LAST_READ_PENALTY`] from the logit of each episode's last
/// read cell.
pub fn mask_last_read(g: &mut Graph, logits: Var, last_read: &[Option<usize>]) -> Result<Var> {
    if last_read.iter().all(Option::is_none) {
        return Ok(logits);
    }
    let shape = g.shape(logits).to_vec();
    let k = *shape.last().unwrap();
    let mut mask = Tensor::zeros(&shape);
    for (b, last) in last_read.iter().enumerate() {
        if let Some(i) = last {
            mask.data_mut()[b * k + i] = -LAST_READ_PENALTY;
        }
    }
    let m = g.constant(mask);
    g.add(logits, m)
}

/// Turns masked logits into a [`ReadDecision`].
///
/// `forced` pins the chosen indices (noise is still drawn so the
/// continuous weights are those the mode would produce).
#[allow(clippy::too_many_arguments)]
pub fn discretize<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &AddressingParams,
    bound: &Bound,
    logits: Var,
    h: Var,
    mode: ReadMode,
    forced: Option<&[usize]>,
    rng: &mut R,
) -> Result<ReadDecision> {
    let lv = g.value(logits).clone();
    if !lv.all_finite() {
        return Err(Error::NonFinite {
            what: "read logits".into(),
        });
    }
    let (batch, k) = lv.as_matrix();

    let (scores, temperature) = match mode {
        ReadMode::GumbelSt => {
            let pre = g.matmul(h, bound.var(p.w_tau))?;
            let pre = g.add(pre, bound.var(p.b_tau))?;
            let sp = g.softplus(pre);
            let tau = g.add_scalar(sp, 1.0);
            let noise: Vec<f64> = (0..batch * k).map(|_| gumbel(rng)).collect();
            let xi = g.constant(Tensor::new(vec![batch, k], noise)?);
            let noisy = g.add(logits, xi)?;
            (g.mul(noisy, tau)?, Some(tau))
        }
        ReadMode::ReinforceSample | ReadMode::Argmax => (logits, None),
    };
    let weights = g.softmax(scores)?;

    let indices: Vec<usize> = match forced {
        Some(f) => {
            if f.len() != batch || f.iter().any(|&i| i >= k) {
                return Err(Error::invalid("discretize", format!("bad forced reads {f:?}")));
            }
            f.to_vec()
        }
        None => {
            let w = g.value(weights);
            let z = g.value(scores);
            match mode {
                ReadMode::ReinforceSample => (0..batch).map(|b| sample_categorical(rng, w.row(b))).collect(),
                ReadMode::GumbelSt => (0..batch).map(|b| argmax(z.row(b))).collect(),
                ReadMode::Argmax => (0..batch).map(|b| argmax(lv.row(b))).collect(),
            }
        }
    };
    let onehot = Tensor::one_hot_rows(&indices, k);
    let nll = g.softmax_cross_entropy(scores, &onehot)?;
    let log_prob = g.neg(nll);

    Ok(ReadDecision {
        logits,
        weights,
        onehot,
        indices,
        log_prob,
        temperature,
    })
}
