//! LSTM controller whose gates also see the memory read, with scalar
//! RESET gates on the candidate update and a deep-fusion output head.
//!
//! The `h`, `x` and `r` weight matrices each carry `4·d_h + 2` columns laid
//! out as `[f | i | o | g | α | β]`, so one product per input serves the
//! three gates, the candidate and both RESET gates.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// Temperature of the Gumbel-sigmoid RESET gates.
pub const RESET_TEMPERATURE: f64 = 0.3;

#[derive(Clone, Copy, Debug)]
pub struct ControllerParams {
    pub d_h: usize,
    pub w_h: ParamId,
    pub w_x: ParamId,
    /// Absent for the plain LSTM baseline.
    pub w_r: Option<ParamId>,
    pub bias: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ControllerParams {
    /// `d_r = 0` builds a plain LSTM (no read input, no RESET gates).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_h: usize,
        d_x: usize,
        d_r: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let cols = if d_r > 0 { 4 * d_h + 2 } else { 4 * d_h };
        let mut bias = Tensor::zeros(&[cols]);
        bias.data_mut()[..d_h].iter_mut().for_each(|b| *b = 1.0);
        ControllerParams {
            d_h,
            w_h: store.add("ctrl.w_h", glorot(rng, d_h, cols)),
            w_x: store.add("ctrl.w_x", glorot(rng, d_x, cols)),
            w_r: (d_r > 0).then(|| store.add("ctrl.w_r", glorot(rng, d_r, cols))),
            bias: store.add("ctrl.bias", bias),
            fuse_w: store.add("out.fuse_w", glorot(rng, d_h + d_r, d_h)),
            fuse_b: store.add("out.fuse_b", Tensor::zeros(&[d_h])),
            out_w: store.add("out.w", glorot(rng, d_h, d_out)),
            out_b: store.add("out.b", Tensor::zeros(&[d_out])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerState {
    /// `batch × d_h`.
    pub h: Var,
    pub cell: Var,
}

impl ControllerState {
    pub fn zeros(g: &mut Graph, batch: usize, d_h: usize) -> Self {
        ControllerState {
            h: g.constant(Tensor::zeros(&[batch, d_h])),
            cell: g.constant(Tensor::zeros(&[batch, d_h])),
        }
    }
}

/// Per-input products for one step; see the module docs for the layout.
#[derive(Clone, Copy, Debug)]
pub struct Preactivations {
    hw: Var,
    xw: Var,
    rw: Option<Var>,
    bias: Var,
    total: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub f: Var,
    pub i: Var,
    pub o: Var,
}

pub fn preactivations(
    g: &mut Graph,
    p: &ControllerParams,
    bound: &Bound,
    h_prev: Var,
    x: Var,
    r: Option<Var>,
) -> Result<Preactivations> {
    let hw = g.matmul(h_prev, bound.var(p.w_h))?;
    let xw = g.matmul(x, bound.var(p.w_x))?;
    let bias = bound.var(p.bias);
    let mut total = g.add(hw, xw)?;
    let rw = match (r, p.w_r) {
        (Some(r), Some(w_r)) => {
            let rw = g.matmul(r, bound.var(w_r))?;
            total = g.add(total, rw)?;
            Some(rw)
        }
        _ => None,
    };
    let total = g.add(total, bias)?;
    Ok(Preactivations {
        hw,
        xw,
        rw,
        bias,
        total,
    })
}

/// `(f, i, o) = σ(W_h h + W_x x + W_r r + b)`.
pub fn gates(g: &mut Graph, p: &ControllerParams, pre: &Preactivations) -> Result<Gates> {
    let d = p.d_h;
    let z = g.slice(pre.total, 0, 3 * d)?;
    let s = g.sigmoid(z);
    Ok(Gates {
        f: g.slice(s, 0, d)?,
        i: g.slice(s, d, 2 * d)?,
        o: g.slice(s, 2 * d, 3 * d)?,
    })
}

/// `(α, β)`, each `batch × 1`. `noise`, when given, holds `g₁ − g₂` per
/// episode and gate (`batch × 2`) and selects the training-mode
/// Gumbel-sigmoid.
pub fn reset_gates(g: &mut Graph, p: &ControllerParams, pre: &Preactivations, noise: Option<&Tensor>) -> Result<(Var, Var)> {
    let d = p.d_h;
    let mut s = g.slice(pre.total, 4 * d, 4 * d + 2)?;
    if let Some(n) = noise {
        let n = g.constant(n.clone());
        s = g.add(s, n)?;
    }
    let s = g.scale(s, 1.0 / RESET_TEMPERATURE);
    let ab = g.sigmoid(s);
    Ok((g.slice(ab, 0, 1)?, g.slice(ab, 1, 2)?))
}

/// Draws `g₁ − g₂` for every episode and RESET gate.
pub fn reset_noise<R: Rng + ?Sized>(rng: &mut R, batch: usize) -> Tensor {
    let data = (0..batch * 2)
        .map(|_| crate::rng::gumbel(rng) - crate::rng::gumbel(rng))
        .collect();
    Tensor::new(vec![batch, 2], data).expect("noise shape")
}

/// `c̃ = tanh(β·W_h^g h + W_x^g x + α·W_r^g r + b_g)`,
/// `cell′ = f ⊙ cell + i ⊙ c̃`, `h′ = o ⊙ tanh(cell′)`.
///
/// With `resets = None` (plain LSTM) the candidate is unscaled.
pub fn cell_update(
    g: &mut Graph,
    p: &ControllerParams,
    state: &ControllerState,
    pre: &Preactivations,
    gates: &Gates,
    resets: Option<(Var, Var)>,
) -> Result<ControllerState> {
    let d = p.d_h;
    let (lo, hi) = (3 * d, 4 * d);
    let mut hg = g.slice(pre.hw, lo, hi)?;
    let xg = g.slice(pre.xw, lo, hi)?;
    let bg = g.slice(pre.bias, lo, hi)?;
    let mut rg = match pre.rw {
        Some(rw) => Some(g.slice(rw, lo, hi)?),
        None => None,
    };
    if let Some((alpha, beta)) = resets {
        hg = g.mul(hg, beta)?;
        rg = match rg {
            Some(rg) => Some(g.mul(rg, alpha)?),
            None => None,
        };
    }
    let mut z = g.add(hg, xg)?;
    if let Some(rg) = rg {
        z = g.add(z, rg)?;
    }
    let z = g.add(z, bg)?;
    let cand = g.tanh(z);
    let keep = g.mul(gates.f, state.cell)?;
    let fresh = g.mul(gates.i, cand)?;
    let cell = g.add(keep, fresh)?;
    let tc = g.tanh(cell);
    let h = g.mul(gates.o, tc)?;
    Ok(ControllerState { h, cell })
}

/// Output logits `W^o tanh(W_f [h; r] + b_f) + b_o`; `r = None` fuses `h`
/// alone.
pub fn predict(g: &mut Graph, p: &ControllerParams, bound: &Bound, h: Var, r: Option<Var>) -> Result<Var> {
    let inp = match r {
        Some(r) => g.concat(&[h, r])?,
        None => h,
    };
    let z = g.matmul(inp, bound.var(p.fuse_w))?;
    let z = g.add(z, bound.var(p.fuse_b))?;
    let fused = g.tanh(z);
    let o = g.matmul(fused, bound.var(p.out_w))?;
    g.add(o, bound.var(p.out_b))
}
