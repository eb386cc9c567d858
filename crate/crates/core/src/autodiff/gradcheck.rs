//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative error, so that two gradients that are
/// both numerically zero compare as equal.
pub const REL_ERR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BlockReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub non_finite: usize,
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn non_finite(&self) -> usize {
        self.blocks.iter().map(|b| b.non_finite).sum()
    }

    /// True when every block is finite and below `tol`.
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite() == 0 && self.max_rel_err() < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        for b in other.blocks {
            match self.blocks.iter_mut().find(|x| x.name == b.name) {
                Some(x) => {
                    x.elements += b.elements;
                    x.max_rel_err = x.max_rel_err.max(b.max_rel_err);
                    x.max_abs_err = x.max_abs_err.max(b.max_abs_err);
                    x.non_finite += b.non_finite;
                }
                None => self.blocks.push(b),
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Perturbs the analytic gradient before comparison; used to prove the
    /// checker can fail.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 3e-4,
            inject_fault: false,
        }
    }
}

/// Compares reverse-mode gradients of `f` against the fourth-order central
/// difference `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`, element by
/// element.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar. It must be deterministic: any sampling has to be frozen
/// before the call.
pub fn check_gradients<F>(f: F, params: &[(String, Tensor)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::invalid("check_gradients", "function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    if opts.inject_fault {
        if let Some(t) = analytic.iter_mut().find(|t| !t.is_empty()) {
            let d = t.data_mut();
            d[0] = d[0] * 1.01 + 1e-3;
        }
    }

    let h = opts.step;
    let mut report = GradCheckReport::default();
    for (p, (name, _)) in params.iter().enumerate() {
        let mut block = BlockReport {
            name: name.clone(),
            elements: values[p].len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            non_finite: 0,
        };
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            let mut at = |x: f64| -> Result<f64> {
                values[p].data_mut()[i] = x;
                eval(&values)
            };
            let (f1, b1) = (at(orig + h)?, at(orig - h)?);
            let (f2, b2) = (at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            values[p].data_mut()[i] = orig;
            let numeric = (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * h);
            let a = analytic[p].data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                block.non_finite += 1;
                continue;
            }

            block.max_rel_err = block.max_rel_err.max(relative_error(a, numeric));
            block.max_abs_err = block.max_abs_err.max((a - numeric).abs());
        }
        report.blocks.push(block);
    }
    Ok(report)
}
