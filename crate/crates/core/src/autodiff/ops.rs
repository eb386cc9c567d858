//! Uniform entry point over the tape's op set.
//!
//! Model code calls the [`Graph`] methods directly; [`apply`] exists so that
//! tools (the op-level gradient check, property tests) can enumerate ops.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Softplus,
    Softmax,
    Log,
    Exp,
    Concat,
    Slice { start: usize, end: usize },
    GatherRow { row: usize },
    ScatterRow { row: usize },
    Sum,
    Mean,
    CrossEntropyWithSoftmax { targets: Tensor },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::GatherRow { .. } => "gather-row",
            OpKind::ScatterRow { .. } => "scatter-row",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropyWithSoftmax { .. } => "cross-entropy-with-softmax",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::ScatterRow { .. } => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }
}

pub fn apply(g: &mut Graph, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::InvalidArgument {
                op: kind.name(),
                msg: format!("expected {n} inputs, got {}", inputs.len()),
            });
        }
    }
    match kind {
        OpKind::MatMul => g.matmul(inputs[0], inputs[1]),
        OpKind::Add => g.add(inputs[0], inputs[1]),
        OpKind::Mul => g.mul(inputs[0], inputs[1]),
        OpKind::Tanh => Ok(g.tanh(inputs[0])),
        OpKind::Sigmoid => Ok(g.sigmoid(inputs[0])),
        OpKind::Softplus => Ok(g.softplus(inputs[0])),
        OpKind::Softmax => g.softmax(inputs[0]),
        OpKind::Log => Ok(g.log(inputs[0])),
        OpKind::Exp => Ok(g.exp(inputs[0])),
        OpKind::Concat => g.concat(inputs),
        OpKind::Slice { start, end } => g.slice(inputs[0], *start, *end),
        OpKind::GatherRow { row } => g.gather_row(inputs[0], *row),
        OpKind::ScatterRow { row } => g.scatter_row(inputs[0], *row, inputs[1]),
        OpKind::Sum => Ok(g.sum(inputs[0])),
        OpKind::Mean => g.mean(inputs[0]),
        OpKind::CrossEntropyWithSoftmax { targets } => g.softmax_cross_entropy(inputs[0], targets),
    }
}
