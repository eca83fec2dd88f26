//! Dense tensors with a reverse-mode differentiation tape.
//!
//! Training state lives in `f32`; [`grad_check`] runs the same graphs in
//! `f64` so finite differences are not swamped by rounding.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check, grad_check_with_fault, op_suite, OpCheck};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid domain: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Every primitive the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Affine,
    Concat,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm,
    Tanh,
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Clamp,
    Sum,
    SumLast,
    Mean,
    Reshape,
    Permute,
    Narrow,
    Expand,
    ExpandLast,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Affine,
        OpKind::Concat,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Clamp,
        OpKind::Sum,
        OpKind::SumLast,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Narrow,
        OpKind::Expand,
        OpKind::ExpandLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Concat => "concat",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Clamp => "clamp",
            OpKind::Sum => "sum",
            OpKind::SumLast => "sum_last",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::Expand => "expand",
            OpKind::ExpandLast => "expand_last",
        }
    }
}

/// A named trainable tensor. Gradients and optimizer state are keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param::new(self.name.clone(), self.value.cast())
    }
}
