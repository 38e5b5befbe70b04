//! Dense tensors, a reverse-mode tape, and finite-difference gradient checks.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{AttentionLayout, Gradients, Graph, Var};
pub use tensor::{matmul, permute_index, Tensor};

pub(crate) use tensor::softmax_in_place;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("nothing to concatenate")]
    EmptyConcat,
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{axes:?} is not a permutation of the tensor axes", axes = .0)]
    InvalidPermutation(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{heads} heads do not divide feature dim {dim}")]
    HeadSplit { dim: usize, heads: usize },
    #[error("{rows} rows cannot be split into {groups} equal groups")]
    GroupSplit { rows: usize, groups: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl Graph {
    /// Affine map over the last axis: `x · w + b` with `w` shaped `[d_in × d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().expect("non-empty shape");
        let d_out = *self.shape(w).last().expect("non-empty shape");
        if self.shape(w) != [d_in, d_out] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: self.shape(w).to_vec(),
            });
        }
        let flat = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[shape.iter().product::<usize>() / d_in, d_in])?
        };
        let y = self.matmul(flat, w)?;
        let y = self.add_row(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("non-empty shape") = d_out;
            self.reshape(y, &out_shape)
        }
    }
}

#[cfg(test)]
mod tests;
