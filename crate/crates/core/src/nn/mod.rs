//! Minimal dense numeric kernel with reverse-mode differentiation.
//!
//! Just enough machinery to train and differentiate a tiny decoder-only
//! transformer, including gradients of a scalar loss with respect to a
//! one-hot token-selection matrix. Single-threaded per graph; frozen
//! weights may be shared across graphs running in parallel.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

/// Log-sum-exp of an f32 row with f64 accumulation.
pub fn log_sum_exp_row(row: &[f32]) -> f64 {
    graph::log_sum_exp(row)
}

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss node is not a scalar")]
    NonScalarLoss,
    #[error("backward called before forward completed")]
    BackwardBeforeForward,
    #[error("unknown input: {0}")]
    UnknownInput(String),
    #[error("one-hot row {row} is not a unit indicator")]
    InvalidOneHot { row: usize },
}

/// Differentiable one-hot representation of the suffix token slots.
///
/// `positions[i]` is the index of slot `i` inside the rendered sequence and
/// row `i` of `matrix` selects that slot's token out of the vocabulary. The
/// gradient of the loss with respect to `matrix` is what ranks candidate
/// substitutions.
#[derive(Clone, Debug)]
pub struct OneHotInput {
    positions: Vec<usize>,
    matrix: Tensor,
}

impl OneHotInput {
    pub fn new(positions: Vec<usize>, token_ids: &[usize], vocab_size: usize) -> Result<Self, NnError> {
        if positions.len() != token_ids.len() {
            return Err(NnError::ShapeMismatch {
                op: "one_hot",
                detail: format!("{} positions vs {} tokens", positions.len(), token_ids.len()),
            });
        }
        let mut data = vec![0.0f32; token_ids.len() * vocab_size];
        for (row, &id) in token_ids.iter().enumerate() {
            if id >= vocab_size {
                return Err(NnError::InvalidOneHot { row });
            }
            data[row * vocab_size + id] = 1.0;
        }
        let matrix = Tensor::new(vec![token_ids.len(), vocab_size], data)?;
        Ok(OneHotInput { positions, matrix })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.cols()
    }

    /// Verifies every row is exactly a unit indicator over a valid id.
    pub fn validate(&self) -> Result<(), NnError> {
        for row in 0..self.matrix.rows() {
            let r = self.matrix.row(row);
            let ones = r.iter().filter(|&&v| v == 1.0).count();
            let zeros = r.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != r.len() - 1 {
                return Err(NnError::InvalidOneHot { row });
            }
        }
        Ok(())
    }

    /// Token id selected in each row.
    pub fn token_ids(&self) -> Vec<usize> {
        (0..self.matrix.rows())
            .map(|row| {
                self.matrix.row(row)
                    .iter()
                    .position(|&v| v == 1.0)
                    .expect("validated one-hot row")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_round_trip() {
        let oh = OneHotInput::new(vec![5, 6, 7], &[3, 0, 9], 12).unwrap();
        oh.validate().unwrap();
        assert_eq!(oh.token_ids(), vec![3, 0, 9]);
        assert_eq!(oh.matrix().shape(), &[3, 12]);
    }

    #[test]
    fn one_hot_rejects_out_of_vocab() {
        assert!(OneHotInput::new(vec![0], &[12], 12).is_err());
    }
}
