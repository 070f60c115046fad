//! Set-prediction losses: sigmoid focal classification, L1 and GIoU box
//! terms, and the Hungarian assignment whose cost mirrors them.

mod focal;
mod hungarian;
mod set;

pub use focal::{focal_cost, focal_loss, focal_terms, FocalParams};
pub use hungarian::{hungarian_match, Assignment};
pub use set::{match_cost, set_loss, LossWeights, Prediction, SetLoss, Targets};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix rows have different lengths")]
    Ragged,
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;
