//! Ensemble inference over additively secret-shared models.
//!
//! Data owners each contribute a model; a client's query is split into
//! additive shares in `Z_{2^64}` and evaluated by `K` computing parties that
//! never see the input, the weights or the logits. The ensemble combination
//! runs on shares too, and a signature-checked escrow pays the parties once
//! all of them vouch for the job. The plaintext side (training, reference
//! ensembles, rewards) is generic over `f32`/`f64`.

// `!(x > 0.0)` guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod escrow;
pub mod experiment;
pub mod fixedpoint;
pub mod incentive;
pub mod kv;
pub mod partition;
pub mod scalar;
pub mod secretsharing;
pub mod secure_nn;
pub mod tensor_nn;
pub mod transport;

pub use scalar::Real;

pub type Matrix32 = tensor_nn::Matrix<f32>;
pub type Matrix64 = tensor_nn::Matrix<f64>;
pub type Model32 = tensor_nn::ModelSpec<f32>;
pub type Model64 = tensor_nn::ModelSpec<f64>;
pub type Dataset32 = tensor_nn::LabeledDataset<f32>;
pub type Dataset64 = tensor_nn::LabeledDataset<f64>;
pub type Weights64 = ensemble::EnsembleWeights<f64>;

/// Any error the library can return.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    FixedPoint(#[from] fixedpoint::FixedPointError),
    #[error(transparent)]
    Sharing(#[from] secretsharing::SharingError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
    #[error(transparent)]
    Nn(#[from] tensor_nn::NnError),
    #[error(transparent)]
    SecureNn(#[from] secure_nn::SecureNnError),
    #[error(transparent)]
    Ensemble(#[from] ensemble::EnsembleError),
    #[error(transparent)]
    Partition(#[from] partition::PartitionError),
    #[error(transparent)]
    Incentive(#[from] incentive::IncentiveError),
    #[error(transparent)]
    Escrow(#[from] escrow::EscrowError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
