//! Label-free reward allocation and the reward-fairness metric.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor_nn::{argmax, entropy, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IncentiveError {
    #[error("all accuracies are zero")]
    AllZeroAccuracy,
    #[error("accuracy {0} outside [0, 1]")]
    InvalidAccuracy(f64),
    #[error("model {model}, sample {sample}: probabilities sum to {sum}")]
    InvalidDistribution { model: usize, sample: usize, sum: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("no model agrees with the ensemble on any sample")]
    NoAgreementAnywhere,
    #[error("agreement rewards need ensemble predictions")]
    MissingEnsemble,
    #[error("empty batch")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardScheme {
    Uniform,
    Confidence,
    Agreement,
}

impl RewardScheme {
    pub const ALL: [RewardScheme; 3] = [Self::Uniform, Self::Confidence, Self::Agreement];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Confidence => "confidence",
            Self::Agreement => "agreement",
        }
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accuracy-proportional shares, the reference allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeritVector<T>(Vec<T>);

impl<T: Real> MeritVector<T> {
    pub fn m(&self) -> &[T] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector<T> {
    r: Vec<T>,
    pub scheme: RewardScheme,
}

impl<T: Real> RewardVector<T> {
    fn normalized(raw: Vec<T>, scheme: RewardScheme) -> Self {
        let s: T = raw.iter().copied().sum();
        Self {
            r: raw.into_iter().map(|v| v / s).collect(),
            scheme,
        }
    }

    pub fn r(&self) -> &[T] {
        &self.r
    }
}

/// Per-model outputs on an unlabeled evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationBatch<T> {
    /// One `[S x C]` probability matrix per model.
    pub probs: Vec<Matrix<T>>,
    pub ensemble: Option<Vec<usize>>,
    pub accuracies: Option<Vec<f64>>,
}

impl<T: Real> EvaluationBatch<T> {
    pub fn new(probs: Vec<Matrix<T>>) -> Self {
        Self {
            probs,
            ensemble: None,
            accuracies: None,
        }
    }

    fn check(&self) -> Result<(usize, usize), IncentiveError> {
        let first = self.probs.first().ok_or(IncentiveError::Empty)?;
        let (s, c) = (first.rows(), first.cols());
        for (k, p) in self.probs.iter().enumerate() {
            if p.rows() != s {
                return Err(IncentiveError::DimensionMismatch { left: s, right: p.rows() });
            }
            if p.cols() != c {
                return Err(IncentiveError::DimensionMismatch { left: c, right: p.cols() });
            }
            for n in 0..s {
                let sum: f64 = p.row(n).iter().map(|v| v.as_f64()).sum();
                if (sum - 1.0).abs() > 1e-6 || p.row(n).iter().any(|v| v.as_f64() < 0.0) {
                    return Err(IncentiveError::InvalidDistribution { model: k, sample: n, sum });
                }
            }
        }
        Ok((s, c))
    }
}

pub fn ideal_merit<T: Real>(accuracies: &[T]) -> Result<MeritVector<T>, IncentiveError> {
    if accuracies.is_empty() {
        return Err(IncentiveError::Empty);
    }
    if let Some(a) = accuracies.iter().find(|a| !(a.as_f64() >= 0.0 && a.as_f64() <= 1.0)) {
        return Err(IncentiveError::InvalidAccuracy(a.as_f64()));
    }
    let s: T = accuracies.iter().copied().sum();
    if s <= T::zero() {
        return Err(IncentiveError::AllZeroAccuracy);
    }
    Ok(MeritVector(accuracies.iter().map(|&a| a / s).collect()))
}

pub fn reward_uniform<T: Real>(k: usize) -> RewardVector<T> {
    RewardVector::normalized(vec![T::one(); k.max(1)], RewardScheme::Uniform)
}

/// `r_k ∝ Σ_n exp(-H_{k,n})`.
pub fn reward_confidence<T: Real>(batch: &EvaluationBatch<T>) -> Result<RewardVector<T>, IncentiveError> {
    let (s, _) = batch.check()?;
    let raw = batch
        .probs
        .iter()
        .map(|p| (0..s).map(|n| (-entropy(p.row(n))).exp()).sum())
        .collect();
    Ok(RewardVector::normalized(raw, RewardScheme::Confidence))
}

/// Agreement counts with the ensemble prediction, ties in each model's
/// argmax going to the lowest class.
pub fn agreement_counts<T: Real>(batch: &EvaluationBatch<T>) -> Result<Vec<usize>, IncentiveError> {
    let (s, _) = batch.check()?;
    let ens = batch.ensemble.as_ref().ok_or(IncentiveError::MissingEnsemble)?;
    if ens.len() != s {
        return Err(IncentiveError::DimensionMismatch { left: s, right: ens.len() });
    }
    Ok(batch
        .probs
        .iter()
        .map(|p| (0..s).filter(|&n| argmax(p.row(n)) == ens[n]).count())
        .collect())
}

/// `r_k = A_k / Σ A_j`. Fails with `NoAgreementAnywhere` when every count
/// is zero; see [`reward_agreement_or_uniform`].
pub fn try_reward_agreement<T: Real>(batch: &EvaluationBatch<T>) -> Result<RewardVector<T>, IncentiveError> {
    let a = agreement_counts(batch)?;
    if a.iter().all(|&v| v == 0) {
        return Err(IncentiveError::NoAgreementAnywhere);
    }
    Ok(RewardVector::normalized(
        a.into_iter().map(T::of_usize).collect(),
        RewardScheme::Agreement,
    ))
}

pub fn reward_agreement_or_uniform<T: Real>(batch: &EvaluationBatch<T>) -> Result<RewardVector<T>, IncentiveError> {
    match try_reward_agreement(batch) {
        Err(IncentiveError::NoAgreementAnywhere) => {
            log::warn!("no model agrees with the ensemble; falling back to uniform rewards");
            let mut r = reward_uniform(batch.probs.len());
            r.scheme = RewardScheme::Agreement;
            Ok(r)
        }
        other => other,
    }
}

/// `F = 1 - ½ ‖r - m‖₁`.
pub fn fairness<T: Real>(r: &[T], m: &[T]) -> Result<T, IncentiveError> {
    if r.len() != m.len() {
        return Err(IncentiveError::DimensionMismatch { left: r.len(), right: m.len() });
    }
    let l1: T = r.iter().zip(m).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(T::one() - T::of(0.5) * l1)
}

/// One CSV row of a fairness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRecord {
    pub seed: u64,
    pub alpha: f64,
    pub clients: usize,
    pub scheme: RewardScheme,
    pub fairness: f64,
    pub rewards: Vec<f64>,
    pub merit: Vec<f64>,
}

impl FairnessRecord {
    pub fn csv_header(clients: usize) -> String {
        let mut cols = vec!["seed".to_string(), "alpha".into(), "K".into(), "scheme".into(), "fairness".into()];
        cols.extend((1..=clients).map(|k| format!("r_{k}")));
        cols.extend((1..=clients).map(|k| format!("m_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.seed.to_string(),
            self.alpha.to_string(),
            self.clients.to_string(),
            self.scheme.to_string(),
            self.fairness.to_string(),
        ];
        cols.extend(self.rewards.iter().chain(&self.merit).map(|v| v.to_string()));
        cols.join(",")
    }
}
