//! Ensemble aggregation: hard and soft voting, entropy, spectral and
//! test-time-augmentation weighting, in plaintext and over shares.

mod rotate;
mod secure;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rotate::rotate;
pub use secure::{
    aggregate_phase, aggregate_secure, client_views, execute_models, hard_vote_tally,
    secure_ensemble, secure_spectral_weights, Aggregate,
};

use crate::scalar::Real;
use crate::secretsharing::SharingError;
use crate::secure_nn::SecureNnError;
use crate::tensor_nn::{self, argmax, entropy, ImageShape, Matrix, ModelSpec, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Hard,
    Soft,
    Entropy,
    Spectral,
    Tta,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Self::Hard, Self::Soft, Self::Entropy, Self::Spectral, Self::Tta];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
            Self::Entropy => "entropy",
            Self::Spectral => "spectral",
            Self::Tta => "tta",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "hard" => Ok(Self::Hard),
            "soft" | "soft_uniform" => Ok(Self::Soft),
            "entropy" => Ok(Self::Entropy),
            "spectral" => Ok(Self::Spectral),
            "tta" => Ok(Self::Tta),
            other => Err(EnsembleError::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error("weights sum to {sum}, expected 1")]
    WeightSumViolation { sum: f64 },
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a probability distribution (sum {sum})")]
    InvalidDistribution { sum: f64 },
    #[error("confidence rows have no variance")]
    DegenerateCovariance,
    #[error("input of length {len} is not an image of shape {shape:?}")]
    NotImageShaped { len: usize, shape: Option<ImageShape> },
    #[error("invalid weighting config: {0}")]
    InvalidConfig(String),
    #[error("empty ensemble")]
    Empty,
    #[error(transparent)]
    Secure(#[from] SecureNnError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<SharingError> for EnsembleError {
    fn from(e: SharingError) -> Self {
        Self::Secure(SecureNnError::Sharing(e))
    }
}

impl EnsembleError {
    pub fn aborted_party(&self) -> Option<usize> {
        match self {
            Self::Secure(e) => e.aborted_party(),
            _ => None,
        }
    }
}

/// Non-negative model weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights<T> {
    w: Vec<T>,
    pub scheme: Scheme,
    /// True when the weights were computed for a single query.
    pub per_query: bool,
}

impl<T: Real> EnsembleWeights<T> {
    pub fn new(w: Vec<T>, scheme: Scheme, per_query: bool) -> Result<Self, EnsembleError> {
        if w.is_empty() {
            return Err(EnsembleError::Empty);
        }
        if let Some(&neg) = w.iter().find(|&&v| v < T::zero() || v.is_nan()) {
            return Err(EnsembleError::NegativeWeight(neg.as_f64()));
        }
        let sum: f64 = w.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::WeightSumViolation { sum });
        }
        Ok(Self { w, scheme, per_query })
    }

    /// Normalizes non-negative scores; negatives (e.g. fixed-point noise
    /// around zero) are clipped to zero first.
    pub fn from_scores(scores: &[T], scheme: Scheme, per_query: bool) -> Result<Self, EnsembleError> {
        let clipped: Vec<T> = scores.iter().map(|&v| v.max(T::zero())).collect();
        let sum: T = clipped.iter().copied().sum();
        if !(sum > T::zero()) || !sum.is_finite() {
            return Ok(Self::uniform(scores.len().max(1), scheme, per_query));
        }
        Self::new(clipped.into_iter().map(|v| v / sum).collect(), scheme, per_query)
    }

    pub fn uniform(n: usize, scheme: Scheme, per_query: bool) -> Self {
        Self {
            w: vec![T::one() / T::of_usize(n); n],
            scheme,
            per_query,
        }
    }

    pub fn w(&self) -> &[T] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    /// Entropy sharpness.
    pub beta: f64,
    /// TTA sharpness; positive exponent favors unstable models.
    pub gamma: f64,
    pub tta_views: usize,
    /// Views are rotated by angles drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub calibration_size: usize,
    pub power_tol: f64,
    pub power_max_iter: usize,
    /// Repeated squarings in the shared spectral computation.
    pub secure_squarings: u32,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 1.0,
            tta_views: 2,
            rotation_deg: 10.0,
            calibration_size: 64,
            power_tol: 1e-9,
            power_max_iter: 1000,
            secure_squarings: 6,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: &str| Err(EnsembleError::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0) || !(self.gamma > 0.0) {
            return bad("beta and gamma must be positive");
        }
        if self.tta_views == 0 {
            return bad("tta_views must be at least 1");
        }
        if !(self.rotation_deg > 0.0) {
            return bad("rotation_deg must be positive");
        }
        if self.calibration_size < 2 {
            return bad("calibration_size must be at least 2");
        }
        if self.power_max_iter == 0 || !(self.power_tol > 0.0) {
            return bad("power iteration needs a positive tolerance and iteration cap");
        }
        Ok(())
    }

    /// The view angles for one run, drawn from `seed`.
    pub fn view_angles(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..self.tta_views)
            .map(|_| rng.gen_range(-self.rotation_deg..=self.rotation_deg))
            .collect()
    }
}

/// Plurality vote; ties go to the lowest class index.
pub fn hard_vote(predictions: &[usize]) -> usize {
    let classes = predictions.iter().max().map_or(1, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &p in predictions {
        counts[p] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn softmax_weights<T: Real>(scores: &[T], scheme: Scheme, per_query: bool) -> Result<EnsembleWeights<T>, EnsembleError> {
    let w = tensor_nn::softmax(scores);
    // renormalize in f64 to hold the 1e-9 sum bound for f32 too
    EnsembleWeights::from_scores(&w, scheme, per_query)
}

fn check_distribution<T: Real>(p: &[T]) -> Result<(), EnsembleError> {
    let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < T::zero() || v.is_nan()) {
        return Err(EnsembleError::InvalidDistribution { sum });
    }
    Ok(())
}

/// `w_i ∝ exp(-β H(p_i))`, natural-log entropy.
pub fn entropy_weights<T: Real>(p: &[Vec<T>], beta: f64) -> Result<EnsembleWeights<T>, EnsembleError> {
    if p.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let mut scores = Vec::with_capacity(p.len());
    for dist in p {
        check_distribution(dist)?;
        scores.push(-T::of(beta) * entropy(dist));
    }
    softmax_weights(&scores, Scheme::Entropy, true)
}

/// `w_i ∝ exp(γ d_i)` for per-model instabilities `d`.
pub fn tta_weights<T: Real>(d: &[T], gamma: f64) -> Result<EnsembleWeights<T>, EnsembleError> {
    if d.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let scores: Vec<T> = d.iter().map(|&v| T::of(gamma) * v).collect();
    softmax_weights(&scores, Scheme::Tta, true)
}

/// Mean L2 deviation of each view's logits from the base logits, per row.
pub fn tta_instability<T: Real>(base: &Matrix<T>, views: &[Matrix<T>]) -> Result<Vec<T>, EnsembleError> {
    if views.is_empty() {
        return Err(EnsembleError::InvalidConfig("no views".into()));
    }
    if views.iter().any(|v| v.rows() != base.rows() || v.cols() != base.cols()) {
        return Err(EnsembleError::ShapeMismatch("view logits differ in shape".into()));
    }
    Ok((0..base.rows())
        .map(|r| {
            let total: T = views
                .iter()
                .map(|v| {
                    v.row(r)
                        .iter()
                        .zip(base.row(r))
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<T>()
                        .sqrt()
                })
                .sum();
            total / T::of_usize(views.len())
        })
        .collect())
}

/// Sample covariance `Φ̃Φ̃ᵀ/(S-1)` of the centered rows of `phi: [N x S]`.
pub fn confidence_covariance<T: Real>(phi: &Matrix<T>) -> Matrix<T> {
    let (n, s) = (phi.rows(), phi.cols());
    let centered = Matrix::from_fn(n, s, |i, j| {
        let mean = phi.row(i).iter().copied().sum::<T>() / T::of_usize(s);
        phi.get(i, j) - mean
    });
    let denom = T::of_usize(s - 1);
    centered.matmul(&centered.transpose()).map(|v| v / denom)
}

/// Principal eigenvector of a symmetric PSD matrix by power iteration from
/// the all-ones vector, normalized to unit L2 norm.
pub fn power_iteration<T: Real>(c: &Matrix<T>, tol: f64, max_iter: usize) -> Result<Vec<T>, EnsembleError> {
    let n = c.rows();
    let apply = |v: &[T]| -> Vec<T> {
        (0..n)
            .map(|i| c.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    };
    let norm = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let scale = c.data().iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if !(scale.as_f64() > 1e-12) {
        return Err(EnsembleError::DegenerateCovariance);
    }
    let mut v: Vec<T> = vec![T::one() / T::of_usize(n).sqrt(); n];
    // the all-ones start can be orthogonal to every dominant direction (e.g.
    // two perfectly anti-correlated rows); fall back to a graded start
    if norm(&apply(&v)) <= T::of(1e-12) * scale {
        let g: Vec<T> = (0..n).map(|i| T::of_usize(i + 1)).collect();
        let gn = norm(&g);
        v = g.into_iter().map(|x| x / gn).collect();
    }
    for _ in 0..max_iter {
        let mut next = apply(&v);
        let nn = norm(&next);
        if !(nn > T::zero()) {
            return Err(EnsembleError::DegenerateCovariance);
        }
        next.iter_mut().for_each(|x| *x /= nn);
        // compare up to sign
        let diff = next.iter().zip(&v).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
        let flip = next.iter().zip(&v).map(|(&a, &b)| (a + b) * (a + b)).sum::<T>().sqrt();
        v = next;
        if diff.min(flip).as_f64() < tol {
            break;
        }
    }
    Ok(v)
}

/// Spectral weights `w_i = |v_i| / Σ|v_j|` from confidences `phi: [N x S]`.
pub fn try_spectral_weights<T: Real>(phi: &Matrix<T>, cfg: &WeightingConfig) -> Result<EnsembleWeights<T>, EnsembleError> {
    if phi.rows() == 0 {
        return Err(EnsembleError::Empty);
    }
    if phi.cols() < 2 {
        return Err(EnsembleError::InvalidConfig(
            "spectral weighting needs at least 2 samples".into(),
        ));
    }
    let c = confidence_covariance(phi);
    let v = power_iteration(&c, cfg.power_tol, cfg.power_max_iter)?;
    let abs: Vec<T> = v.iter().map(|x| x.abs()).collect();
    EnsembleWeights::from_scores(&abs, Scheme::Spectral, false)
}

/// As [`try_spectral_weights`], falling back to uniform weights (with a
/// warning) when the covariance is degenerate.
pub fn spectral_weights<T: Real>(phi: &Matrix<T>, cfg: &WeightingConfig) -> Result<EnsembleWeights<T>, EnsembleError> {
    match try_spectral_weights(phi, cfg) {
        Err(EnsembleError::DegenerateCovariance) => {
            log::warn!("degenerate confidence covariance; using uniform weights");
            Ok(EnsembleWeights::uniform(phi.rows(), Scheme::Spectral, false))
        }
        other => other,
    }
}

/// Plaintext weighted sum of per-model score matrices with global weights.
pub fn aggregate<T: Real>(ys: &[Matrix<T>], w: &EnsembleWeights<T>) -> Result<Matrix<T>, EnsembleError> {
    aggregate_rows(ys, std::slice::from_ref(w))
}

/// Weighted sum with either one global weight vector or one per row.
pub fn aggregate_rows<T: Real>(ys: &[Matrix<T>], w: &[EnsembleWeights<T>]) -> Result<Matrix<T>, EnsembleError> {
    let first = ys.first().ok_or(EnsembleError::Empty)?;
    let (n, c) = (first.rows(), first.cols());
    if ys.iter().any(|y| y.rows() != n || y.cols() != c) {
        return Err(EnsembleError::ShapeMismatch("model outputs differ in shape".into()));
    }
    if !(w.len() == 1 || w.len() == n) || w.iter().any(|wi| wi.len() != ys.len()) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "{} weight vectors for {} models and {n} rows",
            w.len(),
            ys.len()
        )));
    }
    let mut out = Matrix::zeros(n, c);
    for r in 0..n {
        let wr = if w.len() == 1 { &w[0] } else { &w[r] };
        for (y, &wi) in ys.iter().zip(wr.w()) {
            for (o, &v) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(y.row(r)) {
                *o += wi * v;
            }
        }
    }
    Ok(out)
}

/// Result of an ensemble run over a batch of queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutcome {
    pub predictions: Vec<usize>,
    /// One global vector, or one per query.
    pub weights: Vec<EnsembleWeights<f64>>,
    /// Aggregated scores (probabilities, or vote counts for hard voting).
    pub scores: Matrix<f64>,
}

/// Rotated copies of every row of `x` at the given angles.
pub fn augmented_views<T: Real>(
    x: &Matrix<T>,
    shape: Option<ImageShape>,
    angles: &[f64],
) -> Result<Vec<Matrix<T>>, EnsembleError> {
    let shape = shape.ok_or(EnsembleError::NotImageShaped {
        len: x.cols(),
        shape: None,
    })?;
    angles
        .iter()
        .map(|&deg| {
            let mut data = Vec::with_capacity(x.data().len());
            for r in 0..x.rows() {
                data.extend(rotate(x.row(r), shape, deg)?);
            }
            Ok(Matrix::new(x.rows(), x.cols(), data))
        })
        .collect()
}

/// Plaintext reference pipeline. `seed` fixes the TTA view angles. Spectral
/// weights come from `calibration` (unlabeled inputs) when given, otherwise
/// from the query batch itself.
pub fn plaintext_ensemble<T: Real>(
    models: &[ModelSpec<T>],
    x: &Matrix<T>,
    image: Option<ImageShape>,
    calibration: Option<&Matrix<T>>,
    scheme: Scheme,
    cfg: &WeightingConfig,
    seed: u64,
) -> Result<EnsembleOutcome, EnsembleError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let x = x.cast::<f64>();
    let models: Vec<ModelSpec<f64>> = models.iter().map(|m| m.cast()).collect();
    let logits = models
        .iter()
        .map(|m| tensor_nn::forward(m, &x))
        .collect::<Result<Vec<_>, _>>()?;
    let probs: Vec<Matrix<f64>> = logits.iter().map(tensor_nn::softmax_rows).collect();
    let n = x.rows();
    let (weights, scores) = match scheme {
        Scheme::Hard => {
            let c = logits[0].cols();
            let mut tally = Matrix::zeros(n, c);
            for l in &logits {
                for (r, p) in l.argmax_rows().into_iter().enumerate() {
                    tally.set(r, p, tally.get(r, p) + 1.0);
                }
            }
            (vec![EnsembleWeights::uniform(models.len(), scheme, false)], tally)
        }
        Scheme::Soft => {
            let w = EnsembleWeights::uniform(models.len(), scheme, false);
            let s = aggregate(&probs, &w)?;
            (vec![w], s)
        }
        Scheme::Entropy => {
            let w = (0..n)
                .map(|r| {
                    let p: Vec<Vec<f64>> = probs.iter().map(|p| p.row(r).to_vec()).collect();
                    entropy_weights(&p, cfg.beta)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let s = aggregate_rows(&probs, &w)?;
            (w, s)
        }
        Scheme::Spectral => {
            let cal_probs = match calibration {
                None => probs.clone(),
                Some(c) => {
                    let c = c.cast::<f64>();
                    models
                        .iter()
                        .map(|m| Ok(tensor_nn::softmax_rows(&tensor_nn::forward(m, &c)?)))
                        .collect::<Result<Vec<_>, EnsembleError>>()?
                }
            };
            let s = cal_probs[0].rows();
            let phi = Matrix::from_fn(models.len(), s, |i, j| {
                cal_probs[i].row(j).iter().copied().fold(f64::MIN, f64::max)
            });
            let w = spectral_weights(&phi, cfg)?;
            let s = aggregate(&probs, &w)?;
            (vec![w], s)
        }
        Scheme::Tta => {
            let views = augmented_views(&x, image, &cfg.view_angles(seed))?;
            let mut d_per_model = Vec::with_capacity(models.len());
            for (m, base) in models.iter().zip(&logits) {
                let vl = views
                    .iter()
                    .map(|v| tensor_nn::forward(m, v))
                    .collect::<Result<Vec<_>, _>>()?;
                d_per_model.push(tta_instability(base, &vl)?);
            }
            let w = (0..n)
                .map(|r| {
                    let d: Vec<f64> = d_per_model.iter().map(|d| d[r]).collect();
                    tta_weights(&d, cfg.gamma)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let s = aggregate_rows(&probs, &w)?;
            (w, s)
        }
    };
    Ok(EnsembleOutcome {
        predictions: (0..n).map(|r| argmax(scores.row(r))).collect(),
        weights,
        scores,
    })
}

#[cfg(test)]
mod tests;
