//! Ensemble schemes evaluated on shares.
//!
//! Per-model logits come out of the protected forward pass. The aggregation
//! phase turns them into one shared score matrix. Only the model weights are
//! ever opened to the parties (entropy, spectral and TTA schemes); scores stay
//! shared until the client reconstructs them.

use rand::RngCore;

use super::{augmented_views, EnsembleError, EnsembleOutcome, EnsembleWeights, Scheme, WeightingConfig};
use crate::fixedpoint::{RingParams, RingTensor};
use crate::scalar::Real;
use crate::secretsharing::{Session, SharedTensor};
use crate::secure_nn::{
    broadcast_column, decode_matrix, reciprocal, row_max, scale, secure_forward,
    secure_softmax, share_input, softmax_entropy, sqrt, ApproxConfig, ProtectedModel,
};
use crate::tensor_nn::{argmax, ImageShape, Matrix};
use crate::transport::Transport;

/// Shared aggregate scores with their fixed-point precision.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub shares: SharedTensor,
    pub frac_bits: u32,
}

impl Aggregate {
    /// Client-side reconstruction.
    pub fn reveal(&self) -> Matrix<f64> {
        decode_matrix(&self.shares.reveal(), self.frac_bits)
    }
}

fn vstack(parts: &[SharedTensor]) -> Result<SharedTensor, EnsembleError> {
    let (_, c) = parts.first().ok_or(EnsembleError::Empty)?.dims2()?;
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let refs: Vec<&SharedTensor> = parts.iter().collect();
    Ok(SharedTensor::concat_flat(&refs)?.reshape(vec![rows, c])?)
}

fn blocks(x: &SharedTensor, count: usize) -> Result<Vec<SharedTensor>, EnsembleError> {
    let (r, _) = x.dims2()?;
    let n = r / count;
    (0..count).map(|i| Ok(x.rows(i * n, (i + 1) * n)?)).collect()
}

/// Diagonal of a square shared matrix as `[1 x n]`.
fn diag(x: &SharedTensor) -> Result<SharedTensor, EnsembleError> {
    let (n, _) = x.dims2()?;
    Ok(x.map_local("diag", |_, a| {
        RingTensor::new(vec![1, n], (0..n).map(|i| a.data()[i * n + i]).collect()).expect("diag")
    }))
}

fn trace(x: &SharedTensor) -> Result<SharedTensor, EnsembleError> {
    Ok(diag(x)?.row_sums()?.reshape(vec![1, 1])?)
}

fn fill(x: &SharedTensor, shape: &[usize]) -> Result<SharedTensor, EnsembleError> {
    let n: usize = shape.iter().product();
    Ok(broadcast_column(x, n)?.reshape(shape.to_vec())?)
}

/// `Σ_i w_i · y_i` with public weights, computed locally by every party.
///
/// `w` holds one global weight vector or one per row of the `y_i`. Weights
/// are encoded at precision `f`, so the result is at `2f` and is returned
/// without truncation: no communication at all, and the opened value equals
/// the plaintext ring computation exactly.
pub fn aggregate_secure(
    ys: &[SharedTensor],
    w: &[EnsembleWeights<f64>],
    params: &RingParams,
) -> Result<Aggregate, EnsembleError> {
    let first = ys.first().ok_or(EnsembleError::Empty)?;
    let (n, c) = first.dims2()?;
    if ys.iter().any(|y| y.shape() != first.shape()) {
        return Err(EnsembleError::ShapeMismatch("model outputs differ in shape".into()));
    }
    if !(w.len() == 1 || w.len() == n) || w.iter().any(|wi| wi.len() != ys.len()) {
        return Err(EnsembleError::ShapeMismatch(format!(
            "{} weight vectors for {} models and {n} rows",
            w.len(),
            ys.len()
        )));
    }
    for wi in w {
        let sum: f64 = wi.w().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::WeightSumViolation { sum });
        }
    }
    let mut acc: Option<SharedTensor> = None;
    for (i, y) in ys.iter().enumerate() {
        let mut coef = Vec::with_capacity(n * c);
        for r in 0..n {
            let wr = if w.len() == 1 { &w[0] } else { &w[r] };
            coef.extend(std::iter::repeat_n(params.encode_scalar(wr.w()[i]).map_err(crate::secure_nn::SecureNnError::from)?, c));
        }
        let term = y.mul_public(&RingTensor::new(vec![n, c], coef).expect("shape"))?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(Aggregate {
        shares: acc.expect("non-empty"),
        frac_bits: 2 * params.frac_bits(),
    })
}

/// Shared vote counts `[n x C]` from per-model logits: a secure one-hot
/// argmax per model (ties to the lowest class) summed over models.
pub fn hard_vote_tally<Tr: Transport>(
    session: &mut Session<Tr>,
    logits: &[SharedTensor],
) -> Result<Aggregate, EnsembleError> {
    let models = logits.len();
    let z = vstack(logits)?;
    let (rows, c) = z.dims2()?;
    let one_hot = if c == 1 {
        SharedTensor::public(&RingTensor::filled(&[rows, 1], 1), session.parties())
    } else {
        let mut pairs = Vec::new();
        let mut diffs = Vec::new();
        for a in 0..c {
            for b in a + 1..c {
                pairs.push((a, b));
                diffs.push(z.column(a)?.sub(&z.column(b)?)?);
            }
        }
        let refs: Vec<&SharedTensor> = diffs.iter().collect();
        // g[(a,b)] = [z_a >= z_b]
        let g = session.ge_zero(&SharedTensor::hcat(&refs)?)?;
        let col = |a: usize, b: usize| pairs.iter().position(|&p| p == (a, b)).expect("pair");
        // factor j of class c, for j in 0..c-1
        let mut factors: Vec<Vec<SharedTensor>> = vec![Vec::with_capacity(c); c - 1];
        for class in 0..c {
            let mut j = 0;
            for other in 0..c {
                if other == class {
                    continue;
                }
                let f = if other > class {
                    g.column(col(class, other))?
                } else {
                    // strict win over a lower index: 1 - [z_other >= z_class]
                    g.column(col(other, class))?.neg().add_public_scalar(1)
                };
                factors[j].push(f);
                j += 1;
            }
        }
        let mut level: Vec<SharedTensor> = factors
            .iter()
            .map(|fs| {
                let refs: Vec<&SharedTensor> = fs.iter().collect();
                SharedTensor::hcat(&refs)
            })
            .collect::<Result<_, _>>()?;
        while level.len() > 1 {
            let half = level.len() / 2;
            let pairs: Vec<(&SharedTensor, &SharedTensor)> =
                (0..half).map(|i| (&level[2 * i], &level[2 * i + 1])).collect();
            let mut next = session.mul_many(&pairs)?;
            if level.len() % 2 == 1 {
                next.push(level.pop().expect("odd"));
            }
            level = next;
        }
        level.pop().expect("one factor")
    };
    let mut tally: Option<SharedTensor> = None;
    for b in blocks(&one_hot, models)? {
        tally = Some(match tally {
            None => b,
            Some(t) => t.add(&b)?,
        });
    }
    Ok(Aggregate {
        shares: tally.expect("non-empty"),
        frac_bits: 0,
    })
}

fn open_weights<Tr: Transport>(
    session: &mut Session<Tr>,
    w: &SharedTensor,
    scheme: Scheme,
    per_query: bool,
) -> Result<Vec<EnsembleWeights<f64>>, EnsembleError> {
    let frac = session.params().frac_bits();
    let opened = session.open(&[w])?.remove(0);
    let m = decode_matrix(&opened, frac);
    (0..m.rows())
        .map(|r| EnsembleWeights::from_scores(m.row(r), scheme, per_query))
        .collect()
}

/// Spectral weights from shared probabilities `[n x C]` of each model, with
/// the batch rows as calibration samples. Repeated squaring of the
/// trace-normalized covariance replaces power iteration; `|v_i|` is read off
/// as the square root of the limit's diagonal. Only the weights are opened.
pub fn secure_spectral_weights<Tr: Transport>(
    session: &mut Session<Tr>,
    probs: &[SharedTensor],
    cfg: &WeightingConfig,
    acfg: &ApproxConfig,
) -> Result<EnsembleWeights<f64>, EnsembleError> {
    const SPREAD: u64 = 8;
    const EPS: f64 = 0.01;
    let models = probs.len();
    let (s, _) = probs.first().ok_or(EnsembleError::Empty)?.dims2()?;
    if s < 2 {
        return Err(EnsembleError::InvalidConfig(
            "spectral weighting needs at least 2 samples".into(),
        ));
    }
    let phi = row_max(session, &vstack(probs)?)?.reshape(vec![models, s])?;
    let mean = scale(session, &phi.row_sums()?, 1.0 / s as f64)?;
    // centered and spread by an integer factor for precision; the scale
    // cancels in the trace normalization
    let centered = phi
        .sub(&broadcast_column(&mean, s)?)?
        .mul_public_scalar(SPREAD);
    let raw = session.matmul(&centered, &centered.transpose()?)?;
    let cov = session.truncate(&raw)?;
    let cov = scale(session, &cov, 1.0 / (s - 1) as f64)?;
    let eye = RingTensor::new(
        vec![models, models],
        (0..models * models)
            .map(|i| if i % (models + 1) == 0 { session.encode(EPS) } else { 0 })
            .collect(),
    )
    .expect("shape");
    let cov = cov.add_public(&eye)?;
    // trace lies in [N eps, N (spread^2 s / (4 (s-1)) + eps)]
    let upper = models as f64 * ((SPREAD * SPREAD) as f64 * s as f64 / (4.0 * (s - 1) as f64) + EPS);
    let ratio = models as f64 * EPS / upper;
    let iters = ((20f64 * 2f64.ln()) / -(1.0 - ratio).ln()).log2().ceil() as u32 + 1;
    let inv = reciprocal(session, &trace(&cov)?, iters.max(acfg.reciprocal_newton_iters), 1.0 / upper)?;
    let mut m = session.mul_fx(&cov, &fill(&inv, &[models, models])?)?;
    for _ in 0..cfg.secure_squarings {
        m = session.matmul_fx(&m, &m)?;
        // trace of a trace-one PSD square is in [1/N, 1]
        let inv = reciprocal(session, &trace(&m)?, acfg.reciprocal_newton_iters, 1.0)?;
        m = session.mul_fx(&m, &fill(&inv, &[models, models])?)?;
    }
    let v = sqrt(session, &diag(&m)?, 20, 1.0)?;
    Ok(open_weights(session, &v, Scheme::Spectral, false)?.remove(0))
}

fn entropy_phase<Tr: Transport>(
    session: &mut Session<Tr>,
    h: &SharedTensor,
    models: usize,
    n: usize,
    cfg: &WeightingConfig,
    acfg: &ApproxConfig,
) -> Result<Vec<EnsembleWeights<f64>>, EnsembleError> {
    let h = h.reshape(vec![models, n])?.transpose()?;
    let scores = scale(session, &h, -cfg.beta)?;
    let w = secure_softmax(&scores, acfg, session)?;
    open_weights(session, &w, Scheme::Entropy, true)
}

fn tta_phase<Tr: Transport>(
    session: &mut Session<Tr>,
    outputs: &[Vec<SharedTensor>],
    n: usize,
    cfg: &WeightingConfig,
    acfg: &ApproxConfig,
) -> Result<Vec<EnsembleWeights<f64>>, EnsembleError> {
    // |Δ|^2 up to a few hundred; scaled by 1/256 into Newton's range
    const DOWN: f64 = 256.0;
    let views = outputs[0].len() - 1;
    if views == 0 {
        return Err(EnsembleError::InvalidConfig("no augmented views".into()));
    }
    let mut diffs = Vec::with_capacity(outputs.len() * views);
    for out in outputs {
        for v in &out[1..] {
            diffs.push(v.sub(&out[0])?);
        }
    }
    let d = vstack(&diffs)?;
    let sq = session.mul_fx(&d, &d)?.row_sums()?;
    let sq = scale(session, &sq, 1.0 / DOWN)?.reshape(vec![outputs.len() * views * n, 1])?;
    let norms = sqrt(session, &sq, 25, 1.0)?;
    let mut per_model = Vec::with_capacity(outputs.len());
    for (i, block) in blocks(&norms, outputs.len())?.into_iter().enumerate() {
        let _ = i;
        let mut total: Option<SharedTensor> = None;
        for b in blocks(&block, views)? {
            total = Some(match total {
                None => b,
                Some(t) => t.add(&b)?,
            });
        }
        per_model.push(total.expect("views"));
    }
    let refs: Vec<&SharedTensor> = per_model.iter().collect();
    let summed = SharedTensor::hcat(&refs)?;
    let scores = scale(session, &summed, cfg.gamma * DOWN.sqrt() / views as f64)?;
    let w = secure_softmax(&scores, acfg, session)?;
    open_weights(session, &w, Scheme::Tta, true)
}

/// Aggregation phase: turns per-model outputs into shared scores, opening
/// only the model weights. `outputs[i][0]` holds model `i`'s logits on the
/// query batch; further entries are its logits on the augmented views (TTA)
/// or on the calibration set (spectral, which otherwise uses the batch).
pub fn aggregate_phase<Tr: Transport>(
    session: &mut Session<Tr>,
    scheme: Scheme,
    outputs: &[Vec<SharedTensor>],
    cfg: &WeightingConfig,
    acfg: &ApproxConfig,
) -> Result<(Aggregate, Vec<EnsembleWeights<f64>>), EnsembleError> {
    let models = outputs.len();
    let base: Vec<SharedTensor> = outputs
        .iter()
        .map(|o| o.first().cloned().ok_or(EnsembleError::Empty))
        .collect::<Result<_, _>>()?;
    let (n, _) = base.first().ok_or(EnsembleError::Empty)?.dims2()?;
    if scheme == Scheme::Hard {
        let tally = hard_vote_tally(session, &base)?;
        return Ok((tally, vec![EnsembleWeights::uniform(models, scheme, false)]));
    }
    let stacked = vstack(&base)?;
    let (probs_all, entropies) = if scheme == Scheme::Entropy {
        let (p, h) = softmax_entropy(session, &stacked, acfg)?;
        (p, Some(h))
    } else {
        (secure_softmax(&stacked, acfg, session)?, None)
    };
    let probs = blocks(&probs_all, models)?;
    let weights = match (scheme, entropies) {
        (Scheme::Soft, _) => vec![EnsembleWeights::uniform(models, scheme, false)],
        (Scheme::Entropy, Some(h)) => entropy_phase(session, &h, models, n, cfg, acfg)?,
        (Scheme::Spectral, _) if outputs[0].len() > 1 => {
            let cal: Vec<SharedTensor> = outputs.iter().map(|o| o[1].clone()).collect();
            let cal_probs = secure_softmax(&vstack(&cal)?, acfg, session)?;
            let cal_probs = blocks(&cal_probs, models)?;
            vec![secure_spectral_weights(session, &cal_probs, cfg, acfg)?]
        }
        (Scheme::Spectral, _) => vec![secure_spectral_weights(session, &probs, cfg, acfg)?],
        (Scheme::Tta, _) => tta_phase(session, outputs, n, cfg, acfg)?,
        (Scheme::Hard | Scheme::Entropy, _) => unreachable!(),
    };
    let agg = aggregate_secure(&probs, &weights, session.params())?;
    Ok((agg, weights))
}

/// Execution phase: every protected model on every input view, one model
/// after another.
pub fn execute_models<Tr: Transport>(
    session: &mut Session<Tr>,
    models: &[ProtectedModel],
    inputs: &[SharedTensor],
) -> Result<Vec<Vec<SharedTensor>>, EnsembleError> {
    models
        .iter()
        .map(|pm| {
            inputs
                .iter()
                .map(|x| Ok(secure_forward(pm, x, session)?))
                .collect()
        })
        .collect()
}

/// Inputs the client shares: the query batch, plus rotated views for TTA or
/// the calibration set for spectral weighting.
pub fn client_views<T: Real>(
    x: &Matrix<T>,
    image: Option<ImageShape>,
    calibration: Option<&Matrix<T>>,
    scheme: Scheme,
    cfg: &WeightingConfig,
    seed: u64,
) -> Result<Vec<Matrix<T>>, EnsembleError> {
    let mut views = vec![x.clone()];
    match (scheme, calibration) {
        (Scheme::Tta, _) => views.extend(augmented_views(x, image, &cfg.view_angles(seed))?),
        (Scheme::Spectral, Some(c)) => views.push(c.clone()),
        _ => {}
    }
    Ok(views)
}

/// End-to-end secure ensemble over a query batch: share, execute, aggregate,
/// reconstruct. Arguments mirror the plaintext pipeline.
#[allow(clippy::too_many_arguments)]
pub fn secure_ensemble<T: Real, Tr: Transport, R: RngCore + ?Sized>(
    models: &[ProtectedModel],
    x: &Matrix<T>,
    image: Option<ImageShape>,
    calibration: Option<&Matrix<T>>,
    scheme: Scheme,
    cfg: &WeightingConfig,
    acfg: &ApproxConfig,
    session: &mut Session<Tr>,
    rng: &mut R,
    seed: u64,
) -> Result<EnsembleOutcome, EnsembleError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let params = *session.params();
    let inputs = client_views(x, image, calibration, scheme, cfg, seed)?
        .iter()
        .map(|v| share_input(v, session.parties(), &params, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs = execute_models(session, models, &inputs)?;
    let (agg, weights) = aggregate_phase(session, scheme, &outputs, cfg, acfg)?;
    let scores = agg.reveal();
    Ok(EnsembleOutcome {
        predictions: (0..scores.rows()).map(|r| argmax(scores.row(r))).collect(),
        weights,
        scores,
    })
}
