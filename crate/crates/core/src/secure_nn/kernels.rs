//! Approximation kernels on fixed-point shares: clamp, max, exp, reciprocal,
//! log and inverse square root. All inputs and outputs are at precision `f`.

use serde::{Deserialize, Serialize};

use super::SecureNnError;
use crate::fixedpoint::RingTensor;
use crate::secretsharing::{SharedTensor, Session, SharingError};
use crate::transport::Transport;

/// Iteration counts and input domain of the kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    /// `n` in `exp(x) ≈ (1 + x/2^n)^(2^n)`.
    pub exp_iterations: u32,
    pub reciprocal_newton_iters: u32,
    pub log_householder_iters: u32,
    /// Logits are clamped into `[lo, hi]` before exponentiation.
    pub input_clamp: (f64, f64),
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            exp_iterations: 8,
            reciprocal_newton_iters: 10,
            log_householder_iters: 2,
            input_clamp: (-8.0, 8.0),
        }
    }
}

impl ApproxConfig {
    /// Rejects zero iteration counts, an empty clamp, and domains on which
    /// the exp limit would lose its positive base after max subtraction.
    pub fn validate(&self, frac_bits: u32) -> Result<(), SecureNnError> {
        let bad = |msg: String| Err(SecureNnError::ApproximationDomain(msg));
        if self.exp_iterations == 0 || self.reciprocal_newton_iters == 0 || self.log_householder_iters == 0 {
            return bad("iteration counts must be at least 1".into());
        }
        if self.exp_iterations > frac_bits {
            return bad(format!(
                "exp_iterations {} exceeds the {frac_bits} fractional bits",
                self.exp_iterations
            ));
        }
        let (lo, hi) = self.input_clamp;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("empty clamp range [{lo}, {hi}]"));
        }
        let width = hi - lo;
        if width >= 2f64.powi(self.exp_iterations as i32) {
            return bad(format!(
                "clamp width {width} reaches 2^{} where the exp base turns negative",
                self.exp_iterations
            ));
        }
        Ok(())
    }
}

/// `c · x` for a public real `c`; one truncation.
pub fn scale<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    c: f64,
) -> Result<SharedTensor, SharingError> {
    let raw = x.mul_public_scalar(session.encode(c));
    session.truncate(&raw)
}

/// Repeats an `[n x 1]` column `c` times.
pub fn broadcast_column(x: &SharedTensor, c: usize) -> Result<SharedTensor, SharingError> {
    x.matmul_public(&RingTensor::filled(&[1, c], 1))
}

/// `min(max(x, lo), hi)` with both comparisons in one batch.
pub fn clamp<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    lo: f64,
    hi: f64,
) -> Result<SharedTensor, SharingError> {
    let (elo, ehi) = (session.encode(lo), session.encode(hi));
    // x + relu(lo - x) - relu(x - hi)
    let below = x.neg().add_public_scalar(elo);
    let above = x.add_public_scalar(ehi.wrapping_neg());
    let both = SharedTensor::concat_flat(&[&below, &above])?;
    let r = session.relu(&both)?;
    let parts = r.split_flat(&[x.shape().to_vec(), x.shape().to_vec()])?;
    x.add(&parts[0])?.sub(&parts[1])
}

/// Row-wise maximum of `[n x c]`, as `[n x 1]`; a pairwise tournament of
/// `ceil(log2 c)` levels, each one batched comparison.
pub fn row_max<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
) -> Result<SharedTensor, SharingError> {
    let (_, c) = x.dims2()?;
    let mut cols: Vec<SharedTensor> = (0..c).map(|j| x.column(j)).collect::<Result<_, _>>()?;
    while cols.len() > 1 {
        let half = cols.len() / 2;
        let left: Vec<&SharedTensor> = cols.iter().step_by(2).take(half).collect();
        let right: Vec<&SharedTensor> = cols.iter().skip(1).step_by(2).take(half).collect();
        let a = SharedTensor::hcat(&left)?;
        let b = SharedTensor::hcat(&right)?;
        let m = session.max(&a, &b)?;
        let mut next: Vec<SharedTensor> = (0..half).map(|j| m.column(j)).collect::<Result<_, _>>()?;
        if cols.len() % 2 == 1 {
            next.push(cols.pop().expect("odd column"));
        }
        cols = next;
    }
    Ok(cols.pop().expect("at least one column"))
}

/// `exp(x) ≈ (1 + x/2^n)^(2^n)`; accurate for `|x|` well below `2^n`.
pub fn exp<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    iterations: u32,
) -> Result<SharedTensor, SharingError> {
    let one = session.params().one();
    let mut y = scale(session, x, 2f64.powi(-(iterations as i32)))?.add_public_scalar(one);
    for _ in 0..iterations {
        y = session.mul_fx(&y, &y)?;
    }
    Ok(y)
}

/// Newton iteration `y <- y (2 - s y)` from the public start `y0`; converges
/// when `0 < s·y0 < 2`.
pub fn reciprocal<T: Transport>(
    session: &mut Session<T>,
    s: &SharedTensor,
    iterations: u32,
    y0: f64,
) -> Result<SharedTensor, SharingError> {
    let k = session.parties();
    let two = session.encode(2.0);
    let mut y = SharedTensor::public(&RingTensor::filled(s.shape(), session.encode(y0)), k);
    for _ in 0..iterations {
        let sy = session.mul_fx(s, &y)?;
        y = session.mul_fx(&y, &sy.neg().add_public_scalar(two))?;
    }
    Ok(y)
}

/// Natural log by Householder iterations of order 8 on `h = 1 - x e^{-y}`,
/// started from `y0 = x/120 - 20 e^{-2x-1} + 3`. Intended for `x` in about
/// `[1e-4, 10]`.
pub fn log<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    cfg: &ApproxConfig,
) -> Result<SharedTensor, SharingError> {
    let one = session.params().one();
    let e_arg = scale(session, x, -2.0)?.add_public_scalar(session.encode(-1.0));
    let e = exp(session, &e_arg, cfg.exp_iterations)?;
    let lin = x.mul_public_scalar(session.encode(1.0 / 120.0));
    let ex = e.mul_public_scalar(session.encode(20.0));
    let mut y = session.truncate(&lin.sub(&ex)?)?.add_public_scalar(session.encode(3.0));
    for _ in 0..cfg.log_householder_iters {
        let ey = exp(session, &y.neg(), cfg.exp_iterations)?;
        let h = session.mul_fx(x, &ey)?.neg().add_public_scalar(one);
        let h2 = session.mul_fx(&h, &h)?;
        let p34 = session.mul_fx_many(&[(&h2, &h), (&h2, &h2)])?;
        let (h3, h4) = (&p34[0], &p34[1]);
        let p58 = session.mul_fx_many(&[(h4, &h), (h4, &h2), (h4, h3), (h4, h4)])?;
        let powers = [&h, &h2, h3, h4, &p58[0], &p58[1], &p58[2], &p58[3]];
        // Σ h^i / i at double precision, one truncation
        let mut acc = powers[0].mul_public_scalar(one);
        for (i, p) in powers.iter().enumerate().skip(1) {
            acc = acc.add(&p.mul_public_scalar(session.encode(1.0 / (i + 1) as f64)))?;
        }
        y = y.sub(&session.truncate(&acc)?)?;
    }
    Ok(y)
}

/// `1/sqrt(x)` by Newton `y <- y (3 - x y^2) / 2` from `y0`; converges for
/// `0 < x y0^2 < 3`, slowly (factor 1.5 per step) while `x y0^2` is small.
pub fn inv_sqrt<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    iterations: u32,
    y0: f64,
) -> Result<SharedTensor, SharingError> {
    let k = session.parties();
    let three = session.encode(3.0);
    let mut y = SharedTensor::public(&RingTensor::filled(x.shape(), session.encode(y0)), k);
    for _ in 0..iterations {
        let y2 = session.mul_fx(&y, &y)?;
        let xy2 = session.mul_fx(x, &y2)?;
        let t = scale(session, &xy2.neg().add_public_scalar(three), 0.5)?;
        y = session.mul_fx(&y, &t)?;
    }
    Ok(y)
}

/// `sqrt(x) = x / sqrt(x)`.
pub fn sqrt<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    iterations: u32,
    y0: f64,
) -> Result<SharedTensor, SharingError> {
    let r = inv_sqrt(session, x, iterations, y0)?;
    session.mul_fx(x, &r)
}

struct SoftmaxParts {
    p: SharedTensor,
    shifted: SharedTensor,
    sums: SharedTensor,
}

fn softmax_parts<T: Transport>(
    session: &mut Session<T>,
    z: &SharedTensor,
    cfg: &ApproxConfig,
) -> Result<SoftmaxParts, SecureNnError> {
    cfg.validate(session.params().frac_bits())?;
    let (n, c) = z.dims2()?;
    let clamped = clamp(session, z, cfg.input_clamp.0, cfg.input_clamp.1)?;
    let m = row_max(session, &clamped)?;
    let shifted = clamped.sub(&broadcast_column(&m, c)?)?;
    let e = exp(session, &shifted, cfg.exp_iterations)?;
    let sums = e.row_sums()?.reshape(vec![n, 1])?;
    let inv = reciprocal(session, &sums, cfg.reciprocal_newton_iters, 1.0 / c as f64)?;
    let p = session.mul_fx(&e, &broadcast_column(&inv, c)?)?;
    Ok(SoftmaxParts { p, shifted, sums })
}

/// Softmax of every row of `[n x c]` logits.
///
/// Clamp into `cfg.input_clamp`, subtract the row maximum, exponentiate,
/// normalize by a Newton reciprocal of the row sum (which lies in `[1, c]`,
/// so `1/c` is a safe start).
pub fn softmax<T: Transport>(
    session: &mut Session<T>,
    z: &SharedTensor,
    cfg: &ApproxConfig,
) -> Result<SharedTensor, SecureNnError> {
    Ok(softmax_parts(session, z, cfg)?.p)
}

/// Softmax rows together with their entropies, via
/// `H = log Σ exp(z') - Σ p z'` on the max-shifted logits `z'`. The log runs
/// once per row, on a sum in `[1, c]`.
pub fn softmax_entropy<T: Transport>(
    session: &mut Session<T>,
    z: &SharedTensor,
    cfg: &ApproxConfig,
) -> Result<(SharedTensor, SharedTensor), SecureNnError> {
    let SoftmaxParts { p, shifted, sums } = softmax_parts(session, z, cfg)?;
    let (n, _) = p.dims2()?;
    let mean = session.mul_fx(&p, &shifted)?.row_sums()?.reshape(vec![n, 1])?;
    let l = log(session, &sums, cfg)?;
    Ok((p, l.sub(&mean)?))
}

/// Shannon entropy (nats) of every row of `[n x c]` probabilities, as
/// `[n x 1]`. A floor of `2^-12` keeps the log argument positive.
pub fn entropy<T: Transport>(
    session: &mut Session<T>,
    p: &SharedTensor,
    cfg: &ApproxConfig,
) -> Result<SharedTensor, SecureNnError> {
    cfg.validate(session.params().frac_bits())?;
    let (n, _) = p.dims2()?;
    let floored = p.add_public_scalar(session.encode(LOG_FLOOR));
    let l = log(session, &floored, cfg)?;
    let pl = session.mul_fx(p, &l)?;
    Ok(pl.row_sums()?.reshape(vec![n, 1])?.neg())
}

pub(crate) const LOG_FLOOR: f64 = 1.0 / 4096.0;
