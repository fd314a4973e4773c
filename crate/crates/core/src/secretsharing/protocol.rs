//! Interactive protocols: openings, Beaver products, truncation, comparison.
//!
//! Every function here is executed by all `K` parties in lockstep. Each party's
//! local step reads only its own share and the public values delivered by the
//! transport.

use super::codec::{decode_words, encode_words};
use super::dealer::{BeaverTriple, Dealer, MaskTuple, TripleKind};
use super::{GroupId, SharedTensor, SharingError};
use crate::fixedpoint::{RingParams, RingTensor};
use crate::transport::{RoundLedger, SimTransport, Transport};

/// One round in which every party broadcasts its share of each value; returns,
/// for each value, the payload received from every party.
fn broadcast<T: Transport + ?Sized>(
    transport: &mut T,
    values: &[&SharedTensor],
) -> Result<Vec<Vec<RingTensor>>, SharingError> {
    let k = transport.parties();
    if values.iter().any(|v| v.parties() != k) {
        return Err(SharingError::PartyMismatch);
    }
    let payloads = (0..k)
        .map(|party| {
            let mut words = Vec::with_capacity(values.iter().map(|v| v.len()).sum());
            for v in values {
                words.extend_from_slice(v.payload(party).data());
            }
            encode_words(&words)
        })
        .collect();
    let delivered = transport.exchange(payloads)?;
    // All parties receive identical payload sets; decode the view of party 0.
    let view = &delivered[0];
    let mut out: Vec<Vec<RingTensor>> = values.iter().map(|_| Vec::with_capacity(k)).collect();
    for bytes in view {
        let words = decode_words(bytes)?;
        let mut offset = 0;
        for (slot, v) in out.iter_mut().zip(values) {
            let n = v.len();
            let chunk = words
                .get(offset..offset + n)
                .ok_or_else(|| SharingError::Malformed("short opening payload".into()))?;
            slot.push(RingTensor::new(v.shape().to_vec(), chunk.to_vec()).expect("shape"));
            offset += n;
        }
    }
    Ok(out)
}

fn sum_all(parts: &[RingTensor]) -> RingTensor {
    let mut acc = RingTensor::zeros(parts[0].shape());
    for p in parts {
        acc.add_assign(p);
    }
    acc
}

/// Opens several shared values in a single round.
pub fn open<T: Transport + ?Sized>(
    transport: &mut T,
    values: &[&SharedTensor],
) -> Result<Vec<RingTensor>, SharingError> {
    Ok(broadcast(transport, values)?
        .iter()
        .map(|parts| sum_all(parts))
        .collect())
}

/// Beaver product of `x: [m x n]` and `w: [n x p]`.
///
/// One round: the masked differences `x - a` and `w - b` are opened together.
/// The result is the exact ring product, i.e. at the sum of the operands'
/// precisions; callers truncate.
pub fn beaver_matmul<T: Transport + ?Sized>(
    x: &SharedTensor,
    w: &SharedTensor,
    triple: BeaverTriple,
    transport: &mut T,
) -> Result<SharedTensor, SharingError> {
    let (m, n) = x.dims2()?;
    let (n2, p) = w.dims2()?;
    if n != n2 {
        return Err(SharingError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if triple.kind != TripleKind::Matmul
        || triple.a.shape() != [m, n]
        || triple.b.shape() != [n, p]
        || triple.c.shape() != [m, p]
    {
        return Err(SharingError::TripleShapeMismatch);
    }
    let d_sh = x.sub(&triple.a)?;
    let e_sh = w.sub(&triple.b)?;
    let opened = open(transport, &[&d_sh, &e_sh])?;
    let (d, e) = (&opened[0], &opened[1]);
    let de = d.matmul(e);
    let group = GroupId::derive("matmul", &[x.group_id(), w.group_id()]);
    let payloads = (0..x.parties())
        .map(|k| {
            let mut z = triple.c.payload(k).clone();
            z.add_assign(&d.matmul(triple.b.payload(k)));
            z.add_assign(&triple.a.payload(k).matmul(e));
            if k == 0 {
                z.add_assign(&de);
            }
            z
        })
        .collect();
    Ok(SharedTensor::from_payloads(group, payloads))
}

/// Element-wise Beaver product; one round, exact in the ring.
pub fn beaver_mul<T: Transport + ?Sized>(
    x: &SharedTensor,
    y: &SharedTensor,
    triple: BeaverTriple,
    transport: &mut T,
) -> Result<SharedTensor, SharingError> {
    if x.shape() != y.shape() {
        return Err(SharingError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    if triple.kind != TripleKind::Elementwise || triple.a.shape() != x.shape() {
        return Err(SharingError::TripleShapeMismatch);
    }
    let d_sh = x.sub(&triple.a)?;
    let e_sh = y.sub(&triple.b)?;
    let opened = open(transport, &[&d_sh, &e_sh])?;
    let (d, e) = (&opened[0], &opened[1]);
    let de = d.wrapping_mul(e);
    let group = GroupId::derive("mul", &[x.group_id(), y.group_id()]);
    let payloads = (0..x.parties())
        .map(|k| {
            let mut z = triple.c.payload(k).clone();
            z.add_assign(&d.wrapping_mul(triple.b.payload(k)));
            z.add_assign(&triple.a.payload(k).wrapping_mul(e));
            if k == 0 {
                z.add_assign(&de);
            }
            z
        })
        .collect();
    Ok(SharedTensor::from_payloads(group, payloads))
}

/// Result of opening `x + r`: the public sum plus each party's local wrap data.
struct MaskedOpening {
    /// `x + r mod 2^64`
    c: RingTensor,
    /// Per-party shares of the signed wrap count of `x`'s shares.
    x_wraps: Vec<RingTensor>,
}

fn signed_wrap(a: u64, b: u64) -> i64 {
    let wide = a as i64 as i128 + b as i64 as i128;
    ((wide - a.wrapping_add(b) as i64 as i128) >> 64) as i64
}

fn open_masked<T: Transport + ?Sized>(
    x: &SharedTensor,
    mask: &MaskTuple,
    transport: &mut T,
) -> Result<MaskedOpening, SharingError> {
    if mask.r.shape() != x.shape() {
        return Err(SharingError::InsufficientRandomness(format!(
            "mask shape {:?} does not cover {:?}",
            mask.r.shape(),
            x.shape()
        )));
    }
    let z = x.add(&mask.r)?;
    let parts = broadcast(transport, &[&z])?.remove(0);
    let c = sum_all(&parts);
    let n = c.len();
    // Public wrap count of the opened shares.
    let theta_z: Vec<u64> = (0..n)
        .map(|i| {
            let wide: i128 = parts.iter().map(|p| p.data()[i] as i64 as i128).sum();
            ((wide - c.data()[i] as i64 as i128) >> 64) as i64 as u64
        })
        .collect();
    let x_wraps = (0..x.parties())
        .map(|k| {
            let xs = x.payload(k).data();
            let rs = mask.r.payload(k).data();
            let ws = mask.wraps.payload(k).data();
            let data = (0..n)
                .map(|i| {
                    let beta = signed_wrap(xs[i], rs[i]) as u64;
                    let base = if k == 0 { theta_z[i] } else { 0 };
                    base.wrapping_add(beta).wrapping_sub(ws[i])
                })
                .collect();
            RingTensor::new(x.shape().to_vec(), data).expect("shape")
        })
        .collect();
    Ok(MaskedOpening { c, x_wraps })
}

fn truncate_with_wraps(x: &SharedTensor, wraps: &[RingTensor], frac_bits: u32) -> SharedTensor {
    let hi = 1u64 << (64 - frac_bits);
    x.map_local("truncate", |k, a| {
        a.shift_right_signed(frac_bits)
            .wrapping_sub(&wraps[k].mul_scalar(hi))
    })
}

/// Share-local truncation for two parties; correct except with probability
/// about `|x| / 2^63`.
fn truncate_local_two_party(x: &SharedTensor, frac_bits: u32) -> SharedTensor {
    x.map_local("truncate", |k, a| {
        if k == 0 {
            a.shift_right_signed(frac_bits)
        } else {
            a.wrapping_neg().shift_right_signed(frac_bits).wrapping_neg()
        }
    })
}

fn bit_plane(c: &RingTensor, bit: u32) -> RingTensor {
    RingTensor::new(
        c.shape().to_vec(),
        c.data().iter().map(|v| (v >> bit) & 1).collect(),
    )
    .expect("shape")
}

fn one_minus(t: &RingTensor) -> RingTensor {
    RingTensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| 1u64.wrapping_sub(*v)).collect(),
    )
    .expect("shape")
}

/// Sign test on an already opened `c = x + r`: returns shares of `[x >= 0]` as
/// ring integers 0/1, using a ripple borrow chain over the mask bits.
fn compare_from_opened<T: Transport + ?Sized>(
    c: &RingTensor,
    mask: &MaskTuple,
    dealer: &mut Dealer,
    transport: &mut T,
) -> Result<SharedTensor, SharingError> {
    let len = mask.bits.len();
    if len < 2 {
        return Err(SharingError::InsufficientRandomness(format!(
            "comparison needs at least 2 mask bits, got {len}"
        )));
    }
    let shape = c.shape().to_vec();
    // borrow into bit 1: [c_0 < r_0] = (1 - c_0) r_0
    let mut borrow = mask.bits[0].mul_public(&one_minus(&bit_plane(c, 0)))?;
    for i in 1..len - 1 {
        let r_i = &mask.bits[i];
        let t = beaver_mul(r_i, &borrow, dealer.elementwise_triple(&shape), transport)?;
        // c_i = 1: r_i b ; c_i = 0: r_i + b - r_i b
        let or = r_i.add(&borrow)?.sub(&t.mul_public_scalar(2))?;
        borrow = t.add(&or.mul_public(&one_minus(&bit_plane(c, i as u32)))?)?;
    }
    let top = &mask.bits[len - 1];
    let t = beaver_mul(top, &borrow, dealer.elementwise_triple(&shape), transport)?;
    let s = top.add(&borrow)?.sub(&t.mul_public_scalar(2))?;
    let c_top = bit_plane(c, len as u32 - 1);
    let flip = RingTensor::new(
        shape.clone(),
        c_top.data().iter().map(|v| 1u64.wrapping_sub(2 * v)).collect(),
    )
    .expect("shape");
    let msb = s.mul_public(&flip)?.add_public(&c_top)?;
    Ok(msb.neg().add_public_scalar(1))
}

/// Shares of `[x >= 0]` (ring integers 0/1) for every element of `x`.
///
/// Rounds: one masked opening, then `len - 1` sequential bit products where
/// `len` is the number of mask bits, i.e. linear in the comparison bit length.
pub fn secure_compare_ge_zero<T: Transport + ?Sized>(
    x: &SharedTensor,
    mask: MaskTuple,
    dealer: &mut Dealer,
    transport: &mut T,
) -> Result<SharedTensor, SharingError> {
    let opened = open_masked(x, &mask, transport)?;
    compare_from_opened(&opened.c, &mask, dealer, transport)
}

/// Lockstep execution context: ring parameters, transport and dealer.
#[derive(Debug, Clone)]
pub struct Session<T: Transport = SimTransport> {
    params: RingParams,
    transport: T,
    dealer: Dealer,
}

impl<T: Transport> Session<T> {
    pub fn new(params: RingParams, transport: T, dealer: Dealer) -> Result<Self, SharingError> {
        if transport.parties() != dealer.parties() {
            return Err(SharingError::PartyMismatch);
        }
        if transport.parties() < 2 {
            return Err(SharingError::InvalidPartyCount(transport.parties()));
        }
        Ok(Self {
            params,
            transport,
            dealer,
        })
    }

    pub fn params(&self) -> &RingParams {
        &self.params
    }

    pub fn parties(&self) -> usize {
        self.transport.parties()
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn dealer(&self) -> &Dealer {
        &self.dealer
    }

    pub fn ledger(&self) -> &RoundLedger {
        self.transport.ledger()
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    /// Encodes a public real constant.
    pub fn encode(&self, v: f64) -> u64 {
        self.params
            .encode_scalar(v)
            .expect("public constant within fixed-point range")
    }

    pub fn open(&mut self, values: &[&SharedTensor]) -> Result<Vec<RingTensor>, SharingError> {
        open(&mut self.transport, values)
    }

    /// Exact ring product of two shared matrices (precision adds up).
    pub fn matmul(&mut self, x: &SharedTensor, w: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let (m, n) = x.dims2()?;
        let (n2, p) = w.dims2()?;
        if n != n2 {
            return Err(SharingError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let triple = self.dealer.matmul_triple(m, n, p);
        beaver_matmul(x, w, triple, &mut self.transport)
    }

    /// Exact element-wise ring product.
    pub fn mul(&mut self, x: &SharedTensor, y: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let triple = self.dealer.elementwise_triple(x.shape());
        beaver_mul(x, y, triple, &mut self.transport)
    }

    /// Several independent element-wise products in one round.
    pub fn mul_many(
        &mut self,
        pairs: &[(&SharedTensor, &SharedTensor)],
    ) -> Result<Vec<SharedTensor>, SharingError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (x, y) in pairs {
            if x.shape() != y.shape() {
                return Err(SharingError::ShapeMismatch {
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
        }
        let xs: Vec<&SharedTensor> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<&SharedTensor> = pairs.iter().map(|p| p.1).collect();
        let x = SharedTensor::concat_flat(&xs)?;
        let y = SharedTensor::concat_flat(&ys)?;
        let z = self.mul(&x, &y)?;
        let shapes: Vec<Vec<usize>> = xs.iter().map(|t| t.shape().to_vec()).collect();
        z.split_flat(&shapes)
    }

    /// Brings a value at precision `2f` back to precision `f`.
    ///
    /// Two parties truncate locally (no communication). With more parties
    /// one masked opening of `x + 2^62 + r` suffices: the bias keeps the
    /// opened sum below `2^64` unless `r` has its top bit set, so the wrap is
    /// `msb(r) · (1 - msb(c))`, linear in shares. Error is under one unit in
    /// the last place for `|x| < 2^62`.
    pub fn truncate(&mut self, x: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let f = self.params.frac_bits();
        if self.parties() == 2 {
            return Ok(truncate_local_two_party(x, f));
        }
        let mask = self.dealer.trunc_mask(x.shape(), f);
        if mask.r.shape() != x.shape() {
            return Err(SharingError::InsufficientRandomness("truncation mask shape".into()));
        }
        let z = x.add_public_scalar(1 << 62).add(&mask.r)?;
        let c = sum_all(&broadcast(&mut self.transport, &[&z])?.remove(0));
        let hi = 1u64 << (64 - f);
        let bias = 1u64 << (62 - f);
        let no_top: Vec<u64> = c.data().iter().map(|v| (1 - (v >> 63)).wrapping_mul(hi)).collect();
        let no_top = RingTensor::new(c.shape().to_vec(), no_top).expect("shape");
        let c_hi = RingTensor::new(c.shape().to_vec(), c.data().iter().map(|v| (v >> f).wrapping_sub(bias)).collect())
            .expect("shape");
        let wrap = mask.msb.mul_public(&no_top)?;
        wrap.sub(&mask.hi)?.add_public(&c_hi)
    }

    /// Fixed-point element-wise product (multiply then truncate).
    pub fn mul_fx(&mut self, x: &SharedTensor, y: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let z = self.mul(x, y)?;
        self.truncate(&z)
    }

    /// Several fixed-point products sharing their rounds.
    pub fn mul_fx_many(
        &mut self,
        pairs: &[(&SharedTensor, &SharedTensor)],
    ) -> Result<Vec<SharedTensor>, SharingError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let raw = self.mul_many(pairs)?;
        let refs: Vec<&SharedTensor> = raw.iter().collect();
        let flat = SharedTensor::concat_flat(&refs)?;
        let t = self.truncate(&flat)?;
        let shapes: Vec<Vec<usize>> = raw.iter().map(|r| r.shape().to_vec()).collect();
        t.split_flat(&shapes)
    }

    /// Fixed-point matrix product (multiply then truncate).
    pub fn matmul_fx(&mut self, x: &SharedTensor, w: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let z = self.matmul(x, w)?;
        self.truncate(&z)
    }

    /// Shares of `[x >= 0]` as ring integers 0/1.
    pub fn ge_zero(&mut self, x: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let mask = self.dealer.mask(x.shape(), self.params.compare_bits());
        secure_compare_ge_zero(x, mask, &mut self.dealer, &mut self.transport)
    }

    /// `max(x, 0)` at unchanged precision.
    pub fn relu(&mut self, x: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let g = self.ge_zero(x)?;
        self.mul(&g, x)
    }

    /// `max(x, 0)` of a value at precision `2f`, returned at precision `f`.
    /// The truncation rides on the comparison's masked opening.
    pub fn relu_truncate(&mut self, x: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let mask = self.dealer.mask(x.shape(), self.params.compare_bits());
        let opened = open_masked(x, &mask, &mut self.transport)?;
        let truncated = truncate_with_wraps(x, &opened.x_wraps, self.params.frac_bits());
        let g = compare_from_opened(&opened.c, &mask, &mut self.dealer, &mut self.transport)?;
        self.mul(&g, &truncated)
    }

    /// Element-wise `max(x, y)`.
    pub fn max(&mut self, x: &SharedTensor, y: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let diff = x.sub(y)?;
        y.add(&self.relu(&diff)?)
    }

    /// `|x|` element-wise.
    pub fn abs(&mut self, x: &SharedTensor) -> Result<SharedTensor, SharingError> {
        let g = self.ge_zero(x)?;
        // sign = 2g - 1
        let sign = g.mul_public_scalar(2).add_public_scalar(u64::MAX);
        self.mul(&sign, x)
    }
}
