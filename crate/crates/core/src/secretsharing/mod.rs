//! Additive secret sharing over `Z_{2^64}`.
//!
//! A secret `x` is split into `K` payloads that sum to `x` modulo `2^64`; any
//! `K-1` of them are uniformly random. Linear operations are local; products and
//! comparisons are interactive and live in [`protocol`].

pub mod codec;
pub mod dealer;
pub mod protocol;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fixedpoint::RingTensor;
use crate::transport::TransportError;

pub use dealer::{BeaverTriple, Dealer, MaskTuple, TripleKind, TruncMask};
pub use protocol::{beaver_matmul, beaver_mul, secure_compare_ge_zero, Session};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SharingError {
    #[error("at least 2 parties are required, got {0}")]
    InvalidPartyCount(usize),
    #[error("share of party {party} is missing")]
    MissingShare { party: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("shares belong to different parties or groups")]
    PartyMismatch,
    #[error("triple shapes do not match the operands")]
    TripleShapeMismatch,
    #[error("insufficient correlated randomness: {0}")]
    InsufficientRandomness(String),
    #[error("malformed share encoding: {0}")]
    Malformed(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Opaque identifier tying together the `K` shares of one secret.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub [u8; 16]);

impl GroupId {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        Self(id)
    }

    /// Deterministic id of a value derived from `parents` by operation `tag`.
    pub fn derive(tag: &str, parents: &[GroupId]) -> Self {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        for p in parents {
            h.update(p.0);
        }
        let digest = h.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        Self(id)
    }
}

/// One party's additive share of a ring tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareTensor {
    pub party_id: usize,
    pub group_id: GroupId,
    pub payload: RingTensor,
}

impl ShareTensor {
    pub fn shape(&self) -> &[usize] {
        self.payload.shape()
    }
}

fn check_pair(x: &ShareTensor, y: &ShareTensor) -> Result<(), SharingError> {
    if x.party_id != y.party_id {
        return Err(SharingError::PartyMismatch);
    }
    if x.shape() != y.shape() {
        return Err(SharingError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Local addition of two shares held by the same party.
pub fn add_shares(x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor, SharingError> {
    check_pair(x, y)?;
    Ok(ShareTensor {
        party_id: x.party_id,
        group_id: GroupId::derive("add", &[x.group_id, y.group_id]),
        payload: x.payload.wrapping_add(&y.payload),
    })
}

/// Local element-wise multiplication of a share by a public ring tensor.
/// The result carries the combined precision of both factors.
pub fn scale_public(x: &ShareTensor, c: &RingTensor) -> Result<ShareTensor, SharingError> {
    if x.shape() != c.shape() {
        return Err(SharingError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    Ok(ShareTensor {
        party_id: x.party_id,
        group_id: GroupId::derive("scale", &[x.group_id]),
        payload: x.payload.wrapping_mul(c),
    })
}

/// Splits `secret` into `parties` additive shares. The first `K-1` payloads are
/// uniform; the last one closes the sum.
pub fn share<R: RngCore + ?Sized>(
    secret: &RingTensor,
    parties: usize,
    rng: &mut R,
) -> Result<Vec<ShareTensor>, SharingError> {
    if parties < 2 {
        return Err(SharingError::InvalidPartyCount(parties));
    }
    let group_id = GroupId::random(rng);
    Ok(split(secret, parties, rng)
        .into_iter()
        .enumerate()
        .map(|(party_id, payload)| ShareTensor {
            party_id,
            group_id,
            payload,
        })
        .collect())
}

pub(crate) fn split<R: RngCore + ?Sized>(
    secret: &RingTensor,
    parties: usize,
    rng: &mut R,
) -> Vec<RingTensor> {
    let mut last = secret.clone();
    let mut out = Vec::with_capacity(parties);
    for _ in 1..parties {
        let data: Vec<u64> = (0..secret.len()).map(|_| rng.next_u64()).collect();
        let r = RingTensor::new(secret.shape().to_vec(), data).expect("shape preserved");
        last.sub_assign(&r);
        out.push(r);
    }
    out.push(last);
    out
}

/// Sums the shares of all `parties` parties. Fails if any party's share is absent.
pub fn reconstruct(shares: &[ShareTensor], parties: usize) -> Result<RingTensor, SharingError> {
    let mut slots: Vec<Option<&ShareTensor>> = vec![None; parties];
    for s in shares {
        if s.party_id >= parties || slots[s.party_id].is_some() {
            return Err(SharingError::PartyMismatch);
        }
        slots[s.party_id] = Some(s);
    }
    let first = match slots.iter().position(Option::is_none) {
        Some(party) => return Err(SharingError::MissingShare { party }),
        None => slots[0].expect("checked"),
    };
    let mut acc = RingTensor::zeros(first.shape());
    for s in slots.into_iter().flatten() {
        if s.group_id != first.group_id {
            return Err(SharingError::PartyMismatch);
        }
        if s.shape() != first.shape() {
            return Err(SharingError::ShapeMismatch {
                left: first.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        acc.add_assign(&s.payload);
    }
    Ok(acc)
}

/// All `K` shares of one secret, indexed by party. This is the simulation
/// coordinator's handle on a distributed value: party `k` only ever reads
/// `shares[k]` when computing locally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedTensor {
    shares: Vec<ShareTensor>,
}

impl SharedTensor {
    pub fn from_shares(mut shares: Vec<ShareTensor>) -> Result<Self, SharingError> {
        if shares.len() < 2 {
            return Err(SharingError::InvalidPartyCount(shares.len()));
        }
        shares.sort_by_key(|s| s.party_id);
        let group = shares[0].group_id;
        let shape = shares[0].shape().to_vec();
        for (k, s) in shares.iter().enumerate() {
            if s.party_id != k {
                return Err(SharingError::MissingShare { party: k });
            }
            if s.group_id != group {
                return Err(SharingError::PartyMismatch);
            }
            if s.shape() != shape.as_slice() {
                return Err(SharingError::ShapeMismatch {
                    left: shape.clone(),
                    right: s.shape().to_vec(),
                });
            }
        }
        Ok(Self { shares })
    }

    pub fn share<R: RngCore + ?Sized>(
        secret: &RingTensor,
        parties: usize,
        rng: &mut R,
    ) -> Result<Self, SharingError> {
        Ok(Self {
            shares: share(secret, parties, rng)?,
        })
    }

    pub(crate) fn from_payloads(group_id: GroupId, payloads: Vec<RingTensor>) -> Self {
        Self {
            shares: payloads
                .into_iter()
                .enumerate()
                .map(|(party_id, payload)| ShareTensor {
                    party_id,
                    group_id,
                    payload,
                })
                .collect(),
        }
    }

    /// Sharing of a public value: party 0 holds it, everyone else holds zero.
    pub fn public(value: &RingTensor, parties: usize) -> Self {
        let payloads = (0..parties)
            .map(|k| {
                if k == 0 {
                    value.clone()
                } else {
                    RingTensor::zeros(value.shape())
                }
            })
            .collect();
        Self::from_payloads(GroupId::derive("public", &[]), payloads)
    }

    pub fn parties(&self) -> usize {
        self.shares.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.shares[0].shape()
    }

    pub fn len(&self) -> usize {
        self.shares[0].payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_id(&self) -> GroupId {
        self.shares[0].group_id
    }

    pub fn share_of(&self, party: usize) -> &ShareTensor {
        &self.shares[party]
    }

    pub fn shares(&self) -> &[ShareTensor] {
        &self.shares
    }

    pub fn into_shares(self) -> Vec<ShareTensor> {
        self.shares
    }

    pub fn payload(&self, party: usize) -> &RingTensor {
        &self.shares[party].payload
    }

    /// Reconstructs the secret. Only the output recipient should call this.
    pub fn reveal(&self) -> RingTensor {
        reconstruct(&self.shares, self.parties()).expect("shared tensor is well formed")
    }

    /// Applies a party-local map to every share.
    pub fn map_local(&self, tag: &str, f: impl Fn(usize, &RingTensor) -> RingTensor) -> Self {
        let group = GroupId::derive(tag, &[self.group_id()]);
        Self::from_payloads(
            group,
            self.shares
                .iter()
                .map(|s| f(s.party_id, &s.payload))
                .collect(),
        )
    }

    /// Applies a party-local binary map to matching shares of two tensors.
    pub fn zip_local(
        &self,
        other: &Self,
        tag: &str,
        f: impl Fn(usize, &RingTensor, &RingTensor) -> RingTensor,
    ) -> Result<Self, SharingError> {
        if self.parties() != other.parties() {
            return Err(SharingError::PartyMismatch);
        }
        let group = GroupId::derive(tag, &[self.group_id(), other.group_id()]);
        Ok(Self::from_payloads(
            group,
            self.shares
                .iter()
                .zip(&other.shares)
                .map(|(a, b)| f(a.party_id, &a.payload, &b.payload))
                .collect(),
        ))
    }

    fn same_shape(&self, other: &Self) -> Result<(), SharingError> {
        if self.shape() != other.shape() {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, SharingError> {
        self.same_shape(other)?;
        self.zip_local(other, "add", |_, a, b| a.wrapping_add(b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SharingError> {
        self.same_shape(other)?;
        self.zip_local(other, "sub", |_, a, b| a.wrapping_sub(b))
    }

    pub fn neg(&self) -> Self {
        self.map_local("neg", |_, a| a.wrapping_neg())
    }

    /// Adds a public tensor (party 0 absorbs it).
    pub fn add_public(&self, c: &RingTensor) -> Result<Self, SharingError> {
        if self.shape() != c.shape() {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        Ok(self.map_local("add_public", |k, a| {
            if k == 0 {
                a.wrapping_add(c)
            } else {
                a.clone()
            }
        }))
    }

    /// Adds a public constant to every element.
    pub fn add_public_scalar(&self, c: u64) -> Self {
        self.map_local("add_public_scalar", |k, a| {
            if k == 0 {
                a.add_scalar(c)
            } else {
                a.clone()
            }
        })
    }

    /// Element-wise product with a public tensor.
    pub fn mul_public(&self, c: &RingTensor) -> Result<Self, SharingError> {
        if self.shape() != c.shape() {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        Ok(self.map_local("mul_public", |_, a| a.wrapping_mul(c)))
    }

    pub fn mul_public_scalar(&self, c: u64) -> Self {
        self.map_local("mul_public_scalar", |_, a| a.mul_scalar(c))
    }

    /// `self` (`[m x n]`) times a public `[n x p]` matrix.
    pub fn matmul_public(&self, w: &RingTensor) -> Result<Self, SharingError> {
        let (_, n) = self.dims2()?;
        match w.dims2() {
            Some((n2, _)) if n2 == n => {}
            _ => {
                return Err(SharingError::ShapeMismatch {
                    left: self.shape().to_vec(),
                    right: w.shape().to_vec(),
                })
            }
        }
        Ok(self.map_local("matmul_public", |_, a| a.matmul(w)))
    }

    /// Adds a shared row vector to every row.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self, SharingError> {
        let (_, c) = self.dims2()?;
        if row.len() != c {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: row.shape().to_vec(),
            });
        }
        self.zip_local(row, "bias", |_, a, b| a.add_row_broadcast(b))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, SharingError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: shape,
            });
        }
        Ok(self.map_local("reshape", |_, a| {
            a.clone().reshape(shape.clone()).expect("length checked")
        }))
    }

    pub fn transpose(&self) -> Result<Self, SharingError> {
        self.dims2()?;
        Ok(self.map_local("transpose", |_, a| a.transpose()))
    }

    pub fn row_sums(&self) -> Result<Self, SharingError> {
        self.dims2()?;
        Ok(self.map_local("row_sums", |_, a| a.row_sums()))
    }

    pub fn dims2(&self) -> Result<(usize, usize), SharingError> {
        self.payload(0)
            .dims2()
            .ok_or_else(|| SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: vec![0, 0],
            })
    }

    /// Column `j` of a rank-2 tensor as an `[rows x 1]` tensor.
    pub fn column(&self, j: usize) -> Result<Self, SharingError> {
        let (r, c) = self.dims2()?;
        if j >= c {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: vec![r, j + 1],
            });
        }
        Ok(self.map_local("column", |_, a| {
            let data = (0..r).map(|i| a.data()[i * c + j]).collect();
            RingTensor::new(vec![r, 1], data).expect("column shape")
        }))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn columns(&self, start: usize, end: usize) -> Result<Self, SharingError> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: vec![r, end],
            });
        }
        let w = end - start;
        Ok(self.map_local("columns", |_, a| {
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&a.data()[i * c + start..i * c + end]);
            }
            RingTensor::new(vec![r, w], data).expect("columns shape")
        }))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self, SharingError> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: vec![end, c],
            });
        }
        Ok(self.map_local("rows", |_, a| {
            RingTensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())
                .expect("rows shape")
        }))
    }

    /// Concatenates flattened tensors into one `[total]` vector.
    pub fn concat_flat(parts: &[&Self]) -> Result<Self, SharingError> {
        let first = parts
            .first()
            .ok_or_else(|| SharingError::InsufficientRandomness("empty concat".into()))?;
        let k = first.parties();
        if parts.iter().any(|p| p.parties() != k) {
            return Err(SharingError::PartyMismatch);
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let ids: Vec<GroupId> = parts.iter().map(|p| p.group_id()).collect();
        let payloads = (0..k)
            .map(|party| {
                let mut data = Vec::with_capacity(total);
                for p in parts {
                    data.extend_from_slice(p.payload(party).data());
                }
                RingTensor::new(vec![total], data).expect("concat shape")
            })
            .collect();
        Ok(Self::from_payloads(GroupId::derive("concat", &ids), payloads))
    }

    /// Concatenates rank-2 tensors with equal row counts side by side.
    pub fn hcat(parts: &[&Self]) -> Result<Self, SharingError> {
        let first = parts
            .first()
            .ok_or_else(|| SharingError::InsufficientRandomness("empty concat".into()))?;
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r || p.parties() != first.parties() {
                return Err(SharingError::ShapeMismatch {
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let ids: Vec<GroupId> = parts.iter().map(|p| p.group_id()).collect();
        let payloads = (0..first.parties())
            .map(|party| {
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&p.payload(party).data()[i * w..(i + 1) * w]);
                    }
                }
                RingTensor::new(vec![r, total], data).expect("hcat shape")
            })
            .collect();
        Ok(Self::from_payloads(GroupId::derive("hcat", &ids), payloads))
    }

    /// Splits a flat tensor into consecutive pieces with the given shapes.
    pub fn split_flat(&self, shapes: &[Vec<usize>]) -> Result<Vec<Self>, SharingError> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != self.len() {
            return Err(SharingError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: vec![total],
            });
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(shapes.len());
        for (idx, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let group = GroupId::derive(&format!("split{idx}"), &[self.group_id()]);
            let payloads = self
                .shares
                .iter()
                .map(|s| {
                    RingTensor::new(shape.clone(), s.payload.data()[offset..offset + n].to_vec())
                        .expect("split shape")
                })
                .collect();
            out.push(Self::from_payloads(group, payloads));
            offset += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::RingParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_secret_three_parties() {
        let s = RingTensor::zeros(&[4]);
        let shares = share(&s, 3, &mut rng(1)).unwrap();
        assert_eq!(shares.len(), 3);
        assert_eq!(reconstruct(&shares, 3).unwrap(), s);
        assert!(shares.iter().all(|sh| sh.group_id == shares[0].group_id));
    }

    #[test]
    fn two_party_definition() {
        let p = RingParams::default();
        let secret = RingTensor::scalar(p.encode_scalar(3.0).unwrap());
        let shares = share(&secret, 2, &mut rng(2)).unwrap();
        let r = shares[0].payload.data()[0];
        assert_eq!(shares[1].payload.data()[0], secret.data()[0].wrapping_sub(r));
    }

    #[test]
    fn rejects_single_party() {
        let s = RingTensor::zeros(&[1]);
        assert_eq!(
            share(&s, 1, &mut rng(0)).unwrap_err(),
            SharingError::InvalidPartyCount(1)
        );
    }

    #[test]
    fn many_random_secrets_reconstruct_exactly() {
        let mut r = rng(3);
        for i in 0..1_000 {
            let k = 2 + i % 4;
            let data: Vec<u64> = (0..5).map(|_| r.gen()).collect();
            let secret = RingTensor::new(vec![5], data).unwrap();
            let shares = share(&secret, k, &mut r).unwrap();
            assert_eq!(reconstruct(&shares, k).unwrap(), secret);
        }
    }

    #[test]
    fn withheld_share_is_detected() {
        let p = RingParams::default();
        let secret = RingTensor::scalar(p.one());
        let mut shares = share(&secret, 3, &mut rng(4)).unwrap();
        assert_eq!(reconstruct(&shares, 3).unwrap(), secret);
        shares.remove(1);
        assert_eq!(
            reconstruct(&shares, 3).unwrap_err(),
            SharingError::MissingShare { party: 1 }
        );
    }

    #[test]
    fn matrix_round_trip() {
        let secret = RingTensor::new(vec![2, 2], vec![1, 2, 3, u64::MAX]).unwrap();
        let shares = share(&secret, 4, &mut rng(5)).unwrap();
        assert_eq!(reconstruct(&shares, 4).unwrap(), secret);
    }

    #[test]
    fn local_linear_ops() {
        let p = RingParams::default();
        let mut r = rng(6);
        let two = share(&RingTensor::scalar(p.encode_scalar(2.0).unwrap()), 3, &mut r).unwrap();
        let three = share(&RingTensor::scalar(p.encode_scalar(3.0).unwrap()), 3, &mut r).unwrap();
        let sum: Vec<_> = two
            .iter()
            .zip(&three)
            .map(|(a, b)| add_shares(a, b).unwrap())
            .collect();
        assert_eq!(p.decode_scalar(reconstruct(&sum, 3).unwrap().data()[0]), 5.0);

        let one = RingTensor::scalar(1);
        let scaled: Vec<_> = two.iter().map(|s| scale_public(s, &one).unwrap()).collect();
        assert_eq!(
            reconstruct(&scaled, 3).unwrap(),
            reconstruct(&two, 3).unwrap()
        );
    }

    #[test]
    fn local_ops_reject_mismatches() {
        let mut r = rng(7);
        let a = share(&RingTensor::zeros(&[2]), 2, &mut r).unwrap();
        let b = share(&RingTensor::zeros(&[3]), 2, &mut r).unwrap();
        assert!(matches!(
            add_shares(&a[0], &b[0]),
            Err(SharingError::ShapeMismatch { .. })
        ));
        let c = share(&RingTensor::zeros(&[2]), 2, &mut r).unwrap();
        assert_eq!(add_shares(&a[0], &c[1]), Err(SharingError::PartyMismatch));
        assert!(scale_public(&a[0], &RingTensor::zeros(&[3])).is_err());
    }

    #[test]
    fn shared_tensor_slicing() {
        let mut r = rng(8);
        let m = RingTensor::new(vec![2, 3], (1..=6).collect()).unwrap();
        let s = SharedTensor::share(&m, 3, &mut r).unwrap();
        assert_eq!(s.column(1).unwrap().reveal().data(), &[2, 5]);
        assert_eq!(s.columns(1, 3).unwrap().reveal().data(), &[2, 3, 5, 6]);
        assert_eq!(s.rows(1, 2).unwrap().reveal().data(), &[4, 5, 6]);
        assert_eq!(s.transpose().unwrap().reveal(), m.transpose());
        let h = SharedTensor::hcat(&[&s, &s.column(0).unwrap()]).unwrap();
        assert_eq!(h.reveal().data(), &[1, 2, 3, 1, 4, 5, 6, 4]);
        let flat = SharedTensor::concat_flat(&[&s, &s]).unwrap();
        let parts = flat.split_flat(&[vec![2, 3], vec![6]]).unwrap();
        assert_eq!(parts[0].reveal(), m);
        assert_eq!(parts[1].reveal().data(), m.data());
    }

    proptest! {
        #[test]
        fn addition_distributes_over_reconstruction(
            xs in proptest::collection::vec(any::<u64>(), 1..8),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut r = rng(seed);
            let ys: Vec<u64> = xs.iter().map(|x| x.rotate_left(7) ^ seed).collect();
            let x = RingTensor::new(vec![xs.len()], xs.clone()).unwrap();
            let y = RingTensor::new(vec![ys.len()], ys).unwrap();
            let sx = SharedTensor::share(&x, k, &mut r).unwrap();
            let sy = SharedTensor::share(&y, k, &mut r).unwrap();
            prop_assert_eq!(sx.add(&sy).unwrap().reveal(), x.wrapping_add(&y));
            prop_assert_eq!(sx.sub(&sy).unwrap().reveal(), x.wrapping_sub(&y));
        }
    }
}
