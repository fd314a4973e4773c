//! Trusted-dealer preprocessing: Beaver triples and masked-bit tuples.
//!
//! The dealer is the semi-honest preprocessing phase run in-process. It hands
//! out correlated randomness by value, so a triple cannot be consumed twice.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{split, GroupId, SharedTensor, SharingError};
use crate::fixedpoint::RingTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleKind {
    /// `c = a ⊙ b`
    Elementwise,
    /// `c = a · b`
    Matmul,
}

/// Shared `(a, b, c)` with `c = a·b` (or `a ⊙ b`) in the ring.
#[derive(Debug, Clone)]
pub struct BeaverTriple {
    pub kind: TripleKind,
    pub a: SharedTensor,
    pub b: SharedTensor,
    pub c: SharedTensor,
}

/// Randomness for one masked opening `x + r`.
///
/// `wraps` shares the signed wrap count of `r`'s own shares, i.e.
/// `Σ_k r_k = r + wraps·2^64` over the integers with every term read as `i64`,
/// which lets the parties truncate after opening. `bits[i]` shares bit `i` of
/// `r` (as the ring element 0 or 1) for the low `bits.len()` bits.
#[derive(Debug, Clone)]
pub struct MaskTuple {
    pub r: SharedTensor,
    pub wraps: SharedTensor,
    pub bits: Vec<SharedTensor>,
}

/// Mask for probabilistic truncation by `f` bits: shares of `r`, of
/// `r >> f` (logical) and of the top bit of `r`.
#[derive(Debug, Clone)]
pub struct TruncMask {
    pub r: SharedTensor,
    pub hi: SharedTensor,
    pub msb: SharedTensor,
}

#[derive(Debug, Clone)]
pub struct Dealer {
    rng: ChaCha20Rng,
    parties: usize,
    triples_issued: u64,
    masks_issued: u64,
}

impl Dealer {
    pub fn new(parties: usize, seed: u64) -> Result<Self, SharingError> {
        if parties < 2 {
            return Err(SharingError::InvalidPartyCount(parties));
        }
        Ok(Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            parties,
            triples_issued: 0,
            masks_issued: 0,
        })
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn triples_issued(&self) -> u64 {
        self.triples_issued
    }

    pub fn masks_issued(&self) -> u64 {
        self.masks_issued
    }

    fn random_tensor(&mut self, shape: &[usize]) -> RingTensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.next_u64()).collect();
        RingTensor::new(shape.to_vec(), data).expect("shape")
    }

    fn share_out(&mut self, secret: &RingTensor) -> SharedTensor {
        let group = GroupId::random(&mut self.rng);
        let payloads = split(secret, self.parties, &mut self.rng);
        SharedTensor::from_payloads(group, payloads)
    }

    /// Triple for `[m x n] · [n x p]`.
    pub fn matmul_triple(&mut self, m: usize, n: usize, p: usize) -> BeaverTriple {
        let a = self.random_tensor(&[m, n]);
        let b = self.random_tensor(&[n, p]);
        let c = a.matmul(&b);
        self.triples_issued += 1;
        BeaverTriple {
            kind: TripleKind::Matmul,
            a: self.share_out(&a),
            b: self.share_out(&b),
            c: self.share_out(&c),
        }
    }

    /// Triple for element-wise products of tensors with `shape`.
    pub fn elementwise_triple(&mut self, shape: &[usize]) -> BeaverTriple {
        let a = self.random_tensor(shape);
        let b = self.random_tensor(shape);
        let c = a.wrapping_mul(&b);
        self.triples_issued += 1;
        BeaverTriple {
            kind: TripleKind::Elementwise,
            a: self.share_out(&a),
            b: self.share_out(&b),
            c: self.share_out(&c),
        }
    }

    pub fn trunc_mask(&mut self, shape: &[usize], frac_bits: u32) -> TruncMask {
        let r = self.random_tensor(shape);
        let part = |f: &dyn Fn(u64) -> u64| {
            RingTensor::new(shape.to_vec(), r.data().iter().map(|&v| f(v)).collect()).expect("shape")
        };
        let (hi, msb) = (part(&|v| v >> frac_bits), part(&|v| v >> 63));
        self.masks_issued += 1;
        TruncMask {
            r: self.share_out(&r),
            hi: self.share_out(&hi),
            msb: self.share_out(&msb),
        }
    }

    /// Mask for a tensor of `shape`, with `bit_len` low bits decomposed.
    pub fn mask(&mut self, shape: &[usize], bit_len: u32) -> MaskTuple {
        let k = self.parties;
        let shares: Vec<RingTensor> = (0..k).map(|_| self.random_tensor(shape)).collect();
        let n = shares[0].len();
        let mut r = vec![0u64; n];
        let mut wraps = vec![0u64; n];
        for i in 0..n {
            let mut wide: i128 = 0;
            let mut sum: u64 = 0;
            for s in &shares {
                let v = s.data()[i];
                wide += v as i64 as i128;
                sum = sum.wrapping_add(v);
            }
            r[i] = sum;
            let theta = (wide - sum as i64 as i128) >> 64;
            wraps[i] = theta as i64 as u64;
        }
        let group = GroupId::random(&mut self.rng);
        let r_shared = SharedTensor::from_payloads(group, shares);
        let wraps = self.share_out(&RingTensor::new(shape.to_vec(), wraps).expect("shape"));
        let bits = (0..bit_len)
            .map(|b| {
                let bit = RingTensor::new(shape.to_vec(), r.iter().map(|v| (v >> b) & 1).collect())
                    .expect("shape");
                self.share_out(&bit)
            })
            .collect();
        self.masks_issued += 1;
        MaskTuple {
            r: r_shared,
            wraps,
            bits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_are_correct() {
        let mut d = Dealer::new(3, 1).unwrap();
        let t = d.matmul_triple(2, 3, 4);
        assert_eq!(t.c.reveal(), t.a.reveal().matmul(&t.b.reveal()));
        let t = d.elementwise_triple(&[5]);
        assert_eq!(t.c.reveal(), t.a.reveal().wrapping_mul(&t.b.reveal()));
        assert_eq!(d.triples_issued(), 2);
    }

    #[test]
    fn masks_are_consistent() {
        let mut d = Dealer::new(4, 2).unwrap();
        let m = d.mask(&[64], 64);
        let r = m.r.reveal();
        for (b, bit) in m.bits.iter().enumerate() {
            let bits = bit.reveal();
            for (i, &v) in r.data().iter().enumerate() {
                assert_eq!(bits.data()[i], (v >> b) & 1);
            }
        }
        let wraps = m.wraps.reveal();
        for i in 0..64 {
            let wide: i128 = (0..4).map(|k| m.r.payload(k).data()[i] as i64 as i128).sum();
            let expect = wide - r.data()[i] as i64 as i128;
            assert_eq!((wraps.data()[i] as i64 as i128) << 64, expect);
        }
        assert_eq!(d.masks_issued(), 1);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut a = Dealer::new(2, 9).unwrap();
        let mut b = Dealer::new(2, 9).unwrap();
        assert_eq!(a.elementwise_triple(&[3]).c, b.elementwise_triple(&[3]).c);
        assert!(Dealer::new(1, 0).is_err());
    }
}
