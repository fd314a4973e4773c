//! Protected forward pass over additive shares.
//!
//! Layer costs on the transport: a fully connected layer is one Beaver matrix
//! product (one round) with the bias added locally. Its output is at double
//! precision; when a ReLU follows, the ReLU's masked opening also performs
//! the truncation, otherwise a plain truncation brings it back to `f` (local
//! for two parties, one round for more).

mod kernels;

use std::path::Path;

use rand::RngCore;
use thiserror::Error;

pub use kernels::{
    broadcast_column, clamp, exp, inv_sqrt, log, reciprocal, row_max, scale, softmax_entropy, sqrt,
    ApproxConfig,
};

use crate::fixedpoint::{encode, FixedPointError, RingParams, RingTensor};
use crate::scalar::Real;
use crate::secretsharing::codec::{decode_share, encode_share};
use crate::secretsharing::{Session, SharedTensor, SharingError};
use crate::tensor_nn::{LayerSpec, Matrix, ModelSpec, NnError};
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum SecureNnError {
    #[error("need at least 2 parties, got {0}")]
    InvalidPartyCount(usize),
    #[error("approximation domain: {0}")]
    ApproximationDomain(String),
    #[error("input has {got} features, model expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bundle: {0}")]
    Bundle(String),
}

impl SecureNnError {
    /// The aborting party if this error is a fail-stop abort.
    pub fn aborted_party(&self) -> Option<usize> {
        match self {
            Self::Sharing(SharingError::Transport(
                crate::transport::TransportError::PartyAbort { party, .. },
            )) => Some(*party),
            _ => None,
        }
    }
}

/// A model whose weights and biases exist only as shares.
#[derive(Debug, Clone)]
pub struct ProtectedModel {
    name: String,
    layers: Vec<LayerSpec>,
    /// `(W, b)` per fully connected layer; `W: [in x out]`, `b: [out]`.
    weights: Vec<(SharedTensor, SharedTensor)>,
    params: RingParams,
}

/// Encodes and shares every weight and bias of `model` among `parties`.
pub fn provision<T: Real, R: RngCore + ?Sized>(
    model: &ModelSpec<T>,
    parties: usize,
    params: &RingParams,
    rng: &mut R,
) -> Result<ProtectedModel, SecureNnError> {
    if parties < 2 {
        return Err(SecureNnError::InvalidPartyCount(parties));
    }
    let mut weights = Vec::with_capacity(model.dense().len());
    for d in model.dense() {
        let w = encode(d.w.data(), &[d.in_dim(), d.out_dim()], params)?;
        let b = encode(&d.b, &[d.out_dim()], params)?;
        weights.push((
            SharedTensor::share(&w, parties, rng)?,
            SharedTensor::share(&b, parties, rng)?,
        ));
    }
    Ok(ProtectedModel {
        name: model.name.clone(),
        layers: model.layers().to_vec(),
        weights,
        params: *params,
    })
}

impl ProtectedModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[(SharedTensor, SharedTensor)] {
        &self.weights
    }

    pub fn parties(&self) -> usize {
        self.weights[0].0.parties()
    }

    pub fn params(&self) -> &RingParams {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].0.shape()[0]
    }

    /// Reconstructs and decodes every weight. Test and audit use only.
    pub fn reveal_model(&self) -> Result<ModelSpec<f64>, SecureNnError> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.weights.iter().map(|(w, _)| w.shape()[1]));
        let mut model = ModelSpec::<f64>::zeros(&self.name, &dims)?;
        for (d, (w, b)) in model.dense_mut().iter_mut().zip(&self.weights) {
            let wv = crate::fixedpoint::decode::<f64>(&w.reveal(), &self.params);
            d.w = Matrix::new(w.shape()[0], w.shape()[1], wv);
            d.b = crate::fixedpoint::decode::<f64>(&b.reveal(), &self.params);
        }
        Ok(model)
    }

    /// One party's view: its weight and bias shares, serialized back to back
    /// after a `u32` layer count.
    pub fn party_bundle(&self, party: usize) -> Result<Vec<u8>, SecureNnError> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (w, b) in &self.weights {
            out.extend(encode_share(w.share_of(party))?);
            out.extend(encode_share(b.share_of(party))?);
        }
        Ok(out)
    }

    /// Rebuilds a protected model from every party's bundle, in party order.
    /// Layers are the usual FC/ReLU chain ending in softmax.
    pub fn from_bundles(
        name: &str,
        bundles: &[Vec<u8>],
        params: &RingParams,
    ) -> Result<Self, SecureNnError> {
        if bundles.len() < 2 {
            return Err(SecureNnError::InvalidPartyCount(bundles.len()));
        }
        let mut per_party: Vec<Vec<crate::secretsharing::ShareTensor>> = Vec::new();
        let mut count = None;
        for bytes in bundles {
            let head = bytes
                .get(..4)
                .ok_or_else(|| SecureNnError::Bundle("missing layer count".into()))?;
            let n = u32::from_le_bytes(head.try_into().expect("4 bytes")) as usize;
            if *count.get_or_insert(n) != n {
                return Err(SecureNnError::Bundle("layer counts differ between parties".into()));
            }
            let mut pos = 4;
            let mut shares = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                let (s, used) = decode_share(&bytes[pos..])?;
                pos += used;
                shares.push(s);
            }
            if pos != bytes.len() {
                return Err(SecureNnError::Bundle("trailing bytes".into()));
            }
            per_party.push(shares);
        }
        let n = count.unwrap_or(0);
        if n == 0 {
            return Err(SecureNnError::Bundle("no layers".into()));
        }
        let mut weights = Vec::with_capacity(n);
        let mut dims = Vec::new();
        for l in 0..n {
            let gather = |idx: usize| {
                SharedTensor::from_shares(per_party.iter().map(|p| p[idx].clone()).collect())
            };
            let w = gather(2 * l)?;
            let b = gather(2 * l + 1)?;
            let (i, o) = w.dims2()?;
            if b.shape() != [o] {
                return Err(SecureNnError::Bundle("bias does not match weights".into()));
            }
            if l == 0 {
                dims.push(i);
            }
            dims.push(o);
            weights.push((w, b));
        }
        let layers = ModelSpec::<f64>::zeros(name, &dims)?.layers().to_vec();
        Ok(Self {
            name: name.to_string(),
            layers,
            weights,
            params: *params,
        })
    }

    /// Writes `party_<k>.bin` for every party into `dir`.
    pub fn save_bundles(&self, dir: &Path) -> Result<(), SecureNnError> {
        std::fs::create_dir_all(dir).map_err(|e| SecureNnError::Bundle(e.to_string()))?;
        for k in 0..self.parties() {
            std::fs::write(dir.join(format!("party_{k}.bin")), self.party_bundle(k)?)
                .map_err(|e| SecureNnError::Bundle(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load_bundles(
        name: &str,
        dir: &Path,
        parties: usize,
        params: &RingParams,
    ) -> Result<Self, SecureNnError> {
        let bundles = (0..parties)
            .map(|k| {
                std::fs::read(dir.join(format!("party_{k}.bin")))
                    .map_err(|e| SecureNnError::Bundle(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_bundles(name, &bundles, params)
    }
}

/// Encodes a batch of inputs `[n x d]` and shares it.
pub fn share_input<T: Real, R: RngCore + ?Sized>(
    x: &Matrix<T>,
    parties: usize,
    params: &RingParams,
    rng: &mut R,
) -> Result<SharedTensor, SecureNnError> {
    let t = encode(x.data(), &[x.rows(), x.cols()], params)?;
    Ok(SharedTensor::share(&t, parties, rng)?)
}

/// Decodes an opened `[n x c]` tensor at precision `frac_bits`.
pub fn decode_matrix(t: &RingTensor, frac_bits: u32) -> Matrix<f64> {
    let (r, c) = t.dims2().unwrap_or((1, t.len()));
    let scale = 2f64.powi(frac_bits as i32);
    Matrix::new(r, c, t.data().iter().map(|&v| v as i64 as f64 / scale).collect())
}

/// Affine part of one FC layer: `x·W + b` at double precision. One round.
pub fn secure_linear<T: Transport>(
    session: &mut Session<T>,
    x: &SharedTensor,
    w: &SharedTensor,
    b: &SharedTensor,
) -> Result<SharedTensor, SecureNnError> {
    let z = session.matmul(x, w)?;
    let b2 = b.mul_public_scalar(session.params().one());
    Ok(z.add_row_broadcast(&b2)?)
}

/// Protected forward pass of a batch `[n x d]`; returns logits at precision
/// `f`. A fail-stop abort surfaces as an error and nothing is revealed.
pub fn secure_forward<T: Transport>(
    pm: &ProtectedModel,
    x: &SharedTensor,
    session: &mut Session<T>,
) -> Result<SharedTensor, SecureNnError> {
    let (_, d) = x.dims2()?;
    if d != pm.input_dim() {
        return Err(SecureNnError::ShapeMismatch {
            expected: pm.input_dim(),
            got: d,
        });
    }
    let mut h = x.clone();
    let mut fc = 0;
    let layers = &pm.layers;
    for (i, layer) in layers.iter().enumerate() {
        if let LayerSpec::FullyConnected { .. } = layer {
            let (w, b) = &pm.weights[fc];
            let z = secure_linear(session, &h, w, b)?;
            h = if layers.get(i + 1) == Some(&LayerSpec::Relu) {
                session.relu_truncate(&z)?
            } else {
                session.truncate(&z)?
            };
            fc += 1;
        }
    }
    Ok(h)
}

/// Shared softmax over the rows of `[n x c]` logits.
pub fn secure_softmax<T: Transport>(
    z: &SharedTensor,
    cfg: &ApproxConfig,
    session: &mut Session<T>,
) -> Result<SharedTensor, SecureNnError> {
    kernels::softmax(session, z, cfg)
}

/// Shared entropy (nats) of the rows of `[n x c]` probabilities, `[n x 1]`.
pub fn secure_entropy<T: Transport>(
    p: &SharedTensor,
    cfg: &ApproxConfig,
    session: &mut Session<T>,
) -> Result<SharedTensor, SecureNnError> {
    kernels::entropy(session, p, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secretsharing::Dealer;
    use crate::tensor_nn::{build_with_dims, entropy, forward, softmax, Dense};
    use crate::transport::SimTransport;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn session(k: usize, seed: u64) -> Session {
        Session::new(
            RingParams::default(),
            SimTransport::local(k),
            Dealer::new(k, seed).unwrap(),
        )
        .unwrap()
    }

    fn reveal(x: &SharedTensor) -> Matrix<f64> {
        decode_matrix(&x.reveal(), 16)
    }

    #[test]
    fn provision_rejects_single_party() {
        let m = build_with_dims::<f64>("m", &[2, 2], 0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            provision(&m, 1, &RingParams::default(), &mut rng),
            Err(SecureNnError::InvalidPartyCount(1))
        ));
    }

    #[test]
    fn provisioned_weights_decode_back() {
        let m = build_with_dims::<f64>("m", &[20, 8, 3], 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pm = provision(&m, 3, &RingParams::default(), &mut rng).unwrap();
        let back = pm.reveal_model().unwrap();
        for (a, b) in m.dense().iter().zip(back.dense()) {
            for (x, y) in a.w.data().iter().chain(&a.b).zip(b.w.data().iter().chain(&b.b)) {
                assert!((x - y).abs() <= 2f64.powi(-17));
            }
        }
        let zero = ModelSpec::<f64>::zeros("z", &[4, 2]).unwrap();
        let pz = provision(&zero, 2, &RingParams::default(), &mut rng).unwrap();
        assert!(pz.weights()[0].0.reveal().data().iter().all(|&v| v == 0));
        // no party's share equals the encoded weights
        let enc = encode(m.dense()[0].w.data(), &[20, 8], &RingParams::default()).unwrap();
        for k in 0..3 {
            assert_ne!(pm.weights()[0].0.payload(k), &enc);
        }
    }

    #[test]
    fn bundles_round_trip() {
        let m = build_with_dims::<f32>("m", &[6, 4, 2], 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let params = RingParams::default();
        let pm = provision(&m, 3, &params, &mut rng).unwrap();
        let bundles: Vec<Vec<u8>> = (0..3).map(|k| pm.party_bundle(k).unwrap()).collect();
        let back = ProtectedModel::from_bundles("m", &bundles, &params).unwrap();
        assert_eq!(back.layers(), m.layers());
        for (a, b) in pm.weights().iter().zip(back.weights()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
        assert!(ProtectedModel::from_bundles("m", &bundles[1..], &params).is_err());
        let mut broken = bundles.clone();
        broken[1].truncate(30);
        assert!(ProtectedModel::from_bundles("m", &broken, &params).is_err());
        let dir = std::env::temp_dir().join(format!("fi-pm-{}", std::process::id()));
        pm.save_bundles(&dir).unwrap();
        let loaded = ProtectedModel::load_bundles("m", &dir, 3, &params).unwrap();
        assert_eq!(loaded.weights()[1].0, pm.weights()[1].0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identity_network_reconstructs_input() {
        let single = ModelSpec::<f64>::new(
            "fc",
            vec![LayerSpec::FullyConnected { in_dim: 3, out_dim: 3 }],
            vec![Dense { w: Matrix::identity(3), b: vec![0.0; 3] }],
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let params = RingParams::default();
        for k in [2, 3] {
            let pm = provision(&single, k, &params, &mut rng).unwrap();
            let x = Matrix::from_rows(&[vec![0.5, -1.25, 3.0]]);
            let xs = share_input(&x, k, &params, &mut rng).unwrap();
            let mut s = session(k, 4);
            let out = reveal(&secure_forward(&pm, &xs, &mut s).unwrap());
            for (a, b) in out.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 2.0 * 2f64.powi(-16), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_matches_plaintext_and_counts_rounds() {
        let m = build_with_dims::<f64>("m", &[30, 16, 8, 4], 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let params = RingParams::default();
        let pm = provision(&m, 3, &params, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows);
        let xs = share_input(&x, 3, &params, &mut rng).unwrap();
        let mut s = session(3, 7);
        let out = reveal(&secure_forward(&pm, &xs, &mut s).unwrap());
        let plain = forward(&m, &x).unwrap();
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        // three FC rounds, two fused ReLUs of 65 rounds, one final truncation
        assert_eq!(s.ledger().rounds, 3 + 2 * 65 + 1);
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut s = session(3, 8);
        let z = SharedTensor::public(&RingTensor::zeros(&[2, 10]), 3);
        let p = reveal(&secure_softmax(&z, &ApproxConfig::default(), &mut s).unwrap());
        assert!(p.data().iter().all(|v| (v - 0.1).abs() <= 0.02));
        let h = reveal(&secure_entropy(&secure_softmax(&z, &ApproxConfig::default(), &mut s).unwrap(), &ApproxConfig::default(), &mut s).unwrap());
        for v in h.data() {
            assert!((v - 10f64.ln()).abs() <= 0.05, "{v}");
        }
    }

    #[test]
    fn softmax_and_entropy_match_plaintext() {
        let params = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..10).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let z = Matrix::from_rows(&rows);
        for k in [2, 3] {
            let mut s = session(k, 10);
            let zs = share_input(&z, k, &params, &mut rng).unwrap();
            let ps = secure_softmax(&zs, &ApproxConfig::default(), &mut s).unwrap();
            let hs = secure_entropy(&ps, &ApproxConfig::default(), &mut s).unwrap();
            let (p, h) = (reveal(&ps), reveal(&hs));
            for (i, r) in rows.iter().enumerate() {
                let want = softmax(r);
                let sum: f64 = p.row(i).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-2, "sum {sum}");
                for (a, b) in p.row(i).iter().zip(&want) {
                    assert!((a - b).abs() <= 0.02, "{a} vs {b}");
                }
                assert!((h.get(i, 0) - entropy(&want)).abs() <= 0.05);
            }
            let (pf, hf) = kernels::softmax_entropy(&mut s, &zs, &ApproxConfig::default()).unwrap();
            let (pf, hf) = (reveal(&pf), reveal(&hf));
            assert_eq!(pf.data().len(), p.data().len());
            for (i, r) in rows.iter().enumerate() {
                assert!((hf.get(i, 0) - entropy(&softmax(r))).abs() <= 0.05, "{} vs {}", hf.get(i, 0), entropy(&softmax(r)));
            }
        }
    }

    #[test]
    fn clamp_saturates_large_logits() {
        let params = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let z = Matrix::from_rows(&[vec![40.0, -100.0, 0.0, 7.5]]);
        let zs = share_input(&z, 3, &params, &mut rng).unwrap();
        let mut s = session(3, 12);
        let c = reveal(&clamp(&mut s, &zs, -8.0, 8.0).unwrap());
        assert_eq!(c.data(), &[8.0, -8.0, 0.0, 7.5]);
        let p = reveal(&secure_softmax(&zs, &ApproxConfig::default(), &mut s).unwrap());
        let want = softmax(&[8.0, -8.0, 0.0, 7.5]);
        for (a, b) in p.data().iter().zip(&want) {
            assert!((a - b).abs() <= 0.02);
        }
    }

    #[test]
    fn approx_config_domain_checks() {
        let ok = ApproxConfig::default();
        assert!(ok.validate(16).is_ok());
        let narrow = ApproxConfig { exp_iterations: 4, ..ok };
        assert!(matches!(narrow.validate(16), Err(SecureNnError::ApproximationDomain(_))));
        let zero = ApproxConfig { reciprocal_newton_iters: 0, ..ok };
        assert!(zero.validate(16).is_err());
        let empty = ApproxConfig { input_clamp: (1.0, 1.0), ..ok };
        assert!(empty.validate(16).is_err());
        let mut s = session(2, 0);
        let z = SharedTensor::public(&RingTensor::zeros(&[1, 3]), 2);
        assert!(secure_softmax(&z, &narrow, &mut s).is_err());
    }

    #[test]
    fn kernels_match_reference_functions() {
        let params = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let xs = vec![0.05, 0.3, 1.0, 2.5, 7.0];
        let x = Matrix::new(1, 5, xs.clone());
        let sx = share_input(&x, 3, &params, &mut rng).unwrap();
        let mut s = session(3, 14);
        let r = reveal(&reciprocal(&mut s, &sx, 20, 0.1).unwrap());
        let l = reveal(&log(&mut s, &sx, &ApproxConfig::default()).unwrap());
        let q = reveal(&sqrt(&mut s, &sx, 25, 0.5).unwrap());
        for (i, v) in xs.iter().enumerate() {
            assert!((r.get(0, i) - 1.0 / v).abs() / (1.0 / v) < 0.01, "1/{v}");
            assert!((l.get(0, i) - v.ln()).abs() < 0.05, "ln {v}: {}", l.get(0, i));
            assert!((q.get(0, i) - v.sqrt()).abs() < 0.01, "sqrt {v}: {}", q.get(0, i));
        }
        let m = Matrix::from_rows(&[vec![0.1, -3.0, 2.0, 1.5, 2.25], vec![-1.0, -2.0, -0.5, -4.0, -3.0]]);
        let sm = share_input(&m, 3, &params, &mut rng).unwrap();
        let mx = reveal(&row_max(&mut s, &sm).unwrap());
        assert_eq!(mx.data(), &[2.25, -0.5]);
    }
}
