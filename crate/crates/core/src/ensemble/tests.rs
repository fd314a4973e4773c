use super::*;
use crate::fixedpoint::{encode, RingParams, RingTensor};
use crate::secretsharing::{Dealer, Session, SharedTensor};
use crate::secure_nn::{provision, share_input, ApproxConfig};
use crate::tensor_nn::{build_with_dims, LabeledDataset, gaussian_blobs, synthetic_digits, train, TrainConfig};
use crate::transport::SimTransport;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn session(k: usize, seed: u64) -> Session {
    Session::new(
        RingParams::default(),
        SimTransport::local(k),
        Dealer::new(k, seed).unwrap(),
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn scheme_names_round_trip() {
    for s in Scheme::ALL {
        assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
    }
    assert_eq!("soft_uniform".parse::<Scheme>().unwrap(), Scheme::Soft);
    assert!(matches!("median".parse::<Scheme>(), Err(EnsembleError::UnknownScheme(_))));
}

#[test]
fn weights_validate_simplex() {
    assert!(EnsembleWeights::new(vec![0.3, 0.7], Scheme::Soft, false).is_ok());
    assert!(matches!(
        EnsembleWeights::new(vec![0.3, 0.6], Scheme::Soft, false),
        Err(EnsembleError::WeightSumViolation { .. })
    ));
    assert!(matches!(
        EnsembleWeights::new(vec![1.5, -0.5], Scheme::Soft, false),
        Err(EnsembleError::NegativeWeight(_))
    ));
}

#[test]
fn hard_vote_examples() {
    assert_eq!(hard_vote(&[2, 2, 7]), 2);
    assert_eq!(hard_vote(&[1, 3]), 1);
    assert_eq!(hard_vote(&[4]), 4);
}

proptest! {
    #[test]
    fn hard_vote_matches_counting(votes in prop::collection::vec(0usize..6, 1..12)) {
        let mut counts = [0usize; 6];
        for &v in &votes {
            counts[v] += 1;
        }
        let best = *counts.iter().max().unwrap();
        let expected = counts.iter().position(|&c| c == best).unwrap();
        prop_assert_eq!(hard_vote(&votes), expected);
    }
}

#[test]
fn entropy_weight_examples() {
    let p = vec![0.2, 0.3, 0.5];
    let w = entropy_weights(&[p.clone(), p], 1.0).unwrap();
    assert!(close(w.w(), &[0.5, 0.5], 1e-12));

    let mut one_hot = vec![0.0f64; 10];
    one_hot[3] = 1.0;
    let uniform = vec![0.1; 10];
    let w = entropy_weights(&[one_hot.clone(), uniform.clone()], 1.0).unwrap();
    assert!((w.w()[0] - 10.0 / 11.0).abs() < 1e-12, "{:?}", w.w());

    let w = entropy_weights(&[one_hot, uniform], 1e-9).unwrap();
    assert!(close(w.w(), &[0.5, 0.5], 1e-8));

    assert!(matches!(
        entropy_weights(&[vec![0.5, 0.4]], 1.0),
        Err(EnsembleError::InvalidDistribution { .. })
    ));
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn entropy_weights_equivariant(
        ps in prop::collection::vec(simplex(4), 2..5),
        beta in 0.1f64..4.0,
        rot in 0usize..4,
    ) {
        let w = entropy_weights(&ps, beta).unwrap();
        let s: f64 = w.w().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(w.w().iter().all(|&x| x >= 0.0));
        // models reversed: weights reversed
        let rev: Vec<Vec<f64>> = ps.iter().rev().cloned().collect();
        let wr = entropy_weights(&rev, beta).unwrap();
        let mut back = wr.w().to_vec();
        back.reverse();
        prop_assert!(close(w.w(), &back, 1e-12));
        // classes relabeled inside each distribution: unchanged
        let relabeled: Vec<Vec<f64>> = ps
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.rotate_left(rot);
                q
            })
            .collect();
        let wl = entropy_weights(&relabeled, beta).unwrap();
        prop_assert!(close(w.w(), wl.w(), 1e-12));
    }
}

#[test]
fn spectral_degenerate_falls_back_to_uniform() {
    let phi = Matrix::from_rows(&[vec![0.7, 0.7, 0.7], vec![0.9, 0.9, 0.9]]);
    assert!(matches!(
        try_spectral_weights(&phi, &WeightingConfig::default()),
        Err(EnsembleError::DegenerateCovariance)
    ));
    let w = spectral_weights(&phi, &WeightingConfig::default()).unwrap();
    assert!(close(w.w(), &[0.5, 0.5], 1e-12));
}

#[test]
fn spectral_perfect_correlation_is_symmetric() {
    let row = vec![0.2, 0.9, 0.5, 0.6];
    let phi = Matrix::from_rows(&[row.clone(), row]);
    let w = spectral_weights(&phi, &WeightingConfig::default()).unwrap();
    assert!(close(w.w(), &[0.5, 0.5], 1e-9));
}

#[test]
fn spectral_matches_dense_eigensolver() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let phi = Matrix::new(5, 200, (0..1000).map(|_| rng.gen::<f64>()).collect());
    let c = confidence_covariance(&phi);
    let v = power_iteration(&c, 1e-9, 1000).unwrap();
    let dm = DMatrix::from_fn(5, 5, |i, j| c.get(i, j));
    let eig = dm.symmetric_eigen();
    let top = eig.eigenvalues.iamax();
    let oracle = eig.eigenvectors.column(top);
    let dot: f64 = (0..5).map(|i| v[i] * oracle[i]).sum();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot.abs() / norm >= 0.999, "cosine {}", dot.abs() / norm);
    let w = spectral_weights(&phi, &WeightingConfig::default()).unwrap();
    let total: f64 = oracle.iter().map(|x| x.abs()).sum();
    for i in 0..5 {
        assert!((w.w()[i] - oracle[i].abs() / total).abs() < 1e-3);
    }
}

proptest! {
    #[test]
    fn spectral_invariant_to_row_shift(
        grid in prop::collection::vec(0u32..64, 3 * 64),
        row in 0usize..3,
        shift in -4i32..5,
    ) {
        // dyadic entries so centering is exact in floating point
        let phi = Matrix::from_fn(3, 64, |i, s| grid[i * 64 + s] as f64 / 64.0);
        let mut shifted = phi.clone();
        for s in 0..64 {
            shifted.set(row, s, phi.get(row, s) + shift as f64);
        }
        let cfg = WeightingConfig::default();
        prop_assert_eq!(spectral_weights(&phi, &cfg).unwrap(), spectral_weights(&shifted, &cfg).unwrap());
    }
}

#[test]
fn tta_weight_examples() {
    let w = tta_weights(&[0.0, 3f64.ln()], 1.0).unwrap();
    assert!(close(w.w(), &[0.25, 0.75], 1e-12));
    let w = tta_weights(&[0.4, 0.4, 0.4], 2.0).unwrap();
    assert!(close(w.w(), &[1.0 / 3.0; 3], 1e-12));
}

#[test]
fn identical_views_give_uniform_tta() {
    let base = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]);
    let d = tta_instability(&base, &[base.clone(), base.clone()]).unwrap();
    assert!(d.iter().all(|&x| x == 0.0));
    let d2 = tta_instability(&base, &[Matrix::from_rows(&[vec![4.0, 6.0], vec![0.5, -1.0]])]).unwrap();
    assert!(close(&d2, &[5.0, 0.0], 1e-12));
}

#[test]
fn augmented_views_need_image_shape() {
    let x = Matrix::<f64>::zeros(2, 16);
    assert!(matches!(
        augmented_views(&x, None, &[5.0]),
        Err(EnsembleError::NotImageShaped { .. })
    ));
}

#[test]
fn weighting_config_validation() {
    let cfg = WeightingConfig {
        tta_views: 0,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = WeightingConfig {
        rotation_deg: 0.0,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
    let angles = WeightingConfig::default().view_angles(3);
    assert_eq!(angles, WeightingConfig::default().view_angles(3));
    assert!(angles.iter().all(|a| a.abs() <= 10.0));
}

fn shared(m: &Matrix<f64>, k: usize, rng: &mut ChaCha20Rng) -> SharedTensor {
    share_input(m, k, &RingParams::default(), rng).unwrap()
}

#[test]
fn aggregate_secure_identity_and_cancellation() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let params = RingParams::default();
    let y = Matrix::from_rows(&[vec![0.25, -1.5, 3.0]]);
    let ys = shared(&y, 3, &mut rng);
    let agg = aggregate_secure(&[ys], &[EnsembleWeights::uniform(1, Scheme::Soft, false)], &params).unwrap();
    assert_eq!(agg.reveal().data(), y.data());

    let neg = y.map(|v| -v);
    let pair = [shared(&y, 3, &mut rng), shared(&neg, 3, &mut rng)];
    let agg = aggregate_secure(&pair, &[EnsembleWeights::uniform(2, Scheme::Soft, false)], &params).unwrap();
    assert!(agg.reveal().data().iter().all(|&v| v == 0.0));
}

#[test]
fn aggregate_secure_costs_nothing_and_is_ring_exact() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let params = RingParams::default();
    let ys: Vec<Matrix<f64>> = (0..3)
        .map(|_| Matrix::new(4, 5, (0..20).map(|_| rng.gen::<f64>()).collect()))
        .collect();
    let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
    let w = EnsembleWeights::from_scores(&raw, Scheme::Soft, false).unwrap();
    let sess = session(3, 1);
    let shares: Vec<SharedTensor> = ys.iter().map(|y| shared(y, 3, &mut rng)).collect();
    let agg = aggregate_secure(&shares, std::slice::from_ref(&w), &params).unwrap();
    assert_eq!(sess.ledger().rounds, 0);

    // ring oracle: Σ enc(w_i) · enc(y_i)
    let mut ring = RingTensor::zeros(&[4, 5]);
    for (y, &wi) in ys.iter().zip(w.w()) {
        let e = encode(y.data(), &[4, 5], &params).unwrap();
        ring.add_assign(&e.mul_scalar(params.encode_scalar(wi).unwrap()));
    }
    assert_eq!(agg.shares.reveal(), ring);

    let plain = aggregate(&ys, &w).unwrap();
    for (a, b) in agg.reveal().data().iter().zip(plain.data()) {
        assert!((a - b).abs() <= 2f64.powi(-14));
    }

    let bad = EnsembleWeights::uniform(2, Scheme::Soft, false);
    assert!(matches!(
        aggregate_secure(&shares, &[bad], &params),
        Err(EnsembleError::ShapeMismatch(_))
    ));
}

#[test]
fn secure_hard_tally_matches_argmax_counts() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let logits: Vec<Matrix<f64>> = (0..3)
        .map(|_| Matrix::new(12, 5, (0..60).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect()))
        .collect();
    // a tie inside one row goes to the lower class
    let mut logits = logits;
    logits[0].set(0, 1, 9.0);
    logits[0].set(0, 3, 9.0);
    let mut s = session(3, 2);
    let shares: Vec<SharedTensor> = logits.iter().map(|l| shared(l, 3, &mut rng)).collect();
    let tally = hard_vote_tally(&mut s, &shares).unwrap().reveal();
    for r in 0..12 {
        let mut expected = [0.0; 5];
        for l in &logits {
            expected[argmax(l.row(r))] += 1.0;
        }
        assert_eq!(tally.row(r), &expected[..], "row {r}");
    }
}

fn trained_blobs(models: usize) -> (Vec<ModelSpec<f64>>, LabeledDataset<f64>) {
    let data = gaussian_blobs::<f64>(60, 4, 6, 3.0, 1.0, 9);
    let cfg = TrainConfig {
        epochs: 15,
        ..Default::default()
    };
    let ms = (0..models)
        .map(|i| train(&build_with_dims("m", &[6, 8, 4], i as u64).unwrap(), &data, &cfg).unwrap())
        .collect();
    (ms, data)
}

#[test]
fn secure_schemes_follow_plaintext() {
    let (models, data) = trained_blobs(3);
    let x = data.inputs().select_rows(&(0..40).collect::<Vec<_>>());
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let params = RingParams::default();
    let pms: Vec<_> = models.iter().map(|m| provision(m, 3, &params, &mut rng).unwrap()).collect();
    let cfg = WeightingConfig::default();
    let acfg = ApproxConfig::default();
    for scheme in [Scheme::Hard, Scheme::Soft, Scheme::Entropy, Scheme::Spectral] {
        let plain = plaintext_ensemble(&models, &x, None, None, scheme, &cfg, 1).unwrap();
        let mut s = session(3, 3);
        let sec = secure_ensemble(&pms, &x, None, None, scheme, &cfg, &acfg, &mut s, &mut rng, 1).unwrap();
        let agree = plain
            .predictions
            .iter()
            .zip(&sec.predictions)
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree >= 39, "{scheme}: {agree}/40");
        assert_eq!(sec.weights.len(), plain.weights.len());
        for (a, b) in sec.weights.iter().zip(&plain.weights) {
            assert!(close(a.w(), b.w(), 0.05), "{scheme}: {:?} vs {:?}", a.w(), b.w());
        }
    }
    let cal = data.inputs().select_rows(&(100..164).collect::<Vec<_>>());
    let plain = plaintext_ensemble(&models, &x, None, Some(&cal), Scheme::Spectral, &cfg, 1).unwrap();
    let mut s = session(2, 4);
    let pms2: Vec<_> = models.iter().map(|m| provision(m, 2, &params, &mut rng).unwrap()).collect();
    let sec = secure_ensemble(&pms2, &x, None, Some(&cal), Scheme::Spectral, &cfg, &acfg, &mut s, &mut rng, 1).unwrap();
    assert!(close(sec.weights[0].w(), plain.weights[0].w(), 0.05), "{:?} vs {:?}", sec.weights[0].w(), plain.weights[0].w());
}

#[test]
fn secure_tta_follows_plaintext() {
    let data = synthetic_digits::<f64>(6, 0.1, 2);
    let cfg_t = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let models: Vec<ModelSpec<f64>> = (0..2)
        .map(|i| train(&build_with_dims("d", &[64, 16, 10], i).unwrap(), &data, &cfg_t).unwrap())
        .collect();
    let x = data.inputs().select_rows(&(0..10).collect::<Vec<_>>());
    let image = data.image_shape();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let params = RingParams::default();
    let pms: Vec<_> = models.iter().map(|m| provision(m, 2, &params, &mut rng).unwrap()).collect();
    let cfg = WeightingConfig::default();
    let plain = plaintext_ensemble(&models, &x, image, None, Scheme::Tta, &cfg, 4).unwrap();
    let mut s = session(2, 5);
    let sec = secure_ensemble(&pms, &x, image, None, Scheme::Tta, &cfg, &ApproxConfig::default(), &mut s, &mut rng, 4).unwrap();
    for (a, b) in sec.weights.iter().zip(&plain.weights) {
        assert!(close(a.w(), b.w(), 0.05), "{:?} vs {:?}", a.w(), b.w());
    }
    let agree = plain.predictions.iter().zip(&sec.predictions).filter(|(a, b)| a == b).count();
    assert!(agree >= 9, "{agree}/10");
}

#[test]
fn single_model_ensemble_is_that_model() {
    let (models, data) = trained_blobs(1);
    let x = data.inputs().select_rows(&(0..20).collect::<Vec<_>>());
    let own = tensor_nn::forward(&models[0], &x).unwrap().argmax_rows();
    for scheme in [Scheme::Hard, Scheme::Soft, Scheme::Entropy, Scheme::Spectral] {
        let out = plaintext_ensemble(&models, &x, None, None, scheme, &WeightingConfig::default(), 0).unwrap();
        assert_eq!(out.predictions, own, "{scheme}");
        assert!(out.weights.iter().all(|w| w.w() == [1.0]));
    }
}

#[test]
fn secure_cost_ordering() {
    let data = synthetic_digits::<f64>(4, 0.1, 3);
    let models: Vec<ModelSpec<f64>> = (0..3)
        .map(|i| build_with_dims("d", &[64, 8, 10], i).unwrap())
        .collect();
    // batch of two, as in the reference cost measurement
    let x = data.inputs().select_rows(&[0, 1]);
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let params = RingParams::default();
    let pms: Vec<_> = models.iter().map(|m| provision(m, 3, &params, &mut rng).unwrap()).collect();
    let mut costs = Vec::new();
    for scheme in [Scheme::Soft, Scheme::Entropy, Scheme::Spectral, Scheme::Tta] {
        let mut s = session(3, 6);
        secure_ensemble(&pms, &x, data.image_shape(), None, scheme, &WeightingConfig::default(), &ApproxConfig::default(), &mut s, &mut rng, 0).unwrap();
        costs.push((scheme, s.ledger().rounds, s.ledger().bytes_total()));
    }
    for pair in costs.windows(2) {
        assert!(pair[0].1 < pair[1].1 && pair[0].2 < pair[1].2, "{costs:?}");
    }
}
