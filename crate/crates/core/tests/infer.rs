use fi_core::ensemble::Scheme;
use fi_core::escrow::Escrow;
use fi_core::experiment::{cmd_ensemble_sweep, run_infer, train_clients, ExperimentConfig, Fault, Phase};
use fi_core::tensor_nn::{synthetic_digits, Dense, LayerSpec, Matrix, ModelSpec, TrainConfig};

fn identity(d: usize) -> ModelSpec<f64> {
    ModelSpec::new(
        "identity",
        vec![LayerSpec::FullyConnected { in_dim: d, out_dim: d }],
        vec![Dense { w: Matrix::identity(d), b: vec![0.0; d] }],
    )
    .unwrap()
}

fn queries() -> Matrix<f64> {
    Matrix::from_rows(&[
        vec![0.1, 0.9, -0.3, 0.2],
        vec![2.0, -1.0, 0.5, 1.5],
        vec![-0.2, -0.1, -0.4, -0.05],
    ])
}

#[test]
fn identity_network_predicts_input_argmax_and_settles() {
    let cfg = ExperimentConfig {
        schemes: vec![Scheme::Soft],
        preset: "intra_zone".into(),
        ..ExperimentConfig::with_seed(1)
    };
    let r = run_infer(&cfg, &[identity(4)], &queries(), None).unwrap();
    assert_eq!(r.predictions.unwrap(), vec![1, 0, 3]);
    assert!(r.escrow.settled);
    assert_eq!(r.escrow.balances["party0"], 3);
    assert_eq!(r.escrow.balances["client"], 0);
    // the journal carried in the report replays to the same balances
    let replayed = Escrow::replay(&r.escrow.journal).unwrap();
    assert_eq!(replayed.state().balances, r.escrow.balances);
}

fn digit_models(k: usize) -> (Vec<ModelSpec<f64>>, Matrix<f64>) {
    let cfg = ExperimentConfig {
        clients: k,
        train: TrainConfig { epochs: 4, ..Default::default() },
        ..ExperimentConfig::with_seed(2)
    };
    let data = synthetic_digits::<f64>(15, 0.3, 2);
    let models = train_clients(&cfg, &data, 1000.0, 2).unwrap();
    (models, data.inputs().select_rows(&[0, 7, 19, 33]))
}

#[test]
fn inter_continent_elapsed_covers_every_round_trip() {
    let (models, x) = digit_models(3);
    let cfg = ExperimentConfig {
        schemes: vec![Scheme::Soft],
        preset: "inter_continent".into(),
        ..ExperimentConfig::with_seed(3)
    };
    let r = run_infer(&cfg, &models, &x, None).unwrap();
    assert!(r.ledger.rounds > 0);
    assert!(
        r.ledger.elapsed_ms >= r.ledger.rounds as f64 * 250.0,
        "{} ms over {} rounds",
        r.ledger.elapsed_ms,
        r.ledger.rounds
    );
    assert_eq!(r.agreement, Some(1.0));
}

#[test]
fn abort_in_execution_keeps_deposit_escrowed() {
    let (models, x) = digit_models(3);
    let cfg = ExperimentConfig {
        schemes: vec![Scheme::Entropy],
        fault: Some(Fault { phase: Phase::Execution, party: 2, offset: 5 }),
        ..ExperimentConfig::with_seed(4)
    };
    let r = run_infer(&cfg, &models, &x, None).unwrap();
    let abort = r.abort.unwrap();
    assert_eq!((abort.phase, abort.party), (Phase::Execution, 2));
    assert!(r.predictions.is_none() && r.scores.is_none());
    assert!(r.escrow.created && !r.escrow.settled);
    assert_eq!(r.escrow.escrowed, cfg.deposit);
    // execution stopped mid-phase: the aggregation phase never started
    assert_eq!(r.phases.last().unwrap().phase, Phase::Execution);
}

#[test]
fn single_party_matches_plaintext_for_every_scheme() {
    let (models, x) = digit_models(2);
    let image = synthetic_digits::<f64>(1, 0.0, 0).image_shape();
    for scheme in Scheme::ALL {
        let cfg = ExperimentConfig { parties: 1, schemes: vec![scheme], ..ExperimentConfig::with_seed(5) };
        let r = run_infer(&cfg, &models, &x, image).unwrap();
        assert_eq!(r.ledger.rounds, 0, "{scheme}");
        assert_eq!(r.predictions.unwrap(), r.plaintext_predictions, "{scheme}");
    }
}

#[test]
fn ensemble_sweep_row_count_for_grid() {
    let cfg = ExperimentConfig {
        clients: 5,
        alphas: vec![0.05, 1000.0],
        schemes: vec![Scheme::Soft, Scheme::Entropy],
        seeds: 2,
        per_class: 15,
        test_per_class: 5,
        train: TrainConfig { epochs: 3, ..Default::default() },
        ..ExperimentConfig::with_seed(6)
    };
    let rows = cmd_ensemble_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 4 * cfg.seeds);
    assert!(rows.iter().all(|r| r.ok && (0.0..=1.0).contains(&r.accuracy)));
}
