//! Plaintext tensors, MLP definitions, forward pass and a small SGD trainer.
//!
//! This is the reference side of the engine: the secure forward pass is
//! checked against [`forward`], and the sweeps train their per-client models
//! with [`train`].

mod data;
mod io;
mod matrix;
mod model;
mod train;

use thiserror::Error;

pub use data::{gaussian_blobs, synthetic_digits, ImageShape, LabeledDataset};
pub use io::{load_weights, save_weights, weights_from_bytes, weights_to_bytes};
pub use matrix::{argmax, Matrix};
pub use model::{
    build_model, build_with_dims, entropy, forward, softmax, softmax_rows, Architecture, Dense,
    LayerSpec, ModelSpec,
};
pub use train::{cross_entropy, train, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),
    #[error("input has {got} features, model expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid layer structure: {0}")]
    InvalidLayers(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("malformed weight file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn table_parameter_counts() {
        let counts = [
            (Architecture::SmallMlp, 789_258),
            (Architecture::MediumMlp, 1_707_274),
            (Architecture::LargeMlp, 3_805_450),
        ];
        for (arch, n) in counts {
            let m = ModelSpec::<f32>::zeros(&arch.name(), &arch.dims()).unwrap();
            assert_eq!(m.parameter_count(), n, "{}", arch.name());
        }
        let small = build_model::<f32>(&Architecture::SmallMlp, 0).unwrap();
        assert_eq!(
            small.layers(),
            &[
                LayerSpec::FullyConnected { in_dim: 3072, out_dim: 256 },
                LayerSpec::Relu,
                LayerSpec::FullyConnected { in_dim: 256, out_dim: 10 },
                LayerSpec::Softmax,
            ]
        );
    }

    #[test]
    fn architecture_names() {
        assert_eq!(Architecture::from_name("medium_mlp").unwrap(), Architecture::MediumMlp);
        assert_eq!(
            Architecture::from_name("custom:4,3,2").unwrap(),
            Architecture::Custom(vec![4, 3, 2])
        );
        assert!(matches!(
            Architecture::from_name("resnet"),
            Err(NnError::UnknownArchitecture(_))
        ));
        assert_eq!(Architecture::SmallMlp.dims_for(64, 10), vec![64, 256, 10]);
    }

    #[test]
    fn rejects_bad_structure() {
        let layers = vec![
            LayerSpec::FullyConnected { in_dim: 2, out_dim: 3 },
            LayerSpec::Softmax,
            LayerSpec::FullyConnected { in_dim: 3, out_dim: 1 },
        ];
        let dense = vec![Dense::<f64>::zeros(2, 3), Dense::zeros(3, 1)];
        assert!(ModelSpec::new("x", layers, dense).is_err());
        let layers = vec![
            LayerSpec::FullyConnected { in_dim: 2, out_dim: 3 },
            LayerSpec::FullyConnected { in_dim: 4, out_dim: 1 },
        ];
        let dense = vec![Dense::<f64>::zeros(2, 3), Dense::zeros(4, 1)];
        assert!(ModelSpec::new("x", layers, dense).is_err());
    }

    #[test]
    fn identity_network_passes_relu_chain() {
        let mut m = ModelSpec::<f64>::zeros("id", &[2, 2, 2]).unwrap();
        for d in m.dense_mut() {
            d.w = Matrix::identity(2);
        }
        let x = Matrix::from_rows(&[vec![1.5, -2.0]]);
        assert_eq!(forward(&m, &x).unwrap().data(), &[1.5, 0.0]);
        let single = ModelSpec::<f64>::new(
            "fc",
            vec![LayerSpec::FullyConnected { in_dim: 2, out_dim: 2 }],
            vec![Dense { w: Matrix::identity(2), b: vec![0.0, 0.0] }],
        )
        .unwrap();
        assert_eq!(forward(&single, &x).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn zero_weights_give_relu_composed_bias() {
        let mut m = ModelSpec::<f64>::zeros("b", &[3, 2, 2]).unwrap();
        m.dense_mut()[0].b = vec![-1.0, 2.0];
        m.dense_mut()[1].b = vec![0.5, -0.5];
        let x = Matrix::from_rows(&[vec![9.0, 9.0, 9.0]]);
        // the first layer's bias is killed by the zero weights of the second
        assert_eq!(forward(&m, &x).unwrap().data(), &[0.5, -0.5]);
        assert!(matches!(
            forward(&m, &Matrix::zeros(1, 4)),
            Err(NnError::ShapeMismatch { expected: 3, got: 4 })
        ));
    }

    fn naive_forward(m: &ModelSpec<f64>, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = m.dense().len();
        for (l, d) in m.dense().iter().enumerate() {
            let mut out = d.b.clone();
            for (j, o) in out.iter_mut().enumerate() {
                for (i, hv) in h.iter().enumerate() {
                    *o += hv * d.w.get(i, j);
                }
            }
            if l + 1 < n {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let m = build_with_dims::<f64>("t", &[7, 5, 4, 3], 11).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let out = forward(&m, &Matrix::from_rows(&rows)).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(naive_forward(&m, r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0f64; 10]);
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let mut z = [0.0f64; 10];
        z[3] = 1e6;
        let p = softmax(&z);
        assert!((p[3] - 1.0).abs() < 1e-12);
        assert!((entropy(&softmax(&[0.0f64; 10])) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0f64, 0.0]), 0.0);
    }

    #[test]
    fn training_separates_blobs_deterministically() {
        let data = gaussian_blobs::<f64>(100, 2, 4, 3.0, 0.5, 5);
        let m0 = build_with_dims::<f64>("blob", &[4, 8, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 9,
        };
        let before = cross_entropy(&m0, &data).unwrap();
        let m = train(&m0, &data, &cfg).unwrap();
        assert!(cross_entropy(&m, &data).unwrap() < before);
        let pred = forward(&m, data.inputs()).unwrap().argmax_rows();
        assert!(data.accuracy(&pred) >= 0.95);
        assert_eq!(train(&m0, &data, &cfg).unwrap(), m);
    }

    #[test]
    fn training_reports_divergence() {
        let data = gaussian_blobs::<f32>(20, 2, 2, 1e30, 1.0, 0);
        let m0 = build_with_dims::<f32>("x", &[2, 2], 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&m0, &data, &cfg), Err(NnError::NonFiniteLoss { .. })));
    }

    #[test]
    fn digits_are_learnable() {
        let data = synthetic_digits::<f32>(40, 0.4, 2);
        assert_eq!(data.dim(), 64);
        assert_eq!(data.class_histogram(), vec![40; 10]);
        let m0 = build_with_dims::<f32>("d", &[64, 32, 10], 0).unwrap();
        let m = train(&m0, &data, &TrainConfig::default()).unwrap();
        let test = synthetic_digits::<f32>(20, 0.4, 3);
        let pred = forward(&m, test.inputs()).unwrap().argmax_rows();
        assert!(test.accuracy(&pred) > 0.8);
    }

    #[test]
    fn weights_round_trip() {
        let m = build_with_dims::<f64>("rt", &[5, 4, 3], 8).unwrap();
        let back: ModelSpec<f64> = weights_from_bytes("rt", &weights_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        let bytes = weights_to_bytes(&m);
        assert!(weights_from_bytes::<f64>("rt", &bytes[..bytes.len() - 8]).is_err());
        let dir = std::env::temp_dir().join(format!("fi-w-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.bin");
        save_weights(&m, &path).unwrap();
        assert_eq!(load_weights::<f64>(&path).unwrap(), m);
        let data = gaussian_blobs::<f64>(3, 3, 2, 1.0, 0.1, 0);
        let csv_path = dir.join("d.csv");
        data.to_csv(&csv_path).unwrap();
        let back = LabeledDataset::<f64>::from_csv(&csv_path).unwrap();
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.inputs(), data.inputs());
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            z in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
