use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::model::forward_trace;
use super::{softmax, LabeledDataset, LayerSpec, Matrix, ModelSpec, NnError};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

// ln that keeps NaN visible but avoids -inf on an underflowed probability
fn floor_ln<T: Real>(p: T) -> T {
    if p == T::zero() {
        T::min_positive_value().ln()
    } else {
        p.ln()
    }
}

/// Mean cross-entropy (nats) of the model on a dataset.
pub fn cross_entropy<T: Real>(model: &ModelSpec<T>, data: &LabeledDataset<T>) -> Result<T, NnError> {
    let logits = super::forward(model, data.inputs())?;
    let mut total = T::zero();
    for (i, &y) in data.labels().iter().enumerate() {
        let p = softmax(logits.row(i));
        total -= floor_ln(p[y]);
    }
    Ok(total / T::of_usize(data.len().max(1)))
}

/// Plain mini-batch SGD on softmax cross-entropy. Returns a trained copy;
/// the same seed gives bitwise identical weights.
pub fn train<T: Real>(
    model: &ModelSpec<T>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<ModelSpec<T>, NnError> {
    if data.dim() != model.input_dim() {
        return Err(NnError::ShapeMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    if data.classes() > model.output_dim() {
        return Err(NnError::InvalidDataset(format!(
            "{} classes but the model has {} outputs",
            data.classes(),
            model.output_dim()
        )));
    }
    let mut model = model.clone();
    if data.is_empty() || cfg.epochs == 0 {
        return Ok(model);
    }
    let relu_after: Vec<bool> = {
        let layers = model.layers();
        let mut flags = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            if matches!(l, LayerSpec::FullyConnected { .. }) {
                flags.push(layers.get(i + 1) == Some(&LayerSpec::Relu));
            }
        }
        flags
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let lr = T::of(cfg.learning_rate);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = T::zero();
        for idx in order.chunks(batch) {
            let x = data.inputs().select_rows(idx);
            let acts = forward_trace(&model, &x)?;
            let logits = acts.last().expect("non-empty");
            let n = T::of_usize(idx.len());
            // dL/dlogits = softmax - onehot, averaged over the batch
            let mut delta = Matrix::zeros(logits.rows(), logits.cols());
            for (r, &sample) in idx.iter().enumerate() {
                let p = softmax(logits.row(r));
                let y = data.labels()[sample];
                loss -= floor_ln(p[y]);
                for (c, &pc) in p.iter().enumerate() {
                    let g = if c == y { pc - T::one() } else { pc };
                    delta.set(r, c, g / n);
                }
            }
            for layer in (0..model.dense().len()).rev() {
                let input = if layer == 0 { &x } else { &acts[layer - 1] };
                let grad_w = input.transpose().matmul(&delta);
                let grad_b = delta.column_sums();
                let next = if layer > 0 {
                    let mut d = delta.matmul(&model.dense()[layer].w.transpose());
                    if relu_after[layer - 1] {
                        for (g, &a) in d.data_mut().iter_mut().zip(acts[layer - 1].data()) {
                            if a <= T::zero() {
                                *g = T::zero();
                            }
                        }
                    }
                    Some(d)
                } else {
                    None
                };
                let dense = &mut model.dense_mut()[layer];
                for (w, &g) in dense.w.data_mut().iter_mut().zip(grad_w.data()) {
                    *w -= lr * g;
                }
                for (b, &g) in dense.b.iter_mut().zip(&grad_b) {
                    *b -= lr * g;
                }
                if let Some(d) = next {
                    delta = d;
                }
            }
        }
        if !loss.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch });
        }
    }
    Ok(model)
}
