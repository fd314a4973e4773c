use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, NnError};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    FullyConnected { in_dim: usize, out_dim: usize },
    Relu,
    /// Output marker only; `forward` returns logits.
    Softmax,
}

/// Affine layer `x·W + b` with `W: [in x out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(in_dim, out_dim),
            b: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Layer structure plus the weights of every fully connected layer, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec<T> {
    pub name: String,
    layers: Vec<LayerSpec>,
    dense: Vec<Dense<T>>,
}

impl<T: Real> ModelSpec<T> {
    /// Checks that FC dims chain, weights match, and softmax is only last.
    pub fn new(name: &str, layers: Vec<LayerSpec>, dense: Vec<Dense<T>>) -> Result<Self, NnError> {
        let fc: Vec<(usize, usize)> = layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::FullyConnected { in_dim, out_dim } => Some((in_dim, out_dim)),
                _ => None,
            })
            .collect();
        if fc.is_empty() {
            return Err(NnError::InvalidLayers("no fully connected layer".into()));
        }
        if fc.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(NnError::InvalidLayers("layer dimensions do not chain".into()));
        }
        if let Some(pos) = layers.iter().position(|l| *l == LayerSpec::Softmax) {
            if pos + 1 != layers.len() {
                return Err(NnError::InvalidLayers("softmax must be the final layer".into()));
            }
        }
        if fc.len() != dense.len()
            || fc
                .iter()
                .zip(&dense)
                .any(|(&(i, o), d)| d.in_dim() != i || d.out_dim() != o || d.b.len() != o)
        {
            return Err(NnError::InvalidLayers("weight shapes do not match layers".into()));
        }
        Ok(Self {
            name: name.to_string(),
            layers,
            dense,
        })
    }

    /// FC chain over `dims` with ReLU between consecutive layers and a final
    /// softmax marker; all weights zero.
    pub fn zeros(name: &str, dims: &[usize]) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidLayers(format!("bad layer dims {dims:?}")));
        }
        let mut layers = Vec::new();
        let mut dense = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::FullyConnected {
                in_dim: w[0],
                out_dim: w[1],
            });
            dense.push(Dense::zeros(w[0], w[1]));
        }
        layers.push(LayerSpec::Softmax);
        Self::new(name, layers, dense)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn dense(&self) -> &[Dense<T>] {
        &self.dense
    }

    pub fn dense_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.dense
    }

    pub fn input_dim(&self) -> usize {
        self.dense[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dense[self.dense.len() - 1].out_dim()
    }

    /// Input dim followed by every layer's output dim.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.dense.iter().map(Dense::out_dim));
        d
    }

    pub fn parameter_count(&self) -> usize {
        self.dense.iter().map(|d| d.in_dim() * d.out_dim() + d.out_dim()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelSpec<U> {
        ModelSpec {
            name: self.name.clone(),
            layers: self.layers.clone(),
            dense: self
                .dense
                .iter()
                .map(|d| Dense {
                    w: d.w.cast(),
                    b: d.b.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Built-in architectures. The named MLPs take 32x32x3 inputs and 10 classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    SmallMlp,
    MediumMlp,
    LargeMlp,
    /// Full dimension chain, input first.
    Custom(Vec<usize>),
}

impl Architecture {
    /// Accepts `small_mlp`, `medium_mlp`, `large_mlp`, or `custom:d0,d1,...`.
    pub fn from_name(name: &str) -> Result<Self, NnError> {
        match name {
            "small_mlp" => Ok(Self::SmallMlp),
            "medium_mlp" => Ok(Self::MediumMlp),
            "large_mlp" => Ok(Self::LargeMlp),
            _ => {
                let dims = name
                    .strip_prefix("custom:")
                    .ok_or_else(|| NnError::UnknownArchitecture(name.to_string()))?;
                let dims = dims
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| NnError::UnknownArchitecture(name.to_string()))?;
                Ok(Self::Custom(dims))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::SmallMlp => "small_mlp".into(),
            Self::MediumMlp => "medium_mlp".into(),
            Self::LargeMlp => "large_mlp".into(),
            Self::Custom(d) => {
                let d: Vec<String> = d.iter().map(ToString::to_string).collect();
                format!("custom:{}", d.join(","))
            }
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            Self::SmallMlp => vec![3072, 256, 10],
            Self::MediumMlp => vec![3072, 512, 256, 10],
            Self::LargeMlp => vec![3072, 1024, 512, 256, 10],
            Self::Custom(d) => d.clone(),
        }
    }

    /// Same hidden widths with a different input and output size.
    pub fn dims_for(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut d = self.dims();
        let last = d.len() - 1;
        d[0] = input;
        d[last] = classes;
        d
    }
}

/// Builds an architecture with He-uniform weights and zero biases.
pub fn build_model<T: Real>(arch: &Architecture, seed: u64) -> Result<ModelSpec<T>, NnError> {
    build_with_dims(&arch.name(), &arch.dims(), seed)
}

/// He-uniform initialization over an explicit dim chain.
pub fn build_with_dims<T: Real>(name: &str, dims: &[usize], seed: u64) -> Result<ModelSpec<T>, NnError> {
    let mut model = ModelSpec::zeros(name, dims)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for d in model.dense_mut() {
        let limit = (6.0 / d.in_dim() as f64).sqrt();
        for v in d.w.data_mut() {
            *v = T::of(rng.gen_range(-limit..limit));
        }
    }
    Ok(model)
}

/// Logits for a batch of inputs `[n x d_in]`.
pub fn forward<T: Real>(model: &ModelSpec<T>, x: &Matrix<T>) -> Result<Matrix<T>, NnError> {
    Ok(forward_trace(model, x)?.pop().expect("at least one layer"))
}

/// Activations after every FC layer (post-ReLU where a ReLU follows); the
/// last entry is the logits.
pub(crate) fn forward_trace<T: Real>(model: &ModelSpec<T>, x: &Matrix<T>) -> Result<Vec<Matrix<T>>, NnError> {
    if x.cols() != model.input_dim() {
        return Err(NnError::ShapeMismatch {
            expected: model.input_dim(),
            got: x.cols(),
        });
    }
    let mut outs: Vec<Matrix<T>> = Vec::new();
    let mut fc = 0;
    for layer in model.layers() {
        match layer {
            LayerSpec::FullyConnected { .. } => {
                let d = &model.dense()[fc];
                let input = outs.last().unwrap_or(x);
                let mut h = input.matmul(&d.w);
                h.add_row(&d.b);
                outs.push(h);
                fc += 1;
            }
            LayerSpec::Relu => {
                if let Some(h) = outs.last_mut() {
                    for v in h.data_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
            }
            LayerSpec::Softmax => {}
        }
    }
    Ok(outs)
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut data = Vec::with_capacity(logits.data().len());
    for i in 0..logits.rows() {
        data.extend(softmax(logits.row(i)));
    }
    Matrix::new(logits.rows(), logits.cols(), data)
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy<T: Real>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| v * v.ln())
        .sum::<T>()
}
