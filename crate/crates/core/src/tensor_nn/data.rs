use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Matrix, NnError};
use crate::scalar::Real;

/// Height, width and channels of an image stored as a flat row, channel last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset<T> {
    inputs: Matrix<T>,
    labels: Vec<usize>,
    classes: usize,
    image: Option<ImageShape>,
}

impl<T: Real> LabeledDataset<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        if inputs.rows() != labels.len() {
            return Err(NnError::InvalidDataset(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::InvalidDataset(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            image: None,
        })
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self, NnError> {
        if shape.len() != self.dim() {
            return Err(NnError::InvalidDataset(format!(
                "image shape {shape:?} does not cover {} features",
                self.dim()
            )));
        }
        self.image = Some(shape);
        Ok(self)
    }

    pub fn inputs(&self) -> &Matrix<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image: self.image,
        }
    }

    /// Sample count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Fraction of rows whose prediction equals the label.
    pub fn accuracy(&self, predictions: &[usize]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / self.len() as f64
    }

    /// Writes `features..., label` rows without a header.
    pub fn to_csv(&self, path: &Path) -> Result<(), NnError> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| NnError::Io(e.to_string()))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(|e| NnError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| NnError::Io(e.to_string()))
    }

    /// Reads `features..., label` rows; the class count is `max label + 1`.
    pub fn from_csv(path: &Path) -> Result<Self, NnError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| NnError::Io(e.to_string()))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| NnError::Io(e.to_string()))?;
            let n = rec.len();
            if n < 2 {
                return Err(NnError::InvalidDataset("row has no features".into()));
            }
            let bad = |s: &str| NnError::InvalidDataset(format!("cannot parse {s:?}"));
            let feats = rec
                .iter()
                .take(n - 1)
                .map(|s| s.trim().parse::<f64>().map(T::of).map_err(|_| bad(s)))
                .collect::<Result<Vec<T>, _>>()?;
            let label = rec[n - 1].trim().parse::<usize>().map_err(|_| bad(&rec[n - 1]))?;
            rows.push(feats);
            labels.push(label);
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(NnError::InvalidDataset("ragged rows".into()));
        }
        Self::new(Matrix::from_rows(&rows), labels, classes)
    }
}

/// Isotropic Gaussian blobs, one per class, with centers spaced `separation`
/// apart along distinct axes.
pub fn gaussian_blobs<T: Real>(
    per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> LabeledDataset<T> {
    assert!(dim > 0 && classes > 0, "blobs need at least one class and feature");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(per_class * classes);
    let mut labels = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        for _ in 0..per_class {
            let row: Vec<T> = (0..dim)
                .map(|j| {
                    let center = if j == c % dim {
                        separation * (1 + c / dim) as f64
                    } else {
                        0.0
                    };
                    let z: f64 = rng.sample(StandardNormal);
                    T::of(center + spread * z)
                })
                .collect();
            rows.push(row);
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_rows(&rows), labels, classes).expect("consistent by construction")
}

const DIGIT_SIDE: usize = 8;

// Seven-segment glyphs: a top, b upper right, c lower right, d bottom,
// e lower left, f upper left, g middle.
const SEGMENTS: [&str; 10] = [
    "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
];

fn glyph(digit: usize) -> [[f64; DIGIT_SIDE]; DIGIT_SIDE] {
    let mut g = [[0.0; DIGIT_SIDE]; DIGIT_SIDE];
    for s in SEGMENTS[digit].chars() {
        let cells: Vec<(usize, usize)> = match s {
            'a' => (2..=5).map(|c| (1, c)).collect(),
            'g' => (2..=5).map(|c| (4, c)).collect(),
            'd' => (2..=5).map(|c| (7, c)).collect(),
            'f' => (1..=4).map(|r| (r, 2)).collect(),
            'b' => (1..=4).map(|r| (r, 5)).collect(),
            'e' => (4..=7).map(|r| (r, 2)).collect(),
            'c' => (4..=7).map(|r| (r, 5)).collect(),
            _ => unreachable!(),
        };
        for (r, c) in cells {
            g[r][c] = 1.0;
        }
    }
    g
}

/// Tiny 8x8 single-channel digit images: seven-segment glyphs with a random
/// horizontal shift of up to one pixel and additive Gaussian pixel noise.
/// Pixels are mapped to roughly `[-1, 1]`.
pub fn synthetic_digits<T: Real>(per_class: usize, noise: f64, seed: u64) -> LabeledDataset<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let glyphs: Vec<_> = (0..10).map(glyph).collect();
    let mut rows = Vec::with_capacity(per_class * 10);
    let mut labels = Vec::with_capacity(per_class * 10);
    for _ in 0..per_class {
        for (digit, g) in glyphs.iter().enumerate() {
            let shift: i64 = rng.gen_range(-1..=1);
            let mut row = Vec::with_capacity(DIGIT_SIDE * DIGIT_SIDE);
            for glyph_row in g.iter() {
                for c in 0..DIGIT_SIDE {
                    let src = c as i64 - shift;
                    let ink = if (0..DIGIT_SIDE as i64).contains(&src) {
                        glyph_row[src as usize]
                    } else {
                        0.0
                    };
                    let z: f64 = rng.sample(StandardNormal);
                    row.push(T::of(2.0 * ink - 1.0 + noise * z));
                }
            }
            rows.push(row);
            labels.push(digit);
        }
    }
    LabeledDataset::new(Matrix::from_rows(&rows), labels, 10)
        .and_then(|d| {
            d.with_image_shape(ImageShape {
                height: DIGIT_SIDE,
                width: DIGIT_SIDE,
                channels: 1,
            })
        })
        .expect("consistent by construction")
}
