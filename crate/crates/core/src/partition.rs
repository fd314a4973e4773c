//! Class-wise Dirichlet label-skew partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor_nn::LabeledDataset;

/// Heterogeneity levels of the canonical sweep, most skewed first.
pub const ALPHA_GRID: [f64; 5] = [0.05, 0.1, 0.3, 0.5, 1000.0];

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid partition config: {0}")]
    InvalidConfig(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("no draw in {attempts} attempts gave every client at least {min} samples")]
    Infeasible { attempts: usize, min: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub clients: usize,
    pub seed: u64,
    pub min_samples_per_client: usize,
}

impl PartitionConfig {
    pub fn new(alpha: f64, clients: usize, seed: u64) -> Self {
        Self {
            alpha,
            clients,
            seed,
            min_samples_per_client: 2,
        }
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(PartitionError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.clients < 2 {
            return Err(PartitionError::InvalidConfig(format!(
                "need at least 2 clients, got {}",
                self.clients
            )));
        }
        Ok(())
    }
}

/// One draw from a symmetric Dirichlet via normalized Gamma variates.
fn dirichlet<R: rand::Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        // tiny alpha can underflow every component
        if s > 0.0 {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Sample indices per client. Every class's shuffled members are cut at the
/// rounded cumulative Dirichlet proportions.
pub fn partition_indices(
    labels: &[usize],
    classes: usize,
    cfg: &PartitionConfig,
) -> Result<Vec<Vec<usize>>, PartitionError> {
    cfg.validate()?;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(|m| m.is_empty()) {
        return Err(PartitionError::EmptyClass(c));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut parts = vec![Vec::new(); cfg.clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = dirichlet(cfg.alpha, cfg.clients, &mut rng);
            let n = members.len() as f64;
            let mut start = 0;
            let mut cum = 0.0;
            for (k, pk) in p.iter().enumerate() {
                cum += pk;
                let end = if k + 1 == cfg.clients {
                    members.len()
                } else {
                    ((cum * n).round() as usize).clamp(start, members.len())
                };
                parts[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if parts.iter().all(|p| p.len() >= cfg.min_samples_per_client) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(PartitionError::Infeasible {
        attempts: MAX_ATTEMPTS,
        min: cfg.min_samples_per_client,
    })
}

pub fn dirichlet_partition<T: Real>(
    data: &LabeledDataset<T>,
    cfg: &PartitionConfig,
) -> Result<Vec<LabeledDataset<T>>, PartitionError> {
    Ok(partition_indices(data.labels(), data.classes(), cfg)?
        .iter()
        .map(|idx| data.subset(idx))
        .collect())
}

/// Mean total-variation distance between the normalized label histograms of
/// every client pair.
pub fn mean_pairwise_tv(histograms: &[Vec<usize>]) -> f64 {
    let norm: Vec<Vec<f64>> = histograms
        .iter()
        .map(|h| {
            let s = h.iter().sum::<usize>().max(1) as f64;
            h.iter().map(|&v| v as f64 / s).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..norm.len() {
        for j in i + 1..norm.len() {
            total += 0.5 * norm[i].iter().zip(&norm[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Label histograms of a partition, written next to the client files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub alpha: f64,
    pub clients: usize,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionManifest {
    pub fn of<T: Real>(cfg: &PartitionConfig, parts: &[LabeledDataset<T>]) -> Self {
        Self {
            alpha: cfg.alpha,
            clients: cfg.clients,
            seed: cfg.seed,
            sizes: parts.iter().map(|p| p.len()).collect(),
            histograms: parts.iter().map(|p| p.class_histogram()).collect(),
        }
    }
}
