use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Sample};
use crate::aggregation::FeatureSet;
use crate::error::{Error, Result};

/// Synthetic set-classification tasks. Labels cycle through the classes so
/// every class gets `count / classes` samples (the first `count % classes`
/// classes get one more).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyntheticTask {
    /// Class `c` draws every element from an isotropic Gaussian with mean
    /// `centers[c]` and standard deviation `spread`.
    BlobSets {
        centers: Vec<Vec<f64>>,
        spread: f64,
        n_range: (usize, usize),
    },
    /// Class 0: 2-D points near the circle of radius 2. Class 1: a Gaussian
    /// blob at the origin with standard deviation 0.5.
    RingVsBlob { n_range: (usize, usize) },
}

impl SyntheticTask {
    /// Two well separated 2-D blobs at `(-2, -2)` and `(2, 2)`.
    pub fn two_blobs(spread: f64, n_range: (usize, usize)) -> Self {
        SyntheticTask::BlobSets {
            centers: vec![vec![-2.0, -2.0], vec![2.0, 2.0]],
            spread,
            n_range,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            SyntheticTask::BlobSets { centers, .. } => centers.len(),
            SyntheticTask::RingVsBlob { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SyntheticTask::BlobSets { centers, .. } => centers.first().map_or(0, Vec::len),
            SyntheticTask::RingVsBlob { .. } => 2,
        }
    }

    fn n_range(&self) -> (usize, usize) {
        match self {
            SyntheticTask::BlobSets { n_range, .. } | SyntheticTask::RingVsBlob { n_range } => *n_range,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_range();
        if lo == 0 || lo > hi {
            return Err(Error::contract(format!(
                "cardinality range [{lo}, {hi}] is empty or contains 0"
            )));
        }
        if let SyntheticTask::BlobSets { centers, spread, .. } = self {
            let dim = self.dim();
            if centers.is_empty() || dim == 0 || centers.iter().any(|c| c.len() != dim) {
                return Err(Error::contract("blob centers must be non-empty and of equal dimension"));
            }
            if !(*spread >= 0.0 && spread.is_finite()) {
                return Err(Error::contract(format!("spread must be non-negative, got {spread}")));
            }
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws `count` labeled sets; identical `seed` gives identical datasets.
pub fn gen_synthetic_sets(task: &SyntheticTask, count: usize, seed: u64) -> Result<LabeledDataset> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = task.n_range();
    let classes = task.classes();
    let dim = task.dim();
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let n = rng.random_range(lo..=hi);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            match task {
                SyntheticTask::BlobSets { centers, spread, .. } => {
                    data.extend(centers[label].iter().map(|c| c + spread * gaussian(&mut rng)));
                }
                SyntheticTask::RingVsBlob { .. } if label == 0 => {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let radius = 2.0 + 0.1 * gaussian(&mut rng);
                    data.extend([radius * angle.cos(), radius * angle.sin()]);
                }
                SyntheticTask::RingVsBlob { .. } => {
                    data.extend([0.5 * gaussian(&mut rng), 0.5 * gaussian(&mut rng)]);
                }
            }
        }
        samples.push((Sample::Set(FeatureSet::new(n, dim, data)?), label));
    }
    LabeledDataset::new(samples, classes)
}
