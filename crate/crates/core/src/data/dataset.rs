use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One model input: an `[H, W, C]` image or a raw feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sample {
    Image(Tensor),
    Set(FeatureSet),
}

impl Sample {
    /// Number of set elements a raw set contributes, or pixels for an image.
    pub fn cardinality(&self) -> usize {
        match self {
            Sample::Image(t) => t.shape()[..2].iter().product(),
            Sample::Set(s) => s.cardinality(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    samples: Vec<(Sample, usize)>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<(Sample, usize)>, classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("dataset must not be empty"));
        }
        if let Some((i, (_, label))) = samples.iter().enumerate().find(|(_, (_, l))| *l >= classes) {
            return Err(Error::contract(format!(
                "sample {i} has label {label}, outside [0, {classes})"
            )));
        }
        Ok(Self { samples, classes })
    }

    pub fn samples(&self) -> &[(Sample, usize)] {
        &self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for (_, l) in &self.samples {
            counts[*l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.samples[i].clone()).collect(), self.classes)
    }
}
