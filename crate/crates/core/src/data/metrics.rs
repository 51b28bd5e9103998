use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::theory::{CollisionReport, ProfileReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Loss and accuracy of one split after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Writes `epoch,split,loss,accuracy` rows with six decimals, in input order.
pub fn write_metrics_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in records {
        writeln!(out, "{},{},{:.6},{:.6}", r.epoch, r.split.as_str(), r.loss, r.accuracy).expect("writing to a String");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a `b,f` table of a translation profile.
pub fn write_profile_csv(report: &ProfileReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("b,f\n");
    for (b, f) in report.bias_grid.iter().zip(&report.values) {
        writeln!(out, "{b},{f}").expect("writing to a String");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes one `M,pairs,collisions,min_distance` row per report.
pub fn write_collisions_csv(reports: &[CollisionReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("M,pairs,collisions,min_distance\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{}",
            r.neurons, r.pairs_tested, r.collisions, r.min_pair_distance
        )
        .expect("writing to a String");
    }
    fs::write(path, out)?;
    Ok(())
}
