use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};

/// Extra columns that re-introduce element order or location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionalMode {
    None,
    /// `i / (n - 1)`, or `0` for a single element.
    NormalizedIndex,
    /// `(row / (H - 1), col / (W - 1))` on the source grid.
    Normalized2d,
    /// `d` interleaved `sin(i / 10000^(2k/d))`, `cos(i / 10000^(2k/d))` values.
    Sinusoidal(usize),
}

impl PositionalMode {
    pub fn width(self) -> usize {
        match self {
            PositionalMode::None => 0,
            PositionalMode::NormalizedIndex => 1,
            PositionalMode::Normalized2d => 2,
            PositionalMode::Sinusoidal(d) => d,
        }
    }
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PositionalMode::None),
            "index" | "normalized-index" => Ok(PositionalMode::NormalizedIndex),
            "2d" | "normalized-2d" => Ok(PositionalMode::Normalized2d),
            other => {
                let d = other
                    .strip_prefix("sinusoidal:")
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::contract(format!("unknown positional mode `{other}`")))?;
                Ok(PositionalMode::Sinusoidal(d))
            }
        }
    }
}

fn normalized(i: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        i as f64 / (len - 1) as f64
    }
}

/// Row-major `n x mode.width()` positional columns for `n` elements.
pub fn position_columns(n: usize, source_shape: Option<(usize, usize)>, mode: PositionalMode) -> Result<Vec<f64>> {
    Ok(match mode {
        PositionalMode::None => Vec::new(),
        PositionalMode::NormalizedIndex => (0..n).map(|i| normalized(i, n)).collect(),
        PositionalMode::Normalized2d => {
            let (h, w) =
                source_shape.ok_or_else(|| Error::contract("normalized-2d positions need the source grid shape"))?;
            if h * w != n {
                return Err(Error::contract(format!(
                    "source grid {h}x{w} does not match {n} elements"
                )));
            }
            (0..n)
                .flat_map(|i| [normalized(i / w, h), normalized(i % w, w)])
                .collect()
        }
        PositionalMode::Sinusoidal(d) => (0..n)
            .flat_map(|i| {
                (0..d).map(move |j| {
                    let k = (j / 2) as f64;
                    let angle = i as f64 / 10000f64.powf(2.0 * k / d as f64);
                    if j % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
            })
            .collect(),
    })
}

/// Returns `set` with positional columns appended to every row.
pub fn attach_positions(set: &FeatureSet, mode: PositionalMode) -> Result<FeatureSet> {
    let cols = position_columns(set.cardinality(), set.source_shape(), mode)?;
    Ok(set.with_columns(&cols, mode.width()))
}
