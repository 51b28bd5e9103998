//! Executable checks of what a ReLU set embedding can and cannot lose.
//!
//! * [`relu_profile`] samples `b -> sum_i relu(v s_i + b)` for a scalar set.
//! * [`recover_1d_set`] reads the set back from the profile's kinks.
//! * [`injectivity_check`] embeds a universe of distinct sets with random
//!   ReLU neurons and counts pairs that collide.
//! * [`maxlimit_convergence_check`] tracks how fast the smooth maxima
//!   approach the true maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::{power_max_approx, Activation, FeatureSet, SanLayer, SmoothMaxMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Embeddings closer than this count as a collision.
pub const COLLISION_THRESHOLD: f64 = 1e-9;

/// `f(b) = sum_i relu(v . x_i + b)` sampled on `bias_grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub direction: Vec<f64>,
    pub bias_grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl ProfileReport {
    /// Discrete second differences (unscaled) are all `>= -tol`.
    pub fn is_convex(&self, tol: f64) -> bool {
        self.values.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] >= -tol)
    }

    /// Values never decrease once `b` exceeds `threshold`.
    pub fn is_monotone_after(&self, threshold: f64) -> bool {
        self.bias_grid
            .iter()
            .zip(&self.values)
            .filter(|(b, _)| **b > threshold)
            .map(|(_, f)| *f)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] >= w[0])
    }
}

fn check_ascending(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::contract("bias grid is empty"));
    }
    if grid.iter().any(|b| !b.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("bias grid must be finite and strictly ascending"));
    }
    Ok(())
}

/// Translation profile of a set of scalars along direction `v`.
pub fn relu_profile(set: &[f64], v: f64, bias_grid: &[f64]) -> Result<ProfileReport> {
    relu_profile_nd(&FeatureSet::from_scalars(set)?, &[v], bias_grid)
}

/// Translation profile of a set of vectors along direction `v`.
pub fn relu_profile_nd(set: &FeatureSet, v: &[f64], bias_grid: &[f64]) -> Result<ProfileReport> {
    check_ascending(bias_grid)?;
    if v.len() != set.dim() {
        return Err(Error::Dimension {
            op: "relu_profile",
            left: vec![set.cardinality(), set.dim()],
            right: vec![v.len()],
        });
    }
    let projections: Vec<f64> = set.rows().map(|x| x.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
    let values = bias_grid
        .iter()
        .map(|b| projections.iter().map(|s| (s + b).max(0.0)).sum())
        .collect();
    Ok(ProfileReport {
        direction: v.to_vec(),
        bias_grid: bias_grid.to_vec(),
        values,
    })
}

/// Grid `k * step` for every integer `k` with `|k * step| <= max|s| + 1`
/// (rounded outwards), so every kink of the profile is interior.
pub fn covering_grid(set: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract(format!("grid step must be positive, got {step}")));
    }
    let reach = set.iter().fold(0.0f64, |m, s| m.max(s.abs())) + 1.0;
    let k = (reach / step).ceil() as i64;
    Ok((-k..=k).map(|j| j as f64 * step).collect())
}

/// An estimated element and how many times it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveredElement {
    pub value: f64,
    pub multiplicity: usize,
}

/// Flattens recovered elements into a sorted multiset.
pub fn expand(elements: &[RecoveredElement]) -> Vec<f64> {
    let mut out: Vec<f64> = elements
        .iter()
        .flat_map(|e| std::iter::repeat_n(e.value, e.multiplicity))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Reads a one-dimensional set back from its ReLU translation profile.
///
/// The scaled second difference `(f(b-h) - 2f(b) + f(b+h)) / h` is the
/// number of elements whose kink sits at `b`, times `|v|`. On a grid aligned
/// with the elements each kink lands on one grid point and is reported at
/// `-b / v` with multiplicity `round(mass / |v|)`. A kink between two grid
/// points splits its mass over both neighbours; such runs of fractional
/// mass are merged into one element at their mass-weighted centre.
pub fn recover_1d_set(profile: &ProfileReport, grid_step: f64) -> Result<Vec<RecoveredElement>> {
    let &[v] = profile.direction.as_slice() else {
        return Err(Error::contract("set recovery needs a one-dimensional direction"));
    };
    if v == 0.0 {
        return Err(Error::contract("a zero direction hides every element"));
    }
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(Error::contract(format!("grid step must be positive, got {grid_step}")));
    }
    let grid = &profile.bias_grid;
    if grid.len() != profile.values.len() {
        return Err(Error::contract("profile grid and values differ in length"));
    }
    check_ascending(grid)?;
    let tol = 1e-9 * grid_step.max(1.0) * grid.len() as f64;
    if grid.windows(2).any(|w| ((w[1] - w[0]) - grid_step).abs() > tol) {
        return Err(Error::contract(format!(
            "bias grid is not uniform with step {grid_step}"
        )));
    }

    let scale = v.abs();
    let f = &profile.values;
    // counts[j] is the element mass at grid[j + 1]
    let counts: Vec<f64> = f
        .windows(3)
        .map(|w| (w[0] - 2.0 * w[1] + w[2]) / grid_step / scale)
        .collect();
    let noise = 1e-6;
    let mut out = Vec::new();
    let mut j = 0;
    while j < counts.len() {
        if counts[j].abs() <= noise {
            j += 1;
            continue;
        }
        let start = j;
        while j < counts.len() && counts[j].abs() > noise {
            j += 1;
        }
        let run = start..j;
        let integral = run.clone().all(|k| (counts[k] - counts[k].round()).abs() <= noise);
        if integral {
            for k in run {
                let m = counts[k].round();
                if m >= 1.0 {
                    out.push(RecoveredElement {
                        value: -grid[k + 1] / v,
                        multiplicity: m as usize,
                    });
                }
            }
        } else {
            let mass: f64 = run.clone().map(|k| counts[k]).sum();
            let m = mass.round();
            if m >= 1.0 {
                let centre = run.map(|k| counts[k] * grid[k + 1]).sum::<f64>() / mass;
                out.push(RecoveredElement {
                    value: -centre / v,
                    multiplicity: m as usize,
                });
            }
        }
    }
    out.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(out)
}

/// Summary of one injectivity experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub neurons: usize,
    pub trials: usize,
    pub pairs_tested: usize,
    pub min_pair_distance: f64,
    pub collisions: usize,
}

/// A ReLU [`SanLayer`] with standard-normal weights and biases uniform in
/// `[-radius, radius]`.
///
/// Neurons are drawn one after another from a single seeded stream, so the
/// layer for `M` neurons is the first `M` neurons of the layer for any
/// larger count under the same seed.
pub fn random_relu_layer(neurons: usize, dim: usize, radius: f64, seed: u64) -> Result<SanLayer> {
    if neurons == 0 || dim == 0 {
        return Err(Error::contract("random layer needs at least one neuron and one input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(neurons * dim);
    let mut bias = Vec::with_capacity(neurons);
    for _ in 0..neurons {
        weights.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        bias.push(rng.random_range(-radius..=radius));
    }
    SanLayer::new(
        Tensor::matrix(neurons, dim, weights)?,
        Tensor::vector(bias)?,
        Activation::Relu,
    )
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Embeds every set of `universe` with one seeded random ReLU layer of
/// `neurons` units and compares all pairs.
///
/// The bias range is the largest absolute coordinate in the universe. The
/// universe must hold pairwise distinct multisets of equal dimension.
pub fn injectivity_check(universe: &[FeatureSet], neurons: usize, seed: u64) -> Result<CollisionReport> {
    if universe.len() < 2 {
        return Err(Error::contract("injectivity check needs at least two sets"));
    }
    let dim = universe[0].dim();
    if universe.iter().any(|s| s.dim() != dim) {
        return Err(Error::contract("universe sets differ in dimension"));
    }
    let mut canonical: Vec<(Vec<Vec<f64>>, usize)> = universe
        .iter()
        .enumerate()
        .map(|(i, s)| (s.canonical_rows(), i))
        .collect();
    canonical.sort_by(|a, b| {
        a.0.iter()
            .flatten()
            .zip(b.0.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(a.0.len().cmp(&b.0.len()))
    });
    if let Some(w) = canonical.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::contract(format!(
            "universe sets {} and {} are the same multiset",
            w[0].1, w[1].1
        )));
    }

    let radius = universe
        .iter()
        .flat_map(|s| s.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let radius = if radius > 0.0 { radius } else { 1.0 };
    let layer = random_relu_layer(neurons, dim, radius, seed)?;
    let embeddings = universe
        .iter()
        .map(|s| layer.aggregate(s))
        .collect::<Result<Vec<_>>>()?;

    let mut pairs = 0;
    let mut collisions = 0;
    let mut min_distance = f64::INFINITY;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            pairs += 1;
            min_distance = min_distance.min(d);
            if d < COLLISION_THRESHOLD {
                collisions += 1;
            }
        }
    }
    Ok(CollisionReport {
        neurons,
        trials: 1,
        pairs_tested: pairs,
        min_pair_distance: min_distance,
        collisions,
    })
}

/// All `size`-element subsets of `{0, 1, ..., max}` as scalar sets, in
/// lexicographic order.
pub fn integer_subsets(max: usize, size: usize) -> Result<Vec<FeatureSet>> {
    fn rec(next: usize, max: usize, left: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for v in next..=max {
            cur.push(v as f64);
            rec(v + 1, max, left - 1, cur, out);
            cur.pop();
        }
    }
    if size == 0 {
        return Err(Error::contract("subset size must be positive"));
    }
    let mut raw = Vec::new();
    rec(0, max, size, &mut Vec::new(), &mut raw);
    raw.iter().map(|s| FeatureSet::from_scalars(s)).collect()
}

/// Smooth-max error at one exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxLimitPoint {
    pub p: f64,
    pub value: f64,
    /// `|value - max|`.
    pub error: f64,
    /// `max * (n^(1/p) - 1)` for power mode, `ln(n) / p` for log-sum-exp.
    pub bound: f64,
}

/// Evaluates [`power_max_approx`] along an ascending exponent schedule.
pub fn maxlimit_convergence_check(
    values: &[f64],
    p_schedule: &[f64],
    mode: SmoothMaxMode,
) -> Result<Vec<MaxLimitPoint>> {
    if p_schedule.is_empty() || p_schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract(
            "exponent schedule must be non-empty and strictly ascending",
        ));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = values.len() as f64;
    p_schedule
        .iter()
        .map(|&p| {
            let value = power_max_approx(values, p, mode)?;
            let bound = match mode {
                SmoothMaxMode::Power => max * (n.powf(1.0 / p) - 1.0),
                SmoothMaxMode::LogSumExp => n.ln() / p,
            };
            Ok(MaxLimitPoint {
                p,
                value,
                error: (value - max).abs(),
                bound,
            })
        })
        .collect()
}
