//! Align-corners image resizing: output corner pixels sample input corner
//! pixels exactly. Bicubic uses the Catmull-Rom kernel (`a = -0.5`) with
//! clamped edges.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMethod {
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for ResizeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(ResizeMethod::Bilinear),
            "bicubic" => Ok(ResizeMethod::Bicubic),
            other => Err(Error::contract(format!("unknown resize method `{other}`"))),
        }
    }
}

/// Source coordinate sampled by output index `j` when mapping `src` samples
/// onto `dst` samples.
fn source_coord(j: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        0.0
    } else {
        j as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

// Written in difference form so that constant runs and integer
// positions reproduce the input bit for bit.
fn interpolate(line: &dyn Fn(isize) -> f64, s: f64, len: usize, method: ResizeMethod) -> f64 {
    let last = len as isize - 1;
    let i = (s.floor() as isize).min(last);
    let t = s - i as f64;
    let at = |k: isize| line(k.clamp(0, last));
    match method {
        ResizeMethod::Bilinear => {
            let (a, b) = (at(i), at(i + 1));
            a + t * (b - a)
        }
        ResizeMethod::Bicubic => {
            let p1 = at(i);
            let (d0, d2, d3) = (at(i - 1) - p1, at(i + 1) - p1, at(i + 2) - p1);
            p1 + 0.5 * t * (d2 - d0 + t * (2.0 * d0 + 4.0 * d2 - d3 + t * (d3 - d0 - 3.0 * d2)))
        }
    }
}

/// Resizes an `[H, W, C]` image to `[new_h, new_w, C]`, width first.
pub fn resize_image(image: &Tensor, new_h: usize, new_w: usize, method: ResizeMethod) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::contract(format!(
            "resize expects an [H, W, C] image, got shape {:?}",
            image.shape()
        )));
    };
    if new_h == 0 || new_w == 0 {
        return Err(Error::contract(format!("target size {new_h}x{new_w} must be positive")));
    }
    if (new_h, new_w) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut wide = vec![0.0; h * new_w * c];
    for y in 0..h {
        for x in 0..new_w {
            let s = source_coord(x, w, new_w);
            for ch in 0..c {
                let line = |k: isize| src[(y * w + k as usize) * c + ch];
                wide[(y * new_w + x) * c + ch] = interpolate(&line, s, w, method);
            }
        }
    }
    let mut out = vec![0.0; new_h * new_w * c];
    for y in 0..new_h {
        let s = source_coord(y, h, new_h);
        for x in 0..new_w {
            for ch in 0..c {
                let line = |k: isize| wide[(k as usize * new_w + x) * c + ch];
                out[(y * new_w + x) * c + ch] = interpolate(&line, s, h, method);
            }
        }
    }
    Tensor::new(vec![new_h, new_w, c], out)
}

/// Resizes every image sample to `size x size`; raw sets pass through.
pub fn resize_dataset(ds: &LabeledDataset, size: usize, method: ResizeMethod) -> Result<LabeledDataset> {
    let samples = ds
        .samples()
        .iter()
        .map(|(s, l)| match s {
            Sample::Image(t) => Ok((Sample::Image(resize_image(t, size, size, method)?), *l)),
            Sample::Set(_) => Ok((s.clone(), *l)),
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples, ds.classes())
}

/// Resizes each image sample to a seeded random choice among `sizes` (square).
pub fn resize_dataset_random(
    ds: &LabeledDataset,
    sizes: &[usize],
    method: ResizeMethod,
    seed: u64,
) -> Result<LabeledDataset> {
    if sizes.is_empty() {
        return Err(Error::contract("no target sizes given"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = ds
        .samples()
        .iter()
        .map(|(s, l)| {
            let size = *sizes.choose(&mut rng).expect("non-empty");
            match s {
                Sample::Image(t) => Ok((Sample::Image(resize_image(t, size, size, method)?), *l)),
                Sample::Set(_) => Ok((s.clone(), *l)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(samples, ds.classes())
}
