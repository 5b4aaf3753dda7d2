//! Pixel sensitivity of the posterior mean cluster probabilities.
//!
//! The expectation over weights is a Monte Carlo average over `mc_draws`
//! fixed weight samples; the maps are gradients of that average with respect
//! to the image, so a finite difference of [`mc_mean_probability`] under the
//! same seed reproduces them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::scoring_pool;
use crate::models::image_model::ImageModel;
use crate::models::params::{BnUse, Forward, Sampling};
use crate::rng::{derive, derive_seed, tag};
use crate::tensor::Tensor;

pub const DEFAULT_SALIENCE_DRAWS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceMap {
    pub height: usize,
    pub width: usize,
    /// Cluster index, 0-based.
    pub cluster: usize,
    pub mc_draws: usize,
    pub seed: u64,
    /// Channel-summed gradient, row-major `H x W`.
    pub direction: Vec<f64>,
    /// Channel-wise gradient norm, row-major `H x W`.
    pub magnitude: Vec<f64>,
}

fn check(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize) -> Result<()> {
    if k >= model.k() {
        return Err(Error::invalid(format!("salience: cluster {k} out of range for K = {}", model.k())));
    }
    if mc_draws == 0 {
        return Err(Error::invalid("salience: mc_draws must be at least 1"));
    }
    let d = model.dims;
    let p = d.height * d.width * d.channels;
    if image.len() != p {
        return Err(Error::shape("salience", "image values", p, image.len()));
    }
    if tabular.map_or(0, <[f64]>::len) != d.tabular {
        return Err(Error::shape("salience", "tabular values", d.tabular, tabular.map_or(0, <[f64]>::len)));
    }
    Ok(())
}

fn draw_forward(model: &ImageModel, seed: u64, d: usize) -> Result<Forward<'_>> {
    Forward::new(
        &model.store,
        &model.running,
        Sampling::Reparam,
        BnUse::Eval,
        false,
        derive(seed, &[tag("salience"), d as u64]),
    )
}

fn image_tensor(model: &ImageModel, image: &[f64]) -> Result<Tensor> {
    let d = model.dims;
    Tensor::new(vec![1, d.height, d.width, d.channels], image.to_vec())
}

/// Per-draw gradients of `Pr(Z = k | image)`, each `[H, W, C]` flat.
fn draw_gradients(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    check(model, image, tabular, k, mc_draws)?;
    let x_t = image_tensor(model, image)?;
    let tab_t = tabular.map(|t| Tensor::new(vec![1, t.len()], t.to_vec())).transpose()?;
    let mut out = Vec::with_capacity(mc_draws);
    for d in 0..mc_draws {
        let mut f = draw_forward(model, seed, d)?;
        let x = f.g.param(x_t.clone())?;
        let tab = tab_t.clone().map(|v| f.g.constant(v)).transpose()?;
        let probs = model.image_type_probs(&mut f, x, tab)?;
        let mut pick = vec![0.0; model.k()];
        pick[k] = 1.0;
        let sel = f.g.mul_const(probs, &Tensor::new(vec![1, model.k()], pick)?)?;
        let pk = f.g.sum(sel)?;
        let g = f.g.backward(pk)?;
        out.push(g.get(x).map_or_else(|| vec![0.0; image.len()], <[f64]>::to_vec));
    }
    Ok(out)
}

/// Monte Carlo mean of `Pr(Z = k | image)` over the same fixed draws the maps
/// differentiate.
pub fn mc_mean_probability(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<f64> {
    check(model, image, tabular, k, mc_draws)?;
    let x_t = image_tensor(model, image)?;
    let tab_t = tabular.map(|t| Tensor::new(vec![1, t.len()], t.to_vec())).transpose()?;
    let mut acc = 0.0;
    for d in 0..mc_draws {
        let mut f = draw_forward(model, seed, d)?;
        let x = f.g.constant(x_t.clone())?;
        let tab = tab_t.clone().map(|v| f.g.constant(v)).transpose()?;
        let probs = model.image_type_probs(&mut f, x, tab)?;
        acc += f.g.value(probs).data()[k];
    }
    Ok(acc / mc_draws as f64)
}

/// Gradient of the Monte Carlo mean probability, `[H, W, C]` flat.
pub fn probability_gradient(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<Vec<f64>> {
    let draws = draw_gradients(model, image, tabular, k, mc_draws, seed)?;
    let mut g = vec![0.0; image.len()];
    for d in &draws {
        g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / mc_draws as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

fn reduce(model: &ImageModel, grad: &[f64], k: usize, mc_draws: usize, seed: u64) -> SalienceMap {
    let c = model.dims.channels;
    let direction = grad.chunks(c).map(|px| px.iter().sum()).collect();
    let magnitude = grad.chunks(c).map(|px| px.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    SalienceMap {
        height: model.dims.height,
        width: model.dims.width,
        cluster: k,
        mc_draws,
        seed,
        direction,
        magnitude,
    }
}

/// Direction and magnitude maps for cluster `k` (0-based).
pub fn salience(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<SalienceMap> {
    let g = probability_gradient(model, image, tabular, k, mc_draws, seed)?;
    Ok(reduce(model, &g, k, mc_draws, seed))
}

pub fn salience_direction(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(salience(model, image, tabular, k, mc_draws, seed)?.direction)
}

pub fn salience_magnitude(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(salience(model, image, tabular, k, mc_draws, seed)?.magnitude)
}

/// Maps for every image of a flat `[n, H, W, C]` buffer, image `i` seeded
/// with `(seed, i)`, in input order.
pub fn salience_maps(model: &ImageModel, images: &[f64], tabular: Option<&[f64]>, k: usize, mc_draws: usize, seed: u64) -> Result<Vec<SalienceMap>> {
    let d = model.dims;
    let p = d.height * d.width * d.channels;
    if p == 0 || images.len() % p != 0 {
        return Err(Error::shape("salience_maps", "image values", p, images.len()));
    }
    let n = images.len() / p;
    if let Some(t) = tabular {
        if t.len() != n * d.tabular {
            return Err(Error::shape("salience_maps", "tabular values", n * d.tabular, t.len()));
        }
    }
    scoring_pool()?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let tab = tabular.map(|t| &t[i * d.tabular..(i + 1) * d.tabular]);
                salience(model, &images[i * p..(i + 1) * p], tab, k, mc_draws, derive_seed(seed, &[i as u64]))
            })
            .collect()
    })
}

/// Min-max scaling to [0, 1]; a constant map scales to zeros.
pub fn min_max_scale(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Binary 16-bit PGM (P5, big-endian samples) of the min-max scaled map.
pub fn render_pgm16(map: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if map.len() != height * width {
        return Err(Error::shape("render_pgm16", "map values", height * width, map.len()));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in min_max_scale(map) {
        out.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
    }
    Ok(out)
}

/// Raw little-endian f64 bytes of a map.
pub fn raw_f64le(map: &[f64]) -> Vec<u8> {
    map.iter().flat_map(|v| v.to_le_bytes()).collect()
}
