//! Synthetic imagery and the simulation data-generating process.
//!
//! Images are smoothed random fields with planted copies of a fixed cross
//! patch. A unit's latent heterogeneity is the globally normalized maximum
//! response of a matched filter; a power transform makes the effects bimodal
//! and outcomes add Gaussian noise scaled by `nu`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::conv2d_forward;
use crate::autodiff::Padding;
use crate::dataset::{ImageDims, TrialDataset};
use crate::error::{Error, Result};
use crate::estimands::{kmeans, ClusterCenters};
use crate::rng::{derive, normals, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side `l` of the square matched filter and planted patch.
    pub filter_size: usize,
    pub gamma: f64,
    pub nu_grid: Vec<f64>,
    pub treat_prob: f64,
    /// Expected planted patches per image.
    pub pattern_density: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            height: 32,
            width: 32,
            channels: 3,
            filter_size: 5,
            gamma: 2.0,
            nu_grid: vec![0.01, 0.1, 1.0],
            treat_prob: 0.5,
            pattern_density: 1.0,
            k: 2,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn dims(&self) -> ImageDims {
        ImageDims {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("sim: n must be at least 2"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("sim: image dims must be positive"));
        }
        if self.filter_size == 0 || self.filter_size > self.height.min(self.width) {
            return Err(Error::invalid(format!(
                "sim: filter size {} does not fit a {}x{} image",
                self.filter_size, self.height, self.width
            )));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::invalid("sim: gamma must be at least 1"));
        }
        if self.nu_grid.is_empty() || self.nu_grid.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("sim: every nu must be positive"));
        }
        if !(0.0..=1.0).contains(&self.treat_prob) {
            return Err(Error::invalid("sim: treat_prob must lie in [0, 1]"));
        }
        if !(self.pattern_density >= 0.0) {
            return Err(Error::invalid("sim: pattern_density must be nonnegative"));
        }
        Ok(())
    }
}

/// The `l x l` cross: ones on the middle row and column.
pub fn target_patch(l: usize) -> Vec<f64> {
    let mid = l / 2;
    (0..l * l).map(|i| f64::from(u8::from(i / l == mid || i % l == mid))).collect()
}

/// Matched filter `[l, l, C, 1]`: the cross on every channel.
pub fn matched_filter(l: usize, channels: usize) -> Tensor {
    let patch = target_patch(l);
    let data = patch.iter().flat_map(|v| std::iter::repeat_n(*v, channels)).collect();
    Tensor::new(vec![l, l, channels, 1], data).expect("filter shape")
}

const BACKGROUND_MAX: f64 = 0.4;
const PATCH_AMPLITUDE: (f64, f64) = (0.3, 0.6);
const PLACEMENT_TRIES: usize = 200;

/// `n` images `[H, W, C]` flattened back to back. Unit `i` receives
/// `round(density_i * u)` patches with `u ~ Uniform(0, 2)`, each at a random
/// non-overlapping location with a random amplitude, on top of a 3x3
/// box-smoothed uniform background. Values are clamped to `[0, 1]` and are
/// exactly representable in f32.
pub fn synth_images(n: usize, dims: ImageDims, patch: usize, densities: &[f64], seed: u64) -> Result<Vec<f64>> {
    if densities.len() != n {
        return Err(Error::shape("synth_images", "densities", n, densities.len()));
    }
    if patch == 0 || patch > dims.height || patch > dims.width {
        return Err(Error::invalid(format!(
            "synth_images: {patch}x{patch} patch does not fit a {}x{} image",
            dims.height, dims.width
        )));
    }
    if densities.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::invalid("synth_images: densities must be nonnegative"));
    }
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let shape = target_patch(patch);
    let mut out = Vec::with_capacity(n * dims.pixels());
    for (i, density) in densities.iter().enumerate() {
        let mut rng = derive(seed, &[tag("image"), i as u64]);
        let raw: Vec<f64> = (0..h * w * c).map(|_| rng.gen::<f64>()).collect();
        let mut img = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (mut s, mut m) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xx in x.saturating_sub(1)..(x + 2).min(w) {
                            s += raw[(yy * w + xx) * c + ch];
                            m += 1.0;
                        }
                    }
                    img[(y * w + x) * c + ch] = BACKGROUND_MAX * s / m;
                }
            }
        }
        let count = (density * rng.gen_range(0.0..2.0)).round() as usize;
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for _ in 0..count {
            let mut spot = None;
            for _ in 0..PLACEMENT_TRIES {
                let (py, px) = (rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch));
                if placed.iter().all(|&(qy, qx)| py.abs_diff(qy) >= patch || px.abs_diff(qx) >= patch) {
                    spot = Some((py, px));
                    break;
                }
            }
            let Some((py, px)) = spot else { break };
            placed.push((py, px));
            let amp = rng.gen_range(PATCH_AMPLITUDE.0..PATCH_AMPLITUDE.1);
            for dy in 0..patch {
                for dx in 0..patch {
                    let s = shape[dy * patch + dx];
                    if s != 0.0 {
                        for ch in 0..c {
                            img[((py + dy) * w + px + dx) * c + ch] += amp * s;
                        }
                    }
                }
            }
        }
        // Rounded to f32 so the on-disk format holds the images exactly.
        out.extend(img.into_iter().map(|v| f64::from(v.clamp(0.0, 1.0) as f32)));
    }
    Ok(out)
}

/// Raw per-image score: the maximum of a valid, channel-summed convolution.
pub fn max_filter_response(images: &[f64], dims: ImageDims, filter: &Tensor) -> Result<Vec<f64>> {
    let p = dims.pixels();
    if images.is_empty() || images.len() % p != 0 {
        return Err(Error::shape("heterogeneity_score", "image values", p, images.len() % p.max(1)));
    }
    images
        .chunks(p)
        .map(|img| {
            let x = Tensor::new(vec![1, dims.height, dims.width, dims.channels], img.to_vec())?;
            let r = conv2d_forward(&x, filter, 1, Padding::Valid)?;
            Ok(r.data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Scales scores to pool mean 0 and population variance 1.
pub fn global_normalize(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::invalid("global normalization needs at least 2 scores"));
    }
    let m = crate::stats::mean(x);
    let sd = crate::stats::population_sd(x);
    if !(sd > 0.0) {
        return Err(Error::ZeroVariance("heterogeneity scores"));
    }
    Ok(x.iter().map(|v| (v - m) / sd).collect())
}

/// `H_i = GN(max f_l(M_i))`.
pub fn heterogeneity_score(images: &[f64], dims: ImageDims, filter: &Tensor) -> Result<Vec<f64>> {
    global_normalize(&max_filter_response(images, dims, filter)?)
}

/// `H+_i = |min_j H_j| + sign(H_i) |H_i|^(1/gamma)`, as written. Logs a
/// warning when the result is not strictly positive.
pub fn bimodal_transform(h: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma >= 1.0) {
        return Err(Error::invalid("bimodal_transform: gamma must be at least 1"));
    }
    let offset = h.iter().copied().fold(f64::INFINITY, f64::min).abs();
    let out: Vec<f64> = h.iter().map(|v| offset + v.signum() * v.abs().powf(1.0 / gamma)).collect();
    if let Some(min) = out.iter().copied().reduce(f64::min) {
        if min <= 0.0 {
            log::warn!("bimodal_transform: minimum transformed effect {min} is not positive");
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcomes {
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub eps: Vec<f64>,
}

/// `T_i ~ Bernoulli(p)`, `eps_i ~ N(0, nu Var(H+))`, `Y_i = T_i H+_i + eps_i`.
pub fn gen_outcomes(h_plus: &[f64], nu: f64, treat_prob: f64, seed: u64) -> Result<Outcomes> {
    if !(nu > 0.0) {
        return Err(Error::invalid("gen_outcomes: nu must be positive"));
    }
    let var = crate::stats::population_var(h_plus);
    if !(var > 0.0) {
        return Err(Error::ZeroVariance("true effects"));
    }
    let mut rng = derive(seed, &[tag("treatment")]);
    let t: Vec<u8> = h_plus.iter().map(|_| u8::from(rng.gen::<f64>() < treat_prob)).collect();
    let sd = (nu * var).sqrt();
    let eps: Vec<f64> = normals(&mut derive(seed, &[tag("noise")]), h_plus.len()).into_iter().map(|e| e * sd).collect();
    let y: Vec<f64> = t.iter().zip(h_plus).zip(&eps).map(|((ti, hp), e)| f64::from(*ti) * hp + e).collect();
    // Stored noise is recomputed from `y` so `y - t * h_plus` reproduces it
    // bit for bit.
    let eps = y.iter().zip(&t).zip(h_plus).map(|((yi, ti), hp)| yi - f64::from(*ti) * hp).collect();
    Ok(Outcomes { t, y, eps })
}

/// k-means on the true effects.
pub fn oracle_clusters(true_taus: &[f64], k: usize, seed: u64) -> Result<ClusterCenters> {
    kmeans(true_taus, k, seed, 300)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutputs {
    pub dataset: TrialDataset,
    pub h: Vec<f64>,
    pub h_plus: Vec<f64>,
    pub eps: Vec<f64>,
    pub oracle: ClusterCenters,
}

/// Image pool and true effects; independent of `nu`.
pub fn simulate_effects(config: &SimConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    config.validate()?;
    let dims = config.dims();
    let densities = vec![config.pattern_density; config.n];
    let images = synth_images(config.n, dims, config.filter_size, &densities, derive_image_seed(seed))?;
    let h = heterogeneity_score(&images, dims, &matched_filter(config.filter_size, config.channels))?;
    let h_plus = bimodal_transform(&h, config.gamma)?;
    Ok((images, h, h_plus))
}

fn derive_image_seed(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, &[tag("images")])
}

/// One full draw of the data-generating process at noise level `nu`.
pub fn simulate(config: &SimConfig, nu: f64, seed: u64) -> Result<SimOutputs> {
    let (images, h, h_plus) = simulate_effects(config, seed)?;
    let out = gen_outcomes(&h_plus, nu, config.treat_prob, crate::rng::derive_seed(seed, &[tag("outcomes"), nu.to_bits()]))?;
    let oracle = oracle_clusters(&h_plus, config.k, seed)?;
    let dataset = TrialDataset::new(config.dims(), images, out.y, out.t, None)?;
    Ok(SimOutputs {
        dataset,
        h,
        h_plus,
        eps: out.eps,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{dip_statistic, mean, population_var};
    use proptest::prelude::*;

    fn small() -> SimConfig {
        SimConfig {
            n: 60,
            height: 12,
            width: 12,
            ..SimConfig::default()
        }
    }

    #[test]
    fn images_are_bounded_and_reproducible() {
        let cfg = small();
        let dens = vec![1.0; cfg.n];
        let a = synth_images(cfg.n, cfg.dims(), 5, &dens, 3).unwrap();
        let b = synth_images(cfg.n, cfg.dims(), 5, &dens, 3).unwrap();
        assert_eq!(a.len(), cfg.n * cfg.dims().pixels());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_images(1, cfg.dims(), 13, &[1.0], 0).is_err());
    }

    #[test]
    fn zero_density_responds_low() {
        let dims = ImageDims {
            height: 16,
            width: 16,
            channels: 3,
        };
        let f = matched_filter(5, 3);
        let plain = max_filter_response(&synth_images(100, dims, 5, &[0.0; 100], 1).unwrap(), dims, &f).unwrap();
        let rich = max_filter_response(&synth_images(100, dims, 5, &[3.0; 100], 1).unwrap(), dims, &f).unwrap();
        let top_plain = plain.iter().copied().fold(f64::MIN, f64::max);
        // Every background-only image scores below a typical patterned one.
        let mut sorted = rich.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(top_plain < sorted[sorted.len() / 2]);
    }

    #[test]
    fn score_examples() {
        let dims = ImageDims {
            height: 2,
            width: 2,
            channels: 1,
        };
        let images: Vec<f64> = [1.0, 2.0, 3.0].iter().flat_map(|v| [*v; 4]).collect();
        let f = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let h = heterogeneity_score(&images, dims, &f).unwrap();
        let want = 1.5f64.sqrt();
        assert!((h[0] + want).abs() < 1e-12 && h[1].abs() < 1e-12 && (h[2] - want).abs() < 1e-12);
        assert!(matches!(heterogeneity_score(&[1.0; 8], dims, &f), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn transform_examples() {
        assert_eq!(bimodal_transform(&[-1.0, 0.0, 1.0], 2.0).unwrap(), vec![0.0, 1.0, 2.0]);
        let h = [-0.3, 0.2, 1.7];
        assert_eq!(bimodal_transform(&h, 1.0).unwrap(), vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn larger_gamma_is_more_bimodal() {
        let h = global_normalize(&normals(&mut crate::rng::stream(3), 2000)).unwrap();
        let d1 = dip_statistic(&bimodal_transform(&h, 1.0).unwrap()).unwrap();
        let d8 = dip_statistic(&bimodal_transform(&h, 8.0).unwrap()).unwrap();
        assert!(d8 > 2.0 * d1, "{d1} {d8}");
    }

    #[test]
    fn outcome_noise_and_reconstruction() {
        let hp: Vec<f64> = normals(&mut crate::rng::stream(1), 100_000).iter().map(|v| 2.0 + v).collect();
        let nu = 0.3;
        let o = gen_outcomes(&hp, nu, 0.5, 9).unwrap();
        let ratio = population_var(&o.eps) / population_var(&hp);
        assert!((ratio / nu - 1.0).abs() < 0.05, "{ratio}");
        for i in 0..hp.len() {
            assert_eq!(o.y[i] - f64::from(o.t[i]) * hp[i], o.eps[i]);
        }
        let y0: Vec<f64> = o.y.iter().zip(&o.t).filter(|(_, t)| **t == 0).map(|(y, _)| *y).collect();
        let bound = 3.0 * (nu * population_var(&hp) / y0.len() as f64).sqrt();
        assert!(mean(&y0).abs() < bound);
        let tiny = gen_outcomes(&hp[..10], 1e-30, 1.0, 2).unwrap();
        for i in 0..10 {
            assert!((tiny.y[i] - hp[i]).abs() < 1e-12);
        }
        assert!(gen_outcomes(&[1.0, 1.0], 0.1, 0.5, 0).is_err());
    }

    #[test]
    fn oracle_ignores_noise() {
        let cfg = small();
        let a = simulate(&cfg, 0.01, 4).unwrap();
        let b = simulate(&cfg, 1.0, 4).unwrap();
        assert_eq!(a.oracle, b.oracle);
        assert_eq!(a.dataset.images, b.dataset.images);
        assert_ne!(a.dataset.y, b.dataset.y);
        let c = oracle_clusters(&[0.0, 0.0, 2.0, 2.0, 2.0], 2, 0).unwrap();
        assert_eq!(c.centers, vec![0.0, 2.0]);
        assert!((mean(&a.h)).abs() < 1e-10 && (population_var(&a.h) - 1.0).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn score_is_permutation_equivariant_and_shift_invariant(seed in 0u64..1000, shift in -2.0f64..2.0, rot in 1usize..7) {
            let dims = ImageDims { height: 8, width: 8, channels: 2 };
            let n = 8;
            let images = synth_images(n, dims, 3, &[1.0; 8], seed).unwrap();
            let f = matched_filter(3, 2);
            let h = heterogeneity_score(&images, dims, &f).unwrap();
            let p = dims.pixels();
            let mut rotated = images[rot * p..].to_vec();
            rotated.extend_from_slice(&images[..rot * p]);
            let hr = heterogeneity_score(&rotated, dims, &f).unwrap();
            for i in 0..n {
                prop_assert!((hr[i] - h[(i + rot) % n]).abs() < 1e-12);
            }
            let shifted: Vec<f64> = images.iter().map(|v| v + shift).collect();
            let hs = heterogeneity_score(&shifted, dims, &f).unwrap();
            for i in 0..n {
                prop_assert!((hs[i] - h[i]).abs() < 1e-9);
            }
        }
    }
}
