//! Variational fitting, posterior summaries, predictive effect draws and
//! budgeted targeting.
//!
//! Fitting runs a deterministic pre-fit at the posterior means, centres
//! empirical-Bayes priors on the result, then maximizes the ELBO by stochastic
//! gradient ascent. The CNN gate is both the generative distribution of the
//! image type and its variational distribution, so only weight and head KL
//! terms appear.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::softplus_inv;
use crate::autodiff::BatchStats;
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::estimands::{diff_in_means_ate, diff_in_means_se};
use crate::models::arm::CnnArmConfig;
use crate::models::image_model::{scale_from_unconstrained, unconstrained_from_scale, ImageModel, ModelConfig, ModelKind};
use crate::models::params::{BnRunning, BnUse, Forward, GaussWeight, ParamStore, Sampling};
use crate::models::tarnet::{TarnetModel, TarnetOutput};
use crate::rng::{derive, derive_seed, normal, tag};
use crate::stats::{mean, population_sd};
use crate::tensor::Tensor;
use crate::variational::{empirical_bayes_priors, GaussianPrior, DEFAULT_TEMPERATURE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Flipout,
    Reparam,
}

impl SamplingMode {
    fn sampling(self) -> Sampling {
        match self {
            Self::Flipout => Sampling::Flipout,
            Self::Reparam => Sampling::Reparam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mc_draws: usize,
    pub temperature: f64,
    /// Variational steps after the pre-fit.
    pub steps: usize,
    /// Deterministic pre-fit steps behind the empirical-Bayes priors.
    pub prefit_steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Fraction of the variational steps over which the KL weight ramps
    /// linearly from 0 to 1; 0 disables the ramp.
    pub kl_warmup: f64,
    pub sampling: SamplingMode,
    /// Differential model only: fraction of the variational steps during which
    /// the effect arms are held at constant outputs (only the output bias
    /// trains). The arms also stay constant through the pre-fit when > 0.
    pub arm_freeze: f64,
    /// Joint posterior draws behind the fit summary.
    pub summary_draws: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            mc_draws: 5,
            temperature: DEFAULT_TEMPERATURE,
            steps: 1000,
            prefit_steps: 200,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            clip_norm: 10.0,
            kl_warmup: 0.2,
            sampling: SamplingMode::Flipout,
            arm_freeze: 0.5,
            summary_draws: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("train config: batch_size must be at least 2"));
        }
        if self.mc_draws == 0 {
            return Err(Error::invalid("train config: mc_draws must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("train config: temperature must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train config: learning_rate must be positive"));
        }
        if !(self.clip_norm >= 0.0) || !(0.0..=1.0).contains(&self.kl_warmup) {
            return Err(Error::invalid("train config: clip_norm must be >= 0 and kl_warmup in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.arm_freeze) {
            return Err(Error::invalid("train config: arm_freeze must be in [0, 1]"));
        }
        if self.summary_draws < 2 {
            return Err(Error::invalid("train config: summary_draws must be at least 2"));
        }
        Ok(())
    }

    /// KL weight at variational step `step` (0-based).
    pub fn kl_weight(&self, step: usize) -> f64 {
        let ramp = self.kl_warmup * self.steps as f64;
        if ramp <= 0.0 {
            1.0
        } else {
            ((step + 1) as f64 / ramp).min(1.0)
        }
    }
}

/// Gradient ascent with optional global-norm clipping.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: f64, store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            kind,
            lr,
            clip,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Moves `store` along the ascent direction `grads`.
    pub fn ascend(&mut self, store: &mut ParamStore, grads: &mut [Vec<f64>]) {
        if self.clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.clip {
                let s = self.clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let w = store.get_mut(i).data_mut();
            match self.kind {
                OptimizerKind::Sgd => w.iter_mut().zip(g).for_each(|(w, g)| *w += self.lr * g),
                OptimizerKind::Adam => {
                    for j in 0..g.len() {
                        self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g[j];
                        self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g[j] * g[j];
                        w[j] += self.lr * (self.m[i][j] / c1) / ((self.v[i][j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn zero_grads(grads: &mut [Vec<f64>], idx: &[usize]) {
    for &i in idx {
        grads[i].iter_mut().for_each(|g| *g = 0.0);
    }
}

/// One ELBO evaluation on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEval {
    /// `loglik - kl_scale * kl`.
    pub elbo: f64,
    /// Mean over draws of the batch log-likelihood sum.
    pub loglik: f64,
    /// Unscaled KL over every variational weight (0 when `kl_scale` is 0).
    pub kl: f64,
    /// Ascent direction per store entry, when requested.
    pub grads: Option<Vec<Vec<f64>>>,
    /// Training batchnorm statistics of every draw, in order.
    pub batch_stats: Vec<Vec<(usize, BatchStats)>>,
}

/// Options for [`elbo`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboOptions {
    pub sampling: Sampling,
    pub mc_draws: usize,
    pub temperature: f64,
    /// Multiplier on the KL sum, `kl_weight * batch / n`; 0 skips the KL.
    pub kl_scale: f64,
    pub seed: u64,
}

/// Monte Carlo ELBO on the units in `batch`; the noise of draw `d` comes from
/// `(seed, d)` so repeated calls see identical draws.
pub fn elbo(model: &ImageModel, ds: &TrialDataset, batch: &[usize], opts: &ElboOptions, want_grad: bool) -> Result<ElboEval> {
    if batch.is_empty() {
        return Err(Error::invalid("elbo: empty batch"));
    }
    if opts.mc_draws == 0 {
        return Err(Error::invalid("elbo: mc_draws must be at least 1"));
    }
    let images = ds.image_batch(batch);
    let tabular = ds.tabular_batch(batch);
    let y: Vec<f64> = batch.iter().map(|&i| ds.y[i]).collect();
    let t: Vec<f64> = batch.iter().map(|&i| f64::from(ds.t[i])).collect();
    let mut grads: Option<Vec<Vec<f64>>> = want_grad.then(|| model.store.values().iter().map(|v| vec![0.0; v.len()]).collect());
    let mut loglik = 0.0;
    let mut batch_stats = Vec::with_capacity(opts.mc_draws);
    let inv = 1.0 / opts.mc_draws as f64;
    for d in 0..opts.mc_draws {
        let rng = derive(opts.seed, &[tag("elbo-draw"), d as u64]);
        let mut f = Forward::new(&model.store, &model.running, opts.sampling, BnUse::Train, want_grad, rng)?;
        let x = f.g.constant(images.clone())?;
        let tab = tabular.clone().map(|v| f.g.constant(v)).transpose()?;
        let out = model.forward_batch(&mut f, x, tab, opts.temperature)?;
        let ll = model.outcome_loglik(&mut f, &y, &t, out.mu0, out.mu_tau, out.z).map_err(|e| match e {
            Error::NonFinite { index, .. } if index < batch.len() => Error::NonFiniteLikelihood { unit: batch[index] },
            other => other,
        })?;
        let total = f.g.sum(ll)?;
        loglik += f.g.value(total).item() * inv;
        if let Some(acc) = grads.as_mut() {
            let scaled = f.g.scale(total, inv)?;
            let g = f.g.backward(scaled)?;
            accumulate(acc, &f, &g, 1.0);
        }
        batch_stats.push(std::mem::take(&mut f.batch_stats));
    }
    let mut kl = 0.0;
    if opts.kl_scale > 0.0 {
        let mut f = Forward::new(
            &model.store,
            &model.running,
            Sampling::Mean,
            BnUse::Train,
            want_grad,
            derive(opts.seed, &[tag("kl")]),
        )?;
        let k = model.kl(&mut f)?;
        kl = f.g.value(k).item();
        if let Some(acc) = grads.as_mut() {
            let g = f.g.backward(k)?;
            accumulate(acc, &f, &g, -opts.kl_scale);
        }
    }
    Ok(ElboEval {
        elbo: loglik - opts.kl_scale * kl,
        loglik,
        kl,
        grads,
        batch_stats,
    })
}

fn accumulate(acc: &mut [Vec<f64>], f: &Forward<'_>, g: &crate::autodiff::Gradients, scale: f64) {
    for (slot, v) in acc.iter_mut().zip(f.vars()) {
        if let Some(gv) = g.get(*v) {
            slot.iter_mut().zip(gv).for_each(|(a, b)| *a += scale * b);
        }
    }
}

fn apply_batch_stats(running: &mut [BnRunning], stats: &[Vec<(usize, BatchStats)>], momentum: f64) {
    for draw in stats {
        for (slot, s) in draw {
            running[*slot].update(s, momentum);
        }
    }
}

/// Shuffled fixed-size batches, reshuffled every epoch; the last partial
/// batch of an epoch is dropped.
pub struct Batcher {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, size: usize, seed: u64) -> Result<Self> {
        if size < 2 || size > n {
            return Err(Error::invalid(format!("batch size {size} must lie in [2, {n}]")));
        }
        Ok(Self {
            n,
            size,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: usize::MAX,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos.saturating_add(self.size) > self.order.len() {
            let mut rng = derive(self.seed, &[tag("epoch"), self.epoch]);
            self.order = (0..self.n).collect();
            for i in (1..self.n).rev() {
                self.order.swap(i, rng.gen_range(0..=i));
            }
            self.epoch += 1;
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefit,
    Vi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub phase: Phase,
    pub elbo: f64,
    pub loglik: f64,
    pub kl: f64,
}

/// Fitted variational posterior with its training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub model: ImageModel,
    pub train: TrainConfig,
    pub trace: Vec<TraceRow>,
    pub n_train: usize,
}

fn outcome_scale(ds: &TrialDataset) -> f64 {
    population_sd(&ds.y).max(1e-3)
}

/// Initial head values: effect means spread symmetrically around the
/// difference-in-means ATE to break label symmetry, outcome scales at the
/// outcome sd.
/// The differential model's effect arms start from the same spread through
/// their output biases.
fn init_heads(model: &mut ImageModel, ate: f64, sd_y: f64) {
    let k = model.k();
    let spread: Vec<f64> = (0..k)
        .map(|z| {
            if k == 1 {
                ate
            } else {
                ate + 0.5 * sd_y * (2.0 * z as f64 / (k - 1) as f64 - 1.0)
            }
        })
        .collect();
    if let (Some(mu), Some(u)) = (model.heads.mu_tau, model.heads.u_tau) {
        *model.store.get_mut(mu.mean) = Tensor::vector(spread.clone());
        *model.store.get_mut(u.mean) = Tensor::full(&[k], unconstrained_from_scale(0.1 * sd_y));
    }
    let biases: Vec<usize> = model.effect_arms().iter().map(|a| a.out_bias.mean).collect();
    if biases.len() == 1 && k > 1 {
        *model.store.get_mut(biases[0]) = Tensor::vector(spread);
    } else {
        for (b, s) in biases.into_iter().zip(spread) {
            *model.store.get_mut(b) = Tensor::vector(vec![s]);
        }
    }
    for w in [model.heads.u_sig0, model.heads.u_sig1] {
        *model.store.get_mut(w.mean) = Tensor::full(&[k], unconstrained_from_scale(sd_y));
    }
}

/// Empirical-Bayes priors on the arm weights, head priors centred on the ATE
/// and outcome scale, and posterior scales reset to a tenth of the prior's.
fn set_priors(model: &mut ImageModel, ate: f64, sd_y: f64) -> Result<()> {
    let arm: Vec<GaussWeight> = model.arm_weights().to_vec();
    let mut priors = empirical_bayes_priors(arm.iter().map(|w| model.store.get(w.mean)))?;
    let k = model.k();
    let scale_prior = || GaussianPrior::isotropic(k, softplus_inv(sd_y), 1.0);
    if model.heads.mu_tau.is_some() {
        priors.push(GaussianPrior::isotropic(k, ate, sd_y)?);
        priors.push(scale_prior()?);
    }
    priors.push(scale_prior()?);
    priors.push(scale_prior()?);
    debug_assert_eq!(priors.len(), model.weights().len());
    for (w, p) in model.weights().to_vec().iter().zip(&priors) {
        let rho: Vec<f64> = p.sigma.iter().map(|s| softplus_inv(0.1 * s)).collect();
        *model.store.get_mut(w.rho) = Tensor::new(model.store.get(w.rho).shape().to_vec(), rho)?;
    }
    model.priors = priors;
    Ok(())
}

/// Full fitting pipeline: pre-fit, priors, variational optimization.
pub fn fit(ds: &TrialDataset, model_config: &ModelConfig, train: &TrainConfig) -> Result<Posterior> {
    train.validate()?;
    ds.require_both_arms()?;
    let mut model = ImageModel::new(model_config.clone(), ds.input_dims(), derive_seed(train.seed, &[tag("model")]))?;
    let ate = diff_in_means_ate(&ds.y, &ds.t)?;
    let sd_y = outcome_scale(ds);
    init_heads(&mut model, ate, sd_y);
    // Effect-arm store entries held fixed early on; the gate learns the split
    // against constant per-type effects before the arms add image dependence.
    let mut frozen: Vec<usize> = Vec::new();
    if train.arm_freeze > 0.0 {
        for arm in model.effect_arms().to_vec() {
            for w in arm.weights() {
                if w.mean != arm.out_bias.mean {
                    frozen.push(w.mean);
                    frozen.push(w.rho);
                }
            }
            let len = model.store.get(arm.out_weight.mean).len();
            let shape = model.store.get(arm.out_weight.mean).shape().to_vec();
            *model.store.get_mut(arm.out_weight.mean) = Tensor::new(shape, vec![0.0; len])?;
        }
    }
    let freeze_steps = (train.arm_freeze * train.steps as f64) as usize;
    let n = ds.len();
    let momentum = model.config.arm.bn_momentum;
    let mut trace = Vec::with_capacity(train.prefit_steps + train.steps);
    let mut batches = Batcher::new(n, train.batch_size, derive_seed(train.seed, &[tag("prefit-batches")]))?;
    let mut opt = Optimizer::new(train.optimizer, train.learning_rate, train.clip_norm, &model.store);
    for step in 0..train.prefit_steps {
        let batch = batches.next_batch();
        let opts = ElboOptions {
            sampling: Sampling::Mean,
            mc_draws: 1,
            temperature: train.temperature,
            kl_scale: 0.0,
            seed: derive_seed(train.seed, &[tag("prefit"), step as u64]),
        };
        let mut e = elbo(&model, ds, &batch, &opts, true)?;
        zero_grads(e.grads.as_mut().expect("grads"), &frozen);
        opt.ascend(&mut model.store, e.grads.as_mut().expect("grads"));
        apply_batch_stats(&mut model.running, &e.batch_stats, momentum);
        trace.push(TraceRow {
            step,
            phase: Phase::Prefit,
            elbo: e.elbo,
            loglik: e.loglik,
            kl: 0.0,
        });
    }
    set_priors(&mut model, ate, sd_y)?;
    let mut batches = Batcher::new(n, train.batch_size, derive_seed(train.seed, &[tag("vi-batches")]))?;
    let mut opt = Optimizer::new(train.optimizer, train.learning_rate, train.clip_norm, &model.store);
    let frac = train.batch_size as f64 / n as f64;
    for step in 0..train.steps {
        let batch = batches.next_batch();
        let opts = ElboOptions {
            sampling: train.sampling.sampling(),
            mc_draws: train.mc_draws,
            temperature: train.temperature,
            kl_scale: train.kl_weight(step) * frac,
            seed: derive_seed(train.seed, &[tag("vi"), step as u64]),
        };
        let mut e = elbo(&model, ds, &batch, &opts, true)?;
        if step < freeze_steps {
            zero_grads(e.grads.as_mut().expect("grads"), &frozen);
        }
        opt.ascend(&mut model.store, e.grads.as_mut().expect("grads"));
        apply_batch_stats(&mut model.running, &e.batch_stats, momentum);
        trace.push(TraceRow {
            step: train.prefit_steps + step,
            phase: Phase::Vi,
            elbo: e.elbo,
            loglik: e.loglik,
            kl: e.kl,
        });
    }
    Ok(Posterior {
        model,
        train: train.clone(),
        trace,
        n_train: n,
    })
}

/// Posterior means of the head scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeans {
    pub mu_tau: Option<Vec<f64>>,
    pub sigma_tau: Option<Vec<f64>>,
    pub sigma0: Vec<f64>,
    pub sigma1: Vec<f64>,
}

pub fn head_means(model: &ImageModel) -> HeadMeans {
    let scales = |w: GaussWeight| model.store.get(w.mean).data().iter().map(|u| scale_from_unconstrained(*u)).collect::<Vec<_>>();
    HeadMeans {
        mu_tau: model.heads.mu_tau.map(|w| model.store.get(w.mean).data().to_vec()),
        sigma_tau: model.heads.u_tau.map(scales),
        sigma0: scales(model.heads.u_sig0),
        sigma1: scales(model.heads.u_sig1),
    }
}

/// Draws of one image under the posterior predictive.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDraws {
    pub k: usize,
    /// `draws x K` cluster probabilities.
    pub probs: Vec<f64>,
    /// Sampled image types.
    pub z: Vec<usize>,
    /// Effect-mean draws `mu_{tau_i}`.
    pub tau_effect: Vec<f64>,
    /// Unit-effect draws `Y(1) - Y(0)`.
    pub tau_unit: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveMode {
    EffectMean,
    UnitEffect,
}

impl std::str::FromStr for PredictiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "effect_mean" => Ok(Self::EffectMean),
            "unit_effect" => Ok(Self::UnitEffect),
            other => Err(Error::invalid(format!(
                "unknown predictive mode {other:?} (expected effect_mean or unit_effect)"
            ))),
        }
    }
}

fn sample_categorical(p: &[f64], rng: &mut crate::rng::Stream) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (z, pz) in p.iter().enumerate() {
        acc += pz;
        if u < acc {
            return z;
        }
    }
    p.len() - 1
}

/// One draw of the effect mean `mu_{tau_i} ~ N(mu, sigma_tau^2)` and of
/// `Y(1) - Y(0)` with both potential outcomes sampled around it; the baseline
/// mean cancels in the difference.
fn sample_effects(rng: &mut crate::rng::Stream, mu: f64, sigma_tau: f64, sigma0: f64, sigma1: f64) -> (f64, f64) {
    let effect = mu + sigma_tau * normal(rng);
    let y0 = sigma0 * normal(rng);
    let y1 = effect + sigma1 * normal(rng);
    (effect, y1 - y0)
}

/// `n` draws of `Y(1) - Y(0)` for one image type with fixed head values.
pub fn unit_effect_draws(mu: f64, sigma_tau: f64, sigma0: f64, sigma1: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = derive(seed, &[tag("unit-effect")]);
    (0..n).map(|_| sample_effects(&mut rng, mu, sigma_tau, sigma0, sigma1).1).collect()
}

/// Posterior predictive draws for one image `[H, W, C]`. Each draw samples
/// every weight from q (batchnorm at running statistics), computes the
/// cluster probabilities, samples `z` from them and then the effect.
pub fn score_image(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, draws: usize, seed: u64) -> Result<ImageDraws> {
    if draws == 0 {
        return Err(Error::invalid("score_image: draws must be at least 1"));
    }
    let dims = model.dims;
    let k = model.k();
    let x_t = Tensor::new(vec![1, dims.height, dims.width, dims.channels], image.to_vec())
        .map_err(|_| Error::shape("score_image", "image values", dims.height * dims.width * dims.channels, image.len()))?;
    let tab_t = tabular.map(|t| Tensor::new(vec![1, t.len()], t.to_vec())).transpose()?;
    let mut out = ImageDraws {
        k,
        probs: Vec::with_capacity(draws * k),
        z: Vec::with_capacity(draws),
        tau_effect: Vec::with_capacity(draws),
        tau_unit: Vec::with_capacity(draws),
    };
    for d in 0..draws {
        let rng = derive(seed, &[d as u64]);
        let mut f = Forward::new(&model.store, &model.running, Sampling::Reparam, BnUse::Eval, false, rng)?;
        let x = f.g.constant(x_t.clone())?;
        let tab = tab_t.clone().map(|v| f.g.constant(v)).transpose()?;
        let probs = model.image_type_probs(&mut f, x, tab)?;
        let p = f.g.value(probs).data().to_vec();
        let (v0, v1) = model.outcome_variances(&mut f)?;
        let (v0, v1) = (f.g.value(v0).data().to_vec(), f.g.value(v1).data().to_vec());
        let (mean_z, var_tau) = match model.kind() {
            ModelKind::Cluster => {
                let mu = f.sample(model.heads.mu_tau.expect("cluster heads"))?;
                let u = f.sample(model.heads.u_tau.expect("cluster heads"))?;
                let mu = f.g.value(mu).data().to_vec();
                let sig: Vec<f64> = f.g.value(u).data().iter().map(|u| scale_from_unconstrained(*u)).collect();
                (mu, sig.iter().map(|s| s * s).collect::<Vec<_>>())
            }
            ModelKind::Differential => {
                let arms = model.arm_effects(&mut f, x, tab)?;
                (f.g.value(arms).data().to_vec(), vec![0.0; k])
            }
        };
        let z = sample_categorical(&p, &mut f.rng);
        let (effect, unit) = sample_effects(&mut f.rng, mean_z[z], var_tau[z].sqrt(), v0[z].sqrt(), v1[z].sqrt());
        out.probs.extend_from_slice(&p);
        out.z.push(z);
        out.tau_effect.push(effect);
        out.tau_unit.push(unit);
    }
    Ok(out)
}

/// Thread pool for scoring, capped by `HETFX_THREADS` when set.
pub fn scoring_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HETFX_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::invalid(format!("HETFX_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Scores every image of `images` (flat `[n, H, W, C]`) with per-image
/// streams `(seed, index)`; results come back in input order.
pub fn score_images(model: &ImageModel, images: &[f64], tabular: Option<&[f64]>, draws: usize, seed: u64) -> Result<Vec<ImageDraws>> {
    let p = model.dims.height * model.dims.width * model.dims.channels;
    let d = model.dims.tabular;
    if images.len() % p != 0 {
        return Err(Error::shape("score_images", "image values", p, images.len() % p));
    }
    let n = images.len() / p;
    if let Some(t) = tabular {
        if t.len() != n * d {
            return Err(Error::shape("score_images", "tabular values", n * d, t.len()));
        }
    }
    let pool = scoring_pool()?;
    pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                score_image(
                    model,
                    &images[i * p..(i + 1) * p],
                    tabular.map(|t| &t[i * d..(i + 1) * d]),
                    draws,
                    derive_seed(seed, &[i as u64]),
                )
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ImageDraws {
    /// Monte Carlo mean and population sd of each cluster probability.
    pub fn cluster_summary(&self) -> ClusterSummary {
        let k = self.k;
        let cols: Vec<Vec<f64>> = (0..k).map(|z| self.probs.iter().skip(z).step_by(k).copied().collect()).collect();
        ClusterSummary {
            mean: cols.iter().map(|c| mean(c)).collect(),
            sd: cols.iter().map(|c| population_sd(c)).collect(),
        }
    }

    pub fn tau(&self, mode: PredictiveMode) -> &[f64] {
        match mode {
            PredictiveMode::EffectMean => &self.tau_effect,
            PredictiveMode::UnitEffect => &self.tau_unit,
        }
    }
}

/// Mean and sd of the cluster probabilities over `draws` posterior draws.
pub fn posterior_cluster_summary(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, draws: usize, seed: u64) -> Result<ClusterSummary> {
    if draws < 2 {
        return Err(Error::invalid("posterior_cluster_summary: draws must be at least 2"));
    }
    Ok(score_image(model, image, tabular, draws, seed)?.cluster_summary())
}

/// Predictive effect draws for one image.
pub fn predictive_tau(model: &ImageModel, image: &[f64], tabular: Option<&[f64]>, draws: usize, mode: PredictiveMode, seed: u64) -> Result<Vec<f64>> {
    Ok(score_image(model, image, tabular, draws, seed)?.tau(mode).to_vec())
}

/// Treat the `budget` units with the largest predicted mean effects; ties go
/// to the lower index.
pub fn target_policy(predicted_means: &[f64], budget: usize) -> Result<Vec<u8>> {
    if budget > predicted_means.len() {
        return Err(Error::invalid(format!(
            "target_policy: budget {budget} exceeds the {} out-of-sample units",
            predicted_means.len()
        )));
    }
    if let Some(i) = predicted_means.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "target_policy", index: i });
    }
    let mut order: Vec<usize> = (0..predicted_means.len()).collect();
    order.sort_by(|&a, &b| predicted_means[b].total_cmp(&predicted_means[a]).then(a.cmp(&b)));
    let mut out = vec![0u8; predicted_means.len()];
    for &i in &order[..budget] {
        out[i] = 1;
    }
    Ok(out)
}

/// Fit-level summary over the training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub kind: ModelKind,
    pub k: usize,
    /// Image-type effects `tau_hat(z)`.
    pub tau_hat: Vec<f64>,
    pub sigma_tau: Option<Vec<f64>>,
    pub sigma0: Vec<f64>,
    pub sigma1: Vec<f64>,
    /// Closed-form variance of `Y(1) - Y(0)` given `z`.
    pub effect_var: Vec<f64>,
    /// Mean posterior cluster probability over the training images.
    pub marginal_probs: Vec<f64>,
    /// `sum_z tau_hat(z) * marginal_probs(z)`.
    pub implied_ate: f64,
    /// Posterior sd of the implied ATE over joint weight draws.
    pub implied_ate_sd: f64,
    pub dim_ate: f64,
    pub dim_se: f64,
    pub elbo_final: f64,
    pub draws: usize,
}

const SUMMARY_CHUNK: usize = 100;

/// Probabilities `[n, K]` and (differential only) arm outputs `[n, K]` from
/// one joint weight draw shared by every image.
fn joint_draw(model: &ImageModel, ds: &TrialDataset, seed: u64) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let n = ds.len();
    let mut probs = Vec::with_capacity(n * model.k());
    let mut arms = (model.kind() == ModelKind::Differential).then(Vec::new);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(SUMMARY_CHUNK) {
        // Reseeding per chunk replays the same weight noise.
        let mut f = Forward::new(
            &model.store,
            &model.running,
            Sampling::Reparam,
            BnUse::Eval,
            false,
            derive(seed, &[tag("joint")]),
        )?;
        let x = f.g.constant(ds.image_batch(chunk))?;
        let tab = ds.tabular_batch(chunk).map(|v| f.g.constant(v)).transpose()?;
        let p = model.image_type_probs(&mut f, x, tab)?;
        probs.extend_from_slice(f.g.value(p).data());
        if let Some(a) = arms.as_mut() {
            let out = model.arm_effects(&mut f, x, tab)?;
            a.extend_from_slice(f.g.value(out).data());
        }
    }
    Ok((probs, arms))
}

/// Effect-cluster estimates, marginal cluster probabilities and the implied
/// ATE with its posterior sd.
pub fn summarize(post: &Posterior, ds: &TrialDataset, draws: usize, seed: u64) -> Result<FitSummary> {
    if draws < 2 {
        return Err(Error::invalid("summarize: draws must be at least 2"));
    }
    let model = &post.model;
    let (n, k) = (ds.len(), model.k());
    let heads = head_means(model);
    let mut prob_sum = vec![0.0; n * k];
    let mut arm_sum = vec![0.0; n * k];
    let mut ate_draws = Vec::with_capacity(draws);
    for d in 0..draws {
        let s = derive_seed(seed, &[d as u64]);
        let (probs, arms) = joint_draw(model, ds, s)?;
        prob_sum.iter_mut().zip(&probs).for_each(|(a, b)| *a += b);
        let effects: Vec<f64> = match &arms {
            Some(a) => {
                arm_sum.iter_mut().zip(a).for_each(|(s, v)| *s += v);
                a.clone()
            }
            None => {
                let (m, sd) = model.head_posterior(model.heads.mu_tau.expect("cluster heads"));
                let mut rng = derive(s, &[tag("heads")]);
                let mu: Vec<f64> = m.iter().zip(&sd).map(|(m, s)| m + s * normal(&mut rng)).collect();
                (0..n).flat_map(|_| mu.iter().copied()).collect()
            }
        };
        ate_draws.push(probs.iter().zip(&effects).map(|(p, e)| p * e).sum::<f64>() / n as f64);
    }
    let pbar: Vec<f64> = prob_sum.iter().map(|v| v / draws as f64).collect();
    let marginal: Vec<f64> = (0..k).map(|z| pbar.iter().skip(z).step_by(k).sum::<f64>() / n as f64).collect();
    let tau_hat: Vec<f64> = match &heads.mu_tau {
        Some(mu) => mu.clone(),
        None => (0..k)
            .map(|z| {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..n {
                    num += pbar[i * k + z] * arm_sum[i * k + z] / draws as f64;
                    den += pbar[i * k + z];
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let sigma_tau_sq = heads.sigma_tau.as_ref().map_or(vec![0.0; k], |s| s.iter().map(|v| v * v).collect());
    let effect_var = (0..k).map(|z| heads.sigma0[z].powi(2) + heads.sigma1[z].powi(2) + sigma_tau_sq[z]).collect();
    let implied_ate = tau_hat.iter().zip(&marginal).map(|(t, p)| t * p).sum();
    Ok(FitSummary {
        kind: model.kind(),
        k,
        tau_hat,
        sigma_tau: heads.sigma_tau,
        sigma0: heads.sigma0,
        sigma1: heads.sigma1,
        effect_var,
        marginal_probs: marginal,
        implied_ate,
        implied_ate_sd: population_sd(&ate_draws),
        dim_ate: diff_in_means_ate(&ds.y, &ds.t)?,
        dim_se: diff_in_means_se(&ds.y, &ds.t)?,
        elbo_final: post.trace.last().map_or(f64::NAN, |r| r.elbo),
        draws,
    })
}

/// TARNet fit: the trunk trained by mean squared error on the observed arm's
/// head at its posterior means.
#[derive(Clone, Debug, PartialEq)]
pub struct TarnetFit {
    pub model: TarnetModel,
    /// Batch MSE per step.
    pub trace: Vec<f64>,
}

/// Trains for `prefit_steps + steps` steps so the baseline sees the same
/// optimization budget as the probabilistic models.
pub fn fit_tarnet(ds: &TrialDataset, arm: &CnnArmConfig, train: &TrainConfig) -> Result<TarnetFit> {
    train.validate()?;
    ds.require_both_arms()?;
    let mut model = TarnetModel::new(arm.clone(), ds.input_dims(), derive_seed(train.seed, &[tag("tarnet")]))?;
    let mut batches = Batcher::new(ds.len(), train.batch_size, derive_seed(train.seed, &[tag("tarnet-batches")]))?;
    let mut opt = Optimizer::new(train.optimizer, train.learning_rate, train.clip_norm, &model.store);
    let total = train.prefit_steps + train.steps;
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        let batch = batches.next_batch();
        let b = batch.len();
        let mut f = Forward::new(
            &model.store,
            &model.running,
            Sampling::Mean,
            BnUse::Train,
            true,
            derive(train.seed, &[tag("tarnet-step"), step as u64]),
        )?;
        let x = f.g.constant(ds.image_batch(&batch))?;
        let tab = ds.tabular_batch(&batch).map(|v| f.g.constant(v)).transpose()?;
        let out = model.forward(&mut f, x, tab)?;
        let mask: Vec<f64> = batch.iter().flat_map(|&i| if ds.t[i] == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
        let picked = f.g.mul_const(out, &Tensor::new(vec![b, 2], mask)?)?;
        let pred = f.g.sum_last(picked)?;
        let neg = f.g.scale(pred, -1.0)?;
        let resid = f.g.add_const(neg, &Tensor::vector(batch.iter().map(|&i| ds.y[i]).collect()))?;
        let sq = f.g.square(resid)?;
        let sse = f.g.sum(sq)?;
        let objective = f.g.scale(sse, -1.0 / b as f64)?;
        trace.push(-f.g.value(objective).item());
        let g = f.g.backward(objective)?;
        let mut grads: Vec<Vec<f64>> = model.store.values().iter().map(|v| vec![0.0; v.len()]).collect();
        accumulate(&mut grads, &f, &g, 1.0);
        let stats = std::mem::take(&mut f.batch_stats);
        drop(f);
        opt.ascend(&mut model.store, &mut grads);
        for (slot, s) in stats {
            model.running[slot].update(&s, arm.bn_momentum);
        }
    }
    Ok(TarnetFit { model, trace })
}

/// Deterministic TARNet predictions (running batchnorm statistics).
pub fn tarnet_predict(model: &TarnetModel, ds: &TrialDataset) -> Result<TarnetOutput> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut values = Vec::with_capacity(2 * ds.len());
    for chunk in idx.chunks(SUMMARY_CHUNK) {
        let mut f = Forward::new(&model.store, &model.running, Sampling::Mean, BnUse::Eval, false, derive(0, &[]))?;
        let x = f.g.constant(ds.image_batch(chunk))?;
        let tab = ds.tabular_batch(chunk).map(|v| f.g.constant(v)).transpose()?;
        let out = model.forward(&mut f, x, tab)?;
        values.extend_from_slice(f.g.value(out).data());
    }
    Ok(TarnetModel::split(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageDims;
    use crate::models::arm::InputDims;
    use crate::rng::{normals, stream};

    fn arm() -> CnnArmConfig {
        CnnArmConfig {
            conv_layers: 1,
            filter_size: 3,
            filters_per_layer: 2,
            head_dims: vec![4, 1],
            ..CnnArmConfig::default()
        }
    }

    fn config(kind: ModelKind, k: usize) -> ModelConfig {
        ModelConfig {
            kind,
            k,
            arm: arm(),
            shared_effect_trunk: false,
        }
    }

    /// `n` random 6x6 single-channel images; the effect is 1 + 2 * [bright].
    fn toy(n: usize, noise: f64, seed: u64) -> TrialDataset {
        let mut rng = stream(seed);
        let dims = ImageDims {
            height: 6,
            width: 6,
            channels: 1,
        };
        let mut images = Vec::with_capacity(n * 36);
        let (mut y, mut t) = (Vec::new(), Vec::new());
        for i in 0..n {
            let bright = i % 2 == 0;
            let base = if bright { 0.8 } else { 0.2 };
            images.extend(normals(&mut rng, 36).into_iter().map(|e| base + 0.05 * e));
            let ti = u8::from(rng.gen::<f64>() < 0.5);
            let tau = if bright { 3.0 } else { 1.0 };
            y.push(f64::from(ti) * tau + noise * normal(&mut rng));
            t.push(ti);
        }
        TrialDataset::new(dims, images, y, t, None).unwrap()
    }

    fn model(kind: ModelKind, k: usize, seed: u64) -> ImageModel {
        let dims = InputDims {
            height: 6,
            width: 6,
            channels: 1,
            tabular: 0,
        };
        ImageModel::new(config(kind, k), dims, seed).unwrap()
    }

    fn set(m: &mut ImageModel, i: usize, values: Vec<f64>) {
        let shape = m.store.get(i).shape().to_vec();
        *m.store.get_mut(i) = Tensor::new(shape, values).unwrap();
    }

    /// Every variational sigma driven to zero.
    fn point_mass(m: &mut ImageModel) {
        for w in m.weights().to_vec() {
            let len = m.store.get(w.rho).len();
            set(m, w.rho, vec![-1000.0; len]);
        }
    }

    fn set_heads(m: &mut ImageModel, mu: &[f64], sigma_tau: f64, sigma0: f64, sigma1: f64) {
        let k = mu.len();
        set(m, m.heads.mu_tau.unwrap().mean, mu.to_vec());
        set(m, m.heads.u_tau.unwrap().mean, vec![unconstrained_from_scale(sigma_tau); k]);
        set(m, m.heads.u_sig0.mean, vec![unconstrained_from_scale(sigma0); k]);
        set(m, m.heads.u_sig1.mean, vec![unconstrained_from_scale(sigma1); k]);
    }

    /// Gate outputs equal logits for every image.
    fn flat_gate(m: &mut ImageModel) {
        let gate = m.gate().unwrap().clone();
        let (w, b) = (gate.out_weight.mean, gate.out_bias.mean);
        let (lw, lb) = (m.store.get(w).len(), m.store.get(b).len());
        set(m, w, vec![0.0; lw]);
        set(m, b, vec![0.0; lb]);
    }

    fn fd_check(kind: ModelKind, sampling: Sampling) {
        let ds = toy(8, 0.3, 1);
        let mut m = model(kind, 2, 3);
        init_heads(&mut m, 2.0, 1.0);
        let batch: Vec<usize> = (0..8).collect();
        let opts = ElboOptions {
            sampling,
            mc_draws: 2,
            temperature: 0.5,
            kl_scale: 0.3,
            seed: 11,
        };
        let base = elbo(&m, &ds, &batch, &opts, true).unwrap();
        let grads = base.grads.unwrap();
        // Small enough that no maxpool argmax switches inside the stencil.
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..m.store.len() {
            let len = m.store.get(i).len();
            for j in [0, len / 2, len - 1] {
                let orig = m.store.get(i).data()[j];
                m.store.get_mut(i).data_mut()[j] = orig + h;
                let up = elbo(&m, &ds, &batch, &opts, false).unwrap().elbo;
                m.store.get_mut(i).data_mut()[j] = orig - h;
                let down = elbo(&m, &ds, &batch, &opts, false).unwrap().elbo;
                m.store.get_mut(i).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads[i][j];
                // The floor keeps stencil roundoff (~1e-8 here) out of tiny entries.
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{} [{j}]: analytic {g} vs fd {fd}", m.store.name(i));
            }
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        fd_check(ModelKind::Cluster, Sampling::Reparam);
        fd_check(ModelKind::Cluster, Sampling::Flipout);
        fd_check(ModelKind::Differential, Sampling::Reparam);
    }

    #[test]
    fn kl_weight_ramps_linearly() {
        let c = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert!((c.kl_weight(0) - 0.05).abs() < 1e-12);
        assert!((c.kl_weight(9) - 0.5).abs() < 1e-12);
        assert_eq!(c.kl_weight(19), 1.0);
        assert_eq!(c.kl_weight(99), 1.0);
        let off = TrainConfig { kl_warmup: 0.0, ..c };
        assert_eq!(off.kl_weight(0), 1.0);
    }

    #[test]
    fn point_mass_fit_reaches_likelihood_ceiling() {
        let mut ds = toy(10, 0.0, 2);
        let mut m = model(ModelKind::Cluster, 1, 4);
        point_mass(&mut m);
        let sigma = 0.01;
        set_heads(&mut m, &[1.5], 0.1, sigma, sigma);
        let u = m.heads.u_tau.unwrap().mean;
        set(&mut m, u, vec![-1000.0]);
        let base = m.baseline().clone();
        let lw = m.store.get(base.out_weight.mean).len();
        set(&mut m, base.out_weight.mean, vec![0.0; lw]);
        set(&mut m, base.out_bias.mean, vec![0.25]);
        ds.y = ds.t.iter().map(|&t| 0.25 + 1.5 * f64::from(t)).collect();
        let opts = ElboOptions {
            sampling: Sampling::Reparam,
            mc_draws: 3,
            temperature: 0.5,
            kl_scale: 0.0,
            seed: 0,
        };
        let e = elbo(&m, &ds, &(0..10).collect::<Vec<_>>(), &opts, false).unwrap();
        // sigma_tau sits at its floor, so treated units keep a 1e-4 jitter.
        let ceiling = -5.0 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert!(e.elbo <= ceiling + 1e-9 && ceiling - e.elbo < 1e-3, "{} vs {ceiling}", e.elbo);
    }

    #[test]
    fn extra_kl_only_lowers_elbo() {
        let ds = toy(8, 0.3, 5);
        let mut m = model(ModelKind::Cluster, 2, 6);
        init_heads(&mut m, 2.0, 1.0);
        let batch: Vec<usize> = (0..8).collect();
        let mut opts = ElboOptions {
            sampling: Sampling::Reparam,
            mc_draws: 2,
            temperature: 0.5,
            kl_scale: 0.0,
            seed: 3,
        };
        let without = elbo(&m, &ds, &batch, &opts, false).unwrap();
        opts.kl_scale = 0.5;
        let with = elbo(&m, &ds, &batch, &opts, false).unwrap();
        assert!(with.kl >= 0.0);
        assert!(with.elbo <= without.elbo);
        assert_eq!(with.loglik, without.loglik);
    }

    #[test]
    fn single_batch_overfit_raises_elbo() {
        let ds = toy(20, 0.2, 7);
        let batch: Vec<usize> = (0..20).collect();
        let mut improved = 0;
        let runs = 100;
        for seed in 0..runs {
            let mut m = model(ModelKind::Cluster, 2, seed);
            init_heads(&mut m, diff_in_means_ate(&ds.y, &ds.t).unwrap(), outcome_scale(&ds));
            let eval = ElboOptions {
                sampling: Sampling::Reparam,
                mc_draws: 4,
                temperature: 0.5,
                kl_scale: 1.0,
                seed: 1_000 + seed,
            };
            let before = elbo(&m, &ds, &batch, &eval, false).unwrap().elbo;
            let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 10.0, &m.store);
            for step in 0..200 {
                let opts = ElboOptions {
                    mc_draws: 1,
                    seed: derive_seed(seed, &[step]),
                    ..eval
                };
                let mut e = elbo(&m, &ds, &batch, &opts, true).unwrap();
                opt.ascend(&mut m.store, e.grads.as_mut().unwrap());
                apply_batch_stats(&mut m.running, &e.batch_stats, 0.9);
            }
            let after = elbo(&m, &ds, &batch, &eval, false).unwrap().elbo;
            assert!(after.is_finite());
            improved += usize::from(after > before);
        }
        assert!(improved >= 95, "{improved}/{runs}");
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            mc_draws: 1,
            steps: 60,
            prefit_steps: 30,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            sampling: SamplingMode::Reparam,
            summary_draws: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = toy(30, 0.3, 8);
        let a = fit(&ds, &config(ModelKind::Cluster, 2), &quick_train()).unwrap();
        let b = fit(&ds, &config(ModelKind::Cluster, 2), &quick_train()).unwrap();
        let bits = |p: &Posterior| p.trace.iter().map(|r| (r.elbo.to_bits(), r.kl.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.trace.len(), 90);
        assert!(a.trace.iter().all(|r| r.elbo.is_finite()));
    }

    #[test]
    fn frozen_arms_keep_constant_outputs() {
        let ds = toy(30, 0.3, 8);
        let cfg = config(ModelKind::Differential, 2);
        let fresh = ImageModel::new(cfg.clone(), ds.input_dims(), derive_seed(5, &[tag("model")])).unwrap();
        let train = TrainConfig {
            steps: 20,
            prefit_steps: 10,
            arm_freeze: 1.0,
            ..quick_train()
        };
        let post = fit(&ds, &cfg, &train).unwrap();
        for (arm, arm0) in post.model.effect_arms().iter().zip(fresh.effect_arms()) {
            assert!(post.model.store.get(arm.out_weight.mean).data().iter().all(|&w| w == 0.0));
            let w = arm.weights()[0].mean;
            assert_eq!(post.model.store.get(w), fresh.store.get(arm0.weights()[0].mean));
            assert_ne!(post.model.store.get(arm.out_bias.mean), fresh.store.get(arm0.out_bias.mean));
        }
    }

    #[test]
    fn fit_rejects_single_arm_data() {
        let mut ds = toy(12, 0.3, 9);
        ds.t = vec![1; 12];
        assert!(matches!(fit(&ds, &config(ModelKind::Cluster, 2), &quick_train()), Err(Error::EmptyArm(_))));
    }

    #[test]
    fn homogeneous_model_recovers_ate() {
        let mut ds = toy(200, 0.5, 10);
        let mut rng = stream(3);
        ds.y = ds.t.iter().map(|&t| 2.0 * f64::from(t) + 0.5 * normal(&mut rng)).collect();
        let train = TrainConfig { steps: 150, ..quick_train() };
        let post = fit(&ds, &config(ModelKind::Cluster, 1), &train).unwrap();
        let s = summarize(&post, &ds, 4, 1).unwrap();
        assert_eq!(s.marginal_probs, vec![1.0]);
        assert!(
            (s.implied_ate - s.dim_ate).abs() < 2.0 * s.dim_se,
            "{} vs {} (se {})",
            s.implied_ate,
            s.dim_ate,
            s.dim_se
        );
    }

    fn probe() -> Vec<f64> {
        vec![0.5; 36]
    }

    #[test]
    fn point_mass_effect_draws_are_constant() {
        let mut m = model(ModelKind::Cluster, 1, 12);
        point_mass(&mut m);
        set_heads(&mut m, &[1.25], 0.3, 0.5, 0.7);
        let u = m.heads.u_tau.unwrap().mean;
        set(&mut m, u, vec![-1000.0]);
        let d = score_image(&m, &probe(), None, 50, 1).unwrap();
        assert!(d.tau_effect.iter().all(|v| (v - 1.25).abs() < 1e-3));
        let s = posterior_cluster_summary(&m, &probe(), None, 10, 2).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.sd, vec![0.0]);
    }

    #[test]
    fn unit_effect_variance_decomposes() {
        let mut m = model(ModelKind::Cluster, 1, 13);
        point_mass(&mut m);
        set_heads(&mut m, &[1.0], 0.3, 0.5, 0.7);
        let h = head_means(&m);
        let want = h.sigma_tau.unwrap()[0].powi(2) + h.sigma0[0].powi(2) + h.sigma1[0].powi(2);
        let draws = predictive_tau(&m, &probe(), None, 200_000, PredictiveMode::UnitEffect, 4).unwrap();
        let var = population_sd(&draws).powi(2);
        assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
        assert!((mean(&draws) - 1.0).abs() < 0.01);
        let fast = unit_effect_draws(1.0, 0.3, 0.5, 0.7, 1_000_000, 9);
        assert!((population_sd(&fast).powi(2) / 0.83 - 1.0).abs() < 0.02);
        assert!((mean(&fast) - 1.0).abs() < 0.005);
    }

    #[test]
    fn two_point_masses_give_bimodal_draws() {
        let mut m = model(ModelKind::Cluster, 2, 14);
        point_mass(&mut m);
        flat_gate(&mut m);
        set_heads(&mut m, &[0.0, 2.0], 0.01, 0.5, 0.5);
        let d = score_image(&m, &probe(), None, 4000, 3).unwrap();
        let s = d.cluster_summary();
        assert!((s.mean[0] - 0.5).abs() < 1e-12 && s.sd[0] == 0.0);
        let low = d.tau_effect.iter().filter(|v| v.abs() < 0.1).count();
        let high = d.tau_effect.iter().filter(|v| (*v - 2.0).abs() < 0.1).count();
        assert_eq!(low + high, 4000);
        assert!((low as f64 / 4000.0 - 0.5).abs() < 0.05, "{low}");
        let dip = crate::stats::dip_test(&d.tau_effect, 200, 1).unwrap();
        assert!(dip.p_value < 0.05);
    }

    #[test]
    fn scoring_is_ordered_and_reproducible() {
        let m = model(ModelKind::Cluster, 3, 15);
        let ds = toy(5, 0.1, 1);
        let a = score_images(&m, &ds.images, None, 6, 7).unwrap();
        let b = score_images(&m, &ds.images, None, 6, 7).unwrap();
        assert_eq!(a, b);
        let single = score_image(&m, ds.image(3), None, 6, derive_seed(7, &[3])).unwrap();
        assert_eq!(a[3], single);
        for d in &a {
            for row in d.probs.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!("bogus".parse::<PredictiveMode>().is_err());
        assert_eq!("unit_effect".parse::<PredictiveMode>().unwrap(), PredictiveMode::UnitEffect);
    }

    #[test]
    fn target_policy_examples() {
        assert_eq!(target_policy(&[3.0, 1.0, 2.0], 2).unwrap(), vec![1, 0, 1]);
        assert_eq!(target_policy(&[3.0, 1.0, 2.0], 0).unwrap(), vec![0, 0, 0]);
        assert_eq!(target_policy(&[3.0, 1.0, 2.0], 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(target_policy(&[1.0, 1.0, 1.0], 1).unwrap(), vec![1, 0, 0]);
        assert!(target_policy(&[1.0], 2).is_err());
    }

    #[test]
    fn batcher_covers_each_epoch_once() {
        let mut b = Batcher::new(10, 3, 1).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(Batcher::new(10, 11, 1).is_err());
    }
}
