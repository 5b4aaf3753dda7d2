//! The image-type effect models.
//!
//! A gate arm maps an image to cluster probabilities `P_i`, a relaxed draw
//! `z_i` of the image type selects the effect distribution, and a baseline arm
//! gives `mu_{Y_i(0)}`. The cluster variant draws the effect mean from
//! per-cluster Gaussians; the differential variant reads it from one CNN arm
//! per cluster.

use serde::{Deserialize, Serialize};

use super::arm::{CnnArm, CnnArmConfig, InputDims};
use super::params::{BnRunning, Forward, GaussWeight, ParamStore};
use crate::autodiff::kernels::{softplus, softplus_inv};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::{derive, normals, tag};
use crate::tensor::Tensor;
use crate::variational::{gumbel_softmax, GaussianPrior};

/// Additive floor on every softplus-derived outcome/effect scale.
pub const SCALE_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Tolerance for relaxed gate vectors to count as on the simplex.
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cluster,
    Differential,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Self::Cluster),
            "differential" => Ok(Self::Differential),
            other => Err(Error::invalid(format!("unknown model kind {other:?} (expected cluster or differential)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub k: usize,
    pub arm: CnnArmConfig,
    /// Differential model only: one trunk with a K-wide output instead of K
    /// independent arms.
    pub shared_effect_trunk: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cluster,
            k: 2,
            arm: CnnArmConfig::default(),
            shared_effect_trunk: false,
        }
    }
}

/// Per-cluster effect and outcome-scale parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterHeads {
    pub k: usize,
    /// `mu_{tau,z}`; cluster variant only.
    pub mu_tau: Option<GaussWeight>,
    /// Unconstrained `sigma_{tau,z}`; cluster variant only.
    pub u_tau: Option<GaussWeight>,
    pub u_sig0: GaussWeight,
    pub u_sig1: GaussWeight,
}

impl ClusterHeads {
    pub fn weights(&self) -> Vec<GaussWeight> {
        [self.mu_tau, self.u_tau, Some(self.u_sig0), Some(self.u_sig1)].into_iter().flatten().collect()
    }
}

pub fn scale_from_unconstrained(u: f64) -> f64 {
    SCALE_FLOOR + softplus(u)
}

pub fn unconstrained_from_scale(s: f64) -> f64 {
    softplus_inv((s - SCALE_FLOOR).max(1e-12))
}

/// Pieces of one stochastic forward pass over a batch.
pub struct BatchOutputs {
    /// Cluster probabilities `[B, K]`.
    pub probs: Var,
    /// Relaxed image-type draws `[B, K]`.
    pub z: Var,
    /// Baseline means `[B]`.
    pub mu0: Var,
    /// Effect means `[B]`.
    pub mu_tau: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageModel {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub store: ParamStore,
    pub running: Vec<BnRunning>,
    gate: Option<CnnArm>,
    baseline: CnnArm,
    effect: Vec<CnnArm>,
    pub heads: ClusterHeads,
    /// Priors aligned with [`ImageModel::weights`].
    pub priors: Vec<GaussianPrior>,
    weights: Vec<GaussWeight>,
}

impl ImageModel {
    pub fn new(config: ModelConfig, dims: InputDims, seed: u64) -> Result<Self> {
        let k = config.k;
        if k == 0 {
            return Err(Error::invalid("model: K must be at least 1"));
        }
        let mut store = ParamStore::new();
        let mut running = Vec::new();
        let mut rng = derive(seed, &[tag("init")]);
        let arm_cfg = &config.arm;
        let gate = if k > 1 {
            Some(CnnArm::build("gate", arm_cfg, dims, k, &mut store, &mut running, &mut rng)?)
        } else {
            None
        };
        let scalar = *arm_cfg.head_dims.last().expect("validated head dims");
        if scalar != 1 {
            return Err(Error::invalid(format!("model: scalar arms need an output width of 1, got {scalar}")));
        }
        let baseline = CnnArm::build("baseline", arm_cfg, dims, 1, &mut store, &mut running, &mut rng)?;
        let mut effect = Vec::new();
        if config.kind == ModelKind::Differential {
            if config.shared_effect_trunk {
                effect.push(CnnArm::build("effect", arm_cfg, dims, k, &mut store, &mut running, &mut rng)?);
            } else {
                for z in 0..k {
                    effect.push(CnnArm::build(&format!("effect{z}"), arm_cfg, dims, 1, &mut store, &mut running, &mut rng)?);
                }
            }
        }
        let mut head = |name: &str, mean: f64, sigma_init: f64| GaussWeight {
            mean: store.add(format!("heads.{name}.mean"), Tensor::full(&[k], mean)),
            rho: store.add(format!("heads.{name}.rho"), Tensor::full(&[k], softplus_inv(sigma_init))),
        };
        let cluster = config.kind == ModelKind::Cluster;
        let heads = ClusterHeads {
            k,
            mu_tau: cluster.then(|| head("mu_tau", 0.0, super::arm::INIT_SIGMA)),
            u_tau: cluster.then(|| head("u_tau", unconstrained_from_scale(0.1), super::arm::INIT_SIGMA)),
            u_sig0: head("u_sig0", unconstrained_from_scale(1.0), super::arm::INIT_SIGMA),
            u_sig1: head("u_sig1", unconstrained_from_scale(1.0), super::arm::INIT_SIGMA),
        };
        let mut weights: Vec<GaussWeight> = Vec::new();
        for arm in gate.iter().chain(std::iter::once(&baseline)).chain(&effect) {
            weights.extend_from_slice(arm.weights());
        }
        weights.extend(heads.weights());
        let priors = weights
            .iter()
            .map(|w| GaussianPrior::isotropic(store.get(w.mean).len(), 0.0, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            dims,
            store,
            running,
            gate,
            baseline,
            effect,
            heads,
            priors,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Every variational weight, in declaration order.
    pub fn weights(&self) -> &[GaussWeight] {
        &self.weights
    }

    pub fn gate(&self) -> Option<&CnnArm> {
        self.gate.as_ref()
    }

    pub fn baseline(&self) -> &CnnArm {
        &self.baseline
    }

    pub fn effect_arms(&self) -> &[CnnArm] {
        &self.effect
    }

    /// Weights belonging to the neural arms (not the cluster heads).
    pub fn arm_weights(&self) -> &[GaussWeight] {
        &self.weights[..self.weights.len() - self.heads.weights().len()]
    }

    /// Posterior means and scales of a head vector.
    pub fn head_posterior(&self, w: GaussWeight) -> (Vec<f64>, Vec<f64>) {
        let mean = self.store.get(w.mean).data().to_vec();
        let sigma = self.store.get(w.rho).data().iter().map(|r| softplus(*r)).collect();
        (mean, sigma)
    }

    /// Cluster probabilities `[B, K]` from one forward pass of the gate.
    pub fn image_type_probs(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>) -> Result<Var> {
        match &self.gate {
            Some(gate) => {
                let logits = gate.forward(f, images, tabular)?;
                f.g.softmax(logits)
            }
            None => {
                let b = f.g.shape(images)[0];
                self.check_images(f, images)?;
                f.g.constant(Tensor::full(&[b, 1], 1.0))
            }
        }
    }

    /// Gate logits `[B, K]`; zeros when K = 1.
    pub fn gate_logits(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>) -> Result<Var> {
        match &self.gate {
            Some(gate) => gate.forward(f, images, tabular),
            None => {
                let b = f.g.shape(images)[0];
                self.check_images(f, images)?;
                f.g.constant(Tensor::zeros(&[b, 1]))
            }
        }
    }

    fn check_images(&self, f: &Forward<'_>, images: Var) -> Result<()> {
        let s = f.g.shape(images);
        let want = [self.dims.height, self.dims.width, self.dims.channels];
        if s.len() != 4 {
            return Err(Error::shape("model", "image batch rank", 4, s.len()));
        }
        for (i, name) in ["image height", "image width", "image channels"].into_iter().enumerate() {
            if s[i + 1] != want[i] {
                return Err(Error::shape("model", name, want[i], s[i + 1]));
            }
        }
        Ok(())
    }

    /// Baseline means `[B]`.
    pub fn baseline_mean(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>) -> Result<Var> {
        let out = self.baseline.forward(f, images, tabular)?;
        let b = f.g.shape(out)[0];
        f.g.reshape(out, &[b])
    }

    fn check_simplex(&self, f: &Forward<'_>, z: Var) -> Result<()> {
        let k = self.k();
        let s = f.g.shape(z);
        if s.len() != 2 || s[1] != k {
            return Err(Error::shape("effect_mean", "gate width", k, *s.last().unwrap_or(&0)));
        }
        for (i, row) in f.g.value(z).data().chunks(k).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|v| *v < -SIMPLEX_TOL) {
                return Err(Error::invalid(format!("effect_mean: gate row {i} is off the simplex (sum {total})")));
            }
        }
        Ok(())
    }

    /// `sum_z z_z (mu_{tau,z} + sigma_{tau,z} xi_z)` with one posterior draw of
    /// the heads per forward and independent `xi` per unit and cluster.
    pub fn effect_mean_cluster(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        self.check_simplex(f, z)?;
        let (Some(mu_w), Some(u_w)) = (self.heads.mu_tau, self.heads.u_tau) else {
            return Err(Error::invalid("effect_mean_cluster on a differential model"));
        };
        let b = f.g.shape(z)[0];
        let k = self.k();
        let mu = f.sample(mu_w)?;
        let u = f.sample(u_w)?;
        let sig = f.g.softplus(u)?;
        let sig = f.g.shift(sig, SCALE_FLOOR)?;
        let mu_rows = f.g.broadcast_rows(mu, b)?;
        let sig_rows = f.g.broadcast_rows(sig, b)?;
        let xi = Tensor::new(vec![b, k], normals(&mut f.rng, b * k))?;
        let spread = f.g.mul_const(sig_rows, &xi)?;
        let draws = f.g.add(mu_rows, spread)?;
        let weighted = f.g.mul(z, draws)?;
        f.g.sum_last(weighted)
    }

    /// `sum_z z_z arm_z(image)`.
    pub fn effect_mean_differential(&self, f: &mut Forward<'_>, z: Var, images: Var, tabular: Option<Var>) -> Result<Var> {
        self.check_simplex(f, z)?;
        if self.effect.is_empty() {
            return Err(Error::invalid("effect_mean_differential on a cluster model"));
        }
        let arms = self.arm_effects(f, images, tabular)?;
        let weighted = f.g.mul(z, arms)?;
        f.g.sum_last(weighted)
    }

    /// Every effect arm's output side by side, `[B, K]`.
    pub fn arm_effects(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>) -> Result<Var> {
        let mut out = self.effect[0].forward(f, images, tabular)?;
        for arm in &self.effect[1..] {
            let next = arm.forward(f, images, tabular)?;
            out = f.g.concat_last(out, next)?;
        }
        Ok(out)
    }

    /// Per-cluster outcome variances `(sigma_0^2, sigma_1^2)`, each `[K]`, from
    /// one posterior draw.
    pub fn outcome_variances(&self, f: &mut Forward<'_>) -> Result<(Var, Var)> {
        let mut out = [None, None];
        for (slot, w) in out.iter_mut().zip([self.heads.u_sig0, self.heads.u_sig1]) {
            let u = f.sample(w)?;
            let s = f.g.softplus(u)?;
            let s = f.g.shift(s, SCALE_FLOOR)?;
            *slot = Some(f.g.square(s)?);
        }
        Ok((out[0].unwrap(), out[1].unwrap()))
    }

    /// Per-unit Normal log-densities `[B]`. The variance mixes the
    /// per-cluster variances of the observed arm with weights `z`.
    pub fn outcome_loglik(&self, f: &mut Forward<'_>, y: &[f64], t: &[f64], mu0: Var, mu_tau: Var, z: Var) -> Result<Var> {
        let b = y.len();
        let k = self.k();
        if t.len() != b || f.g.shape(mu0) != [b] || f.g.shape(mu_tau) != [b] {
            return Err(Error::shape("outcome_loglik", "batch", b, f.g.shape(mu0).first().copied().unwrap_or(0)));
        }
        let (v0, v1) = self.outcome_variances(f)?;
        let v0 = f.g.broadcast_rows(v0, b)?;
        let v1 = f.g.broadcast_rows(v1, b)?;
        let treated = Tensor::new(vec![b, k], t.iter().flat_map(|ti| std::iter::repeat(*ti).take(k)).collect())?;
        let control = treated.map(|v| 1.0 - v);
        let v0 = f.g.mul_const(v0, &control)?;
        let v1 = f.g.mul_const(v1, &treated)?;
        let v = f.g.add(v0, v1)?;
        let v = f.g.mul(z, v)?;
        let var = f.g.sum_last(v)?;
        let shift = f.g.mul_const(mu_tau, &Tensor::vector(t.to_vec()))?;
        let mean = f.g.add(mu0, shift)?;
        let neg = f.g.scale(mean, -1.0)?;
        let resid = f.g.add_const(neg, &Tensor::vector(y.to_vec()))?;
        let sq = f.g.square(resid)?;
        let ratio = f.g.div(sq, var)?;
        let logv = f.g.log(var)?;
        let total = f.g.add(ratio, logv)?;
        let total = f.g.shift(total, LN_2PI)?;
        let ll = f.g.scale(total, -0.5)?;
        Ok(ll)
    }

    /// A full stochastic forward: probabilities, relaxed draw, baseline and
    /// effect means.
    pub fn forward_batch(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>, temperature: f64) -> Result<BatchOutputs> {
        let logits = self.gate_logits(f, images, tabular)?;
        let probs = f.g.softmax(logits)?;
        let z = gumbel_softmax(&mut f.g, logits, temperature, &mut f.rng)?;
        let mu0 = self.baseline_mean(f, images, tabular)?;
        let mu_tau = match self.kind() {
            ModelKind::Cluster => self.effect_mean_cluster(f, z)?,
            ModelKind::Differential => self.effect_mean_differential(f, z, images, tabular)?,
        };
        Ok(BatchOutputs { probs, z, mu0, mu_tau })
    }

    /// Sum of closed-form KL terms over every variational weight.
    pub fn kl(&self, f: &mut Forward<'_>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (w, p) in self.weights.iter().zip(&self.priors) {
            let term = f.g.kl_diag(f.var(w.mean), f.var(w.rho), &p.mean, &p.sigma)?;
            total = Some(match total {
                Some(acc) => f.g.add(acc, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::invalid("model has no variational weights"))
    }
}

/// Normal log-density.
pub fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mean) * (y - mean) / var)
}

/// Scalar form of the outcome likelihood for one unit.
pub fn outcome_loglik_value(y: f64, t: f64, mu0: f64, mu_tau: f64, z: &[f64], sigma0: &[f64], sigma1: &[f64]) -> f64 {
    let sig = if t > 0.5 { sigma1 } else { sigma0 };
    let var: f64 = z.iter().zip(sig).map(|(w, s)| w * s * s).sum();
    normal_logpdf(y, mu0 + t * mu_tau, var)
}
