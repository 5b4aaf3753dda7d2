//! Variational Gaussians, reparameterized and flipout sampling, diagonal KL
//! divergences and the Gumbel-Softmax relaxation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{softmax_in_place, softplus};
use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::rng::{normals, Stream};
use crate::tensor::Tensor;

/// Default Gumbel-Softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Floor on empirical-Bayes prior scales.
pub const PRIOR_SIGMA_FLOOR: f64 = 1e-3;

/// Diagonal Gaussian with `sigma = softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGaussian {
    pub mean: Tensor,
    pub rho: Tensor,
}

impl VariationalGaussian {
    pub fn new(mean: Tensor, rho: Tensor) -> Result<Self> {
        if mean.shape() != rho.shape() {
            return Err(Error::shape("variational gaussian", "rho length", mean.len(), rho.len()));
        }
        Ok(Self { mean, rho })
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    /// `mean + softplus(rho) ⊙ noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != self.mean.shape() {
            return Err(Error::shape("sample_gaussian_reparam", "noise length", self.mean.len(), noise.len()));
        }
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(noise.data())
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        Tensor::new(self.mean.shape().to_vec(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mean.len() != sigma.len() {
            return Err(Error::shape("gaussian prior", "sigma length", mean.len(), sigma.len()));
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!("prior sigma at {i} must be positive")));
        }
        Ok(Self { mean, sigma })
    }

    pub fn isotropic(len: usize, mean: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![mean; len], vec![sigma; len])
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// `ln softplus(rho)`, accurate for very negative `rho`.
fn ln_softplus(rho: f64) -> f64 {
    if rho < -30.0 {
        rho
    } else {
        softplus(rho).ln()
    }
}

pub(crate) fn kl_diag_value(mean: &[f64], rho: &[f64], prior_mean: &[f64], prior_sigma: &[f64]) -> f64 {
    mean.iter()
        .zip(rho)
        .zip(prior_mean.iter().zip(prior_sigma))
        .map(|((m, r), (pm, ps))| {
            let sq = softplus(*r);
            let d = m - pm;
            ps.ln() - ln_softplus(*r) + (sq * sq + d * d) / (2.0 * ps * ps) - 0.5
        })
        .sum()
}

/// Closed-form `KL(q || p)` summed over all parameters.
pub fn kl_gaussian_diag(q: &VariationalGaussian, p: &GaussianPrior) -> Result<f64> {
    if q.mean.len() != p.len() {
        return Err(Error::shape("kl_gaussian_diag", "prior length", q.mean.len(), p.len()));
    }
    if let Some(i) = p.sigma.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::invalid(format!("kl_gaussian_diag: prior sigma at {i} must be positive")));
    }
    Ok(kl_diag_value(q.mean.data(), q.rho.data(), &p.mean, &p.sigma))
}

/// Reparameterized draw on the tape: `mean + softplus(rho) ⊙ noise`.
pub fn sample_gaussian_reparam(g: &mut Graph, mean: Var, rho: Var, noise: &Tensor) -> Result<Var> {
    let sigma = g.softplus(rho)?;
    let pert = g.mul_const(sigma, noise)?;
    g.add(mean, pert)
}

/// Independent ±1 entries.
pub fn random_signs(rng: &mut Stream, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(vec![rows, cols], data).expect("sign tensor shape")
}

/// Which linear map a flipout perturbation wraps.
#[derive(Clone, Copy, Debug)]
pub enum LinearOp {
    Dense,
    Conv { stride: usize, padding: Padding },
}

impl LinearOp {
    pub(crate) fn apply(self, g: &mut Graph, x: Var, w: Var) -> Result<Var> {
        match self {
            LinearOp::Dense => g.matmul(x, w),
            LinearOp::Conv { stride, padding } => g.conv2d(x, w, stride, padding),
        }
    }
}

/// Flipout estimator for a Gaussian weight posterior.
///
/// One perturbation `ΔW = softplus(rho) ⊙ ε` is shared by the batch; example
/// `b` sees `ΔW ⊙ (s_out[b] s_in[b]ᵀ)` through independent sign vectors, which
/// gives `op(x, mean) + s_out ⊙ op(s_in ⊙ x, ΔW)`.
pub fn flipout_perturb(g: &mut Graph, op: LinearOp, x: Var, mean: Var, rho: Var, rng: &mut Stream) -> Result<Var> {
    let w_shape = g.shape(mean).to_vec();
    let noise = Tensor::new(w_shape.clone(), normals(rng, w_shape.iter().product()))?;
    let batch = g.shape(x)[0];
    let cin = *g.shape(x).last().unwrap();
    let cout = *w_shape.last().unwrap();
    let s_in = random_signs(rng, batch, cin);
    let s_out = random_signs(rng, batch, cout);
    flipout_with(g, op, x, mean, rho, &noise, &s_in, &s_out)
}

/// [`flipout_perturb`] with explicit noise and sign draws.
#[allow(clippy::too_many_arguments)]
pub fn flipout_with(g: &mut Graph, op: LinearOp, x: Var, mean: Var, rho: Var, noise: &Tensor, s_in: &Tensor, s_out: &Tensor) -> Result<Var> {
    let base = op.apply(g, x, mean)?;
    let sigma = g.softplus(rho)?;
    let delta = g.mul_const(sigma, noise)?;
    let xs = g.scale_channels(x, s_in)?;
    let pert = op.apply(g, xs, delta)?;
    let pert = g.scale_channels(pert, s_out)?;
    g.add(base, pert)
}

pub fn gumbel_noise(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Open interval keeps both logs finite.
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed categorical draw `softmax((logits + G) / temperature)` over the
/// last axis, differentiable in `logits`.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, temperature: f64, rng: &mut Stream) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let noise = Tensor::new(shape.clone(), gumbel_noise(rng, shape.iter().product()))?;
    gumbel_softmax_with(g, logits, temperature, &noise)
}

pub fn gumbel_softmax_with(g: &mut Graph, logits: Var, temperature: f64, noise: &Tensor) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("gumbel_softmax: temperature must be > 0, got {temperature}")));
    }
    let perturbed = g.add_const(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature)?;
    g.softmax(scaled)
}

/// Off-tape relaxed draw for a single logit vector.
pub fn gumbel_softmax_sample(logits: &[f64], temperature: f64, rng: &mut Stream) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("gumbel_softmax: temperature must be > 0, got {temperature}")));
    }
    let noise = gumbel_noise(rng, logits.len());
    let mut z: Vec<f64> = logits.iter().zip(&noise).map(|(l, n)| (l + n) / temperature).collect();
    softmax_in_place(&mut z);
    Ok(z)
}

/// Priors centred on deterministic pre-fit weights, one scale per tensor: the
/// population standard deviation of that tensor, floored at
/// [`PRIOR_SIGMA_FLOOR`].
pub fn empirical_bayes_priors<'a>(layers: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<GaussianPrior>> {
    layers
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            if w.is_empty() {
                return Err(Error::invalid(format!("empirical_bayes_priors: layer {i} is empty")));
            }
            let sd = crate::stats::population_sd(w.data()).max(PRIOR_SIGMA_FLOOR);
            GaussianPrior::isotropic(w.len(), 0.0, sd).map(|p| GaussianPrior { mean: w.data().to_vec(), ..p })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::stream;

    fn vg(mean: Vec<f64>, rho: Vec<f64>) -> VariationalGaussian {
        VariationalGaussian::new(Tensor::vector(mean), Tensor::vector(rho)).unwrap()
    }

    #[test]
    fn reparam_examples() {
        let q = vg(vec![1.0, -2.0], vec![0.3, -1.0]);
        assert_eq!(q.sample(&Tensor::zeros(&[2])).unwrap().data(), &[1.0, -2.0]);
        let tight = vg(vec![1.5], vec![-800.0]);
        assert_eq!(tight.sample(&Tensor::vector(vec![3.0])).unwrap().data(), &[1.5]);
        assert!(q.sample(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn reparam_variance_matches_softplus() {
        let rho = 0.4;
        let q = vg(vec![2.0], vec![rho]);
        let mut rng = stream(11);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| q.sample(&Tensor::vector(normals(&mut rng, 1))).unwrap().item()).collect();
        let var = crate::stats::population_var(&draws);
        let target = softplus(rho).powi(2);
        assert!((var / target - 1.0).abs() < 0.01, "{var} vs {target}");
    }

    #[test]
    fn reparam_gradient_on_tape() {
        let mut g = Graph::new();
        let m = g.param(Tensor::vector(vec![0.5])).unwrap();
        let r = g.param(Tensor::vector(vec![0.2])).unwrap();
        let s = sample_gaussian_reparam(&mut g, m, r, &Tensor::vector(vec![1.7])).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(m), vec![1.0]);
        assert!((grads.wrt(r)[0] - 1.7 * crate::autodiff::kernels::sigmoid(0.2)).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = GaussianPrior::new(vec![0.0], vec![1.0]).unwrap();
        let same = vg(vec![0.0], vec![crate::autodiff::kernels::softplus_inv(1.0)]);
        assert!(kl_gaussian_diag(&same, &p).unwrap().abs() < 1e-12);
        let shifted = vg(vec![1.0], vec![crate::autodiff::kernels::softplus_inv(1.0)]);
        assert!((kl_gaussian_diag(&shifted, &p).unwrap() - 0.5).abs() < 1e-12);
        assert!(GaussianPrior::new(vec![0.0], vec![0.0]).is_err());
        let bad = GaussianPrior {
            mean: vec![0.0],
            sigma: vec![-1.0],
        };
        assert!(kl_gaussian_diag(&same, &bad).is_err());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality() {
        let mut rng = stream(5);
        for _ in 0..1000 {
            let m: f64 = rng.gen_range(-3.0..3.0);
            let r: f64 = rng.gen_range(-3.0..3.0);
            let pm: f64 = rng.gen_range(-3.0..3.0);
            let ps: f64 = rng.gen_range(0.05..3.0);
            let kl = kl_diag_value(&[m], &[r], &[pm], &[ps]);
            assert!(kl >= 0.0, "{kl}");
            let same = kl_diag_value(&[pm], &[crate::autodiff::kernels::softplus_inv(ps)], &[pm], &[ps]);
            assert!(same.abs() < 1e-12);
            if (m - pm).abs() > 1e-3 || (softplus(r) - ps).abs() > 1e-3 {
                assert!(kl > 1e-12);
            }
        }
    }

    #[test]
    fn flipout_without_noise_is_deterministic() {
        let mut rng = stream(1);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let wm = g.param(w).unwrap();
        let wr = g.param(Tensor::full(&[2, 2], -800.0)).unwrap();
        let y = flipout_perturb(&mut g, LinearOp::Dense, xv, wm, wr, &mut rng).unwrap();
        let det = g.matmul(xv, wm).unwrap();
        assert_eq!(g.value(y).data(), g.value(det).data());
    }

    #[test]
    fn flipout_decorrelates_identical_inputs() {
        let mut rng = stream(2);
        let row: Vec<f64> = (1..=8).map(|i| i as f64 / 4.0).collect();
        let x = Tensor::new(vec![2, 8], [row.clone(), row].concat()).unwrap();
        let mut differ = 0;
        for _ in 0..100 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wm = g.param(Tensor::full(&[8, 4], 0.2)).unwrap();
            let wr = g.param(Tensor::full(&[8, 4], -1.0)).unwrap();
            let y = flipout_perturb(&mut g, LinearOp::Dense, xv, wm, wr, &mut rng).unwrap();
            let d = g.value(y).data();
            if (0..4).any(|j| (d[j] - d[4 + j]).abs() > 1e-12) {
                differ += 1;
            }
        }
        assert!(differ >= 95, "{differ}");
    }

    #[test]
    fn flipout_mean_over_signs_matches_shared_sample() {
        // Fixed ΔW; averaging over sign draws must recover op(x, mean), which
        // is also the expectation of a naive reparameterized forward.
        let mut rng = stream(3);
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mean = Tensor::new(vec![3, 1], vec![0.1, 0.2, -0.3]).unwrap();
        let rho = Tensor::full(&[3, 1], 0.0);
        let noise = Tensor::vector(normals(&mut rng, 3)).reshape(&[3, 1]).unwrap();
        let n = 10_000;
        let mut acc = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wm = g.param(mean.clone()).unwrap();
            let wr = g.param(rho.clone()).unwrap();
            let s_in = random_signs(&mut rng, 1, 3);
            let s_out = random_signs(&mut rng, 1, 1);
            let y = flipout_with(&mut g, LinearOp::Dense, xv, wm, wr, &noise, &s_in, &s_out).unwrap();
            let v = g.value(y).item();
            acc += v;
            sq += v * v;
        }
        let m = acc / n as f64;
        let se = ((sq / n as f64 - m * m) / n as f64).sqrt();
        let target = 0.5 * 0.1 - 1.0 * 0.2 + 2.0 * -0.3;
        assert!((m - target).abs() < 4.0 * se, "{m} vs {target} (se {se})");
    }

    #[test]
    fn gumbel_softmax_examples() {
        let mut rng = stream(9);
        let z = gumbel_softmax_sample(&[0.3, -1.2, 2.0], DEFAULT_TEMPERATURE, &mut rng).unwrap();
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(z.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(DEFAULT_TEMPERATURE, 0.5);
        assert!(gumbel_softmax_sample(&[0.0], 0.0, &mut rng).is_err());
        assert!(gumbel_softmax_sample(&[0.0], -1.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_argmax_frequencies_follow_softmax() {
        let logits = [0.5, -0.3, 1.1];
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        let mut rng = stream(10);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let z = gumbel_softmax_sample(&logits, 0.5, &mut rng).unwrap();
            let arg = (0..3).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            counts[arg] += 1;
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / n as f64;
            assert!((freq - probs[k]).abs() < 0.01, "{k}: {freq} vs {}", probs[k]);
        }
    }

    #[test]
    fn gumbel_sharpens_as_temperature_drops() {
        let mut rng = stream(12);
        for _ in 0..200 {
            let logits = normals(&mut rng, 4);
            let noise = Tensor::vector(gumbel_noise(&mut rng, 4));
            let mut prev = 0.0;
            for t in [1.0, 0.1, 0.01] {
                let mut g = Graph::new();
                let l = g.param(Tensor::vector(logits.clone())).unwrap();
                let z = gumbel_softmax_with(&mut g, l, t, &noise).unwrap();
                let max = g.value(z).data().iter().copied().fold(0.0, f64::max);
                assert!(max >= prev - 1e-15);
                prev = max;
            }
        }
    }

    #[test]
    fn gumbel_gradient_matches_finite_differences() {
        let mut rng = stream(13);
        let logits = normals(&mut rng, 3);
        let noise = Tensor::vector(gumbel_noise(&mut rng, 3));
        let w = [0.7, -1.1, 0.4];
        let f = |l: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let lv = g.param(Tensor::vector(l.to_vec())).unwrap();
            let z = gumbel_softmax_with(&mut g, lv, 0.5, &noise).unwrap();
            let zw = g.mul_const(z, &Tensor::vector(w.to_vec())).unwrap();
            let s = g.sum(zw).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item(), grads.wrt(lv))
        };
        let (_, analytic) = f(&logits);
        let h = 1e-5;
        for i in 0..3 {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let numeric = (f(&p).0 - f(&m).0) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-2);
            assert!(rel < 1e-6, "{i}: {rel}");
        }
    }

    #[test]
    fn empirical_bayes_examples() {
        let zero = Tensor::zeros(&[4]);
        let pm1 = Tensor::vector(vec![-1.0, 1.0]);
        let priors = empirical_bayes_priors([&zero, &pm1]).unwrap();
        assert_eq!(priors[0].sigma, vec![PRIOR_SIGMA_FLOOR; 4]);
        assert_eq!(priors[0].mean, vec![0.0; 4]);
        assert_eq!(priors[1].sigma, vec![1.0, 1.0]);
        assert_eq!(priors[1].mean, pm1.data());
        assert!(empirical_bayes_priors([&Tensor::zeros(&[0])]).is_err());
    }
}
