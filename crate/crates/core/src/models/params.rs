//! Flat named parameter storage and the per-forward binding context.
//!
//! Every trainable quantity lives in a [`ParamStore`] as a plain tensor. A
//! Gaussian weight is a pair of store entries (mean, rho). Each forward pass
//! binds the whole store onto a fresh [`Graph`] and models refer to their
//! parameters by store index, so gradients come back as one vector per entry.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{normals, Stream};
use crate::tensor::Tensor;
use crate::variational::{flipout_perturb, sample_gaussian_reparam, LinearOp};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Store indices of a Gaussian weight's mean and unconstrained scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussWeight {
    pub mean: usize,
    pub rho: usize,
}

/// Batchnorm affine parameters (point estimates) plus a running-stats slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&stats.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// How weights are drawn from their variational posteriors in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Posterior means only.
    Mean,
    /// One reparameterized draw per weight, shared by the whole batch.
    Reparam,
    /// Flipout for conv/dense kernels, shared reparameterized draws for biases.
    Flipout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnUse {
    Train,
    Eval,
}

pub struct Forward<'a> {
    pub g: Graph,
    vars: Vec<Var>,
    pub sampling: Sampling,
    bn_use: BnUse,
    running: &'a [BnRunning],
    pub rng: Stream,
    /// Training-mode batch statistics, keyed by running-stats slot.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<'a> Forward<'a> {
    /// Binds every store entry as a graph leaf; `grad` decides whether they
    /// are differentiated.
    pub fn new(store: &ParamStore, running: &'a [BnRunning], sampling: Sampling, bn_use: BnUse, grad: bool, rng: Stream) -> Result<Self> {
        let mut g = Graph::new();
        let vars = store.values().iter().map(|t| g.leaf(t.clone(), grad)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            g,
            vars,
            sampling,
            bn_use,
            running,
            rng,
            batch_stats: Vec::new(),
        })
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// A weight value according to the sampling mode (no flipout).
    pub fn sample(&mut self, w: GaussWeight) -> Result<Var> {
        let (mean, rho) = (self.vars[w.mean], self.vars[w.rho]);
        match self.sampling {
            Sampling::Mean => Ok(mean),
            Sampling::Reparam | Sampling::Flipout => {
                let shape = self.g.shape(mean).to_vec();
                let noise = Tensor::new(shape.clone(), normals(&mut self.rng, shape.iter().product()))?;
                sample_gaussian_reparam(&mut self.g, mean, rho, &noise)
            }
        }
    }

    /// Applies a Gaussian-weighted linear map to `x`.
    pub fn linear(&mut self, op: LinearOp, x: Var, w: GaussWeight) -> Result<Var> {
        match self.sampling {
            Sampling::Flipout => {
                let (mean, rho) = (self.vars[w.mean], self.vars[w.rho]);
                flipout_perturb(&mut self.g, op, x, mean, rho, &mut self.rng)
            }
            _ => {
                let wv = self.sample(w)?;
                op.apply(&mut self.g, x, wv)
            }
        }
    }

    pub fn add_bias(&mut self, x: Var, b: GaussWeight) -> Result<Var> {
        let bv = self.sample(b)?;
        self.g.add_bias(x, bv)
    }

    pub fn batchnorm(&mut self, x: Var, layer: BnLayer) -> Result<Var> {
        let (gamma, beta) = (self.vars[layer.gamma], self.vars[layer.beta]);
        match self.bn_use {
            BnUse::Train => {
                let (y, stats) = self.g.batchnorm(x, gamma, beta, BnMode::Train)?;
                self.batch_stats.push((layer.slot, stats.expect("training batchnorm returns stats")));
                Ok(y)
            }
            BnUse::Eval => {
                let r = self
                    .running
                    .get(layer.slot)
                    .ok_or_else(|| Error::invalid(format!("missing running statistics for slot {}", layer.slot)))?;
                let (y, _) = self.g.batchnorm(x, gamma, beta, BnMode::Eval { mean: &r.mean, var: &r.var })?;
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = BnRunning::new(1);
        r.update(
            &BatchStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
            0.9,
        );
        assert!((r.mean[0] - 0.1).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }
}
