//! Deterministic two-headed outcome network (T-learner with a shared trunk).
//!
//! The trunk is an arm run at its posterior means; the two heads are the two
//! columns of its final linear layer, so `y_hat_0` and `y_hat_1` share every
//! representation layer.

use serde::{Deserialize, Serialize};

use super::arm::{CnnArm, CnnArmConfig, InputDims};
use super::params::{BnRunning, Forward, ParamStore};
use crate::autodiff::Var;
use crate::error::Result;
use crate::rng::{derive, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarnetOutput {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TarnetModel {
    pub arm_config: CnnArmConfig,
    pub dims: InputDims,
    pub store: ParamStore,
    pub running: Vec<BnRunning>,
    trunk: CnnArm,
}

impl TarnetModel {
    pub fn new(arm_config: CnnArmConfig, dims: InputDims, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut running = Vec::new();
        let mut rng = derive(seed, &[tag("tarnet-init")]);
        let trunk = CnnArm::build("tarnet", &arm_config, dims, 2, &mut store, &mut running, &mut rng)?;
        Ok(Self {
            arm_config,
            dims,
            store,
            running,
            trunk,
        })
    }

    pub fn trunk(&self) -> &CnnArm {
        &self.trunk
    }

    /// `[B, 2]` predictions: column 0 is the control head, column 1 the
    /// treated head.
    pub fn forward(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>) -> Result<Var> {
        self.trunk.forward(f, images, tabular)
    }

    pub fn split(values: &[f64]) -> TarnetOutput {
        let y0: Vec<f64> = values.iter().step_by(2).copied().collect();
        let y1: Vec<f64> = values.iter().skip(1).step_by(2).copied().collect();
        let tau = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        TarnetOutput { y0, y1, tau }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::params::{BnUse, Sampling};
    use crate::rng::{normals, stream};
    use crate::tensor::Tensor;

    fn model() -> TarnetModel {
        let cfg = CnnArmConfig {
            conv_layers: 1,
            filter_size: 3,
            filters_per_layer: 2,
            head_dims: vec![4, 1],
            ..CnnArmConfig::default()
        };
        let dims = InputDims {
            height: 4,
            width: 4,
            channels: 1,
            tabular: 0,
        };
        TarnetModel::new(cfg, dims, 1).unwrap()
    }

    fn run(m: &TarnetModel) -> TarnetOutput {
        let mut f = Forward::new(&m.store, &m.running, Sampling::Mean, BnUse::Eval, false, stream(0)).unwrap();
        let x = f.g.constant(Tensor::new(vec![3, 4, 4, 1], normals(&mut stream(2), 48)).unwrap()).unwrap();
        let y = m.forward(&mut f, x, None).unwrap();
        TarnetModel::split(f.g.value(y).data())
    }

    #[test]
    fn tau_is_head_difference() {
        let out = run(&model());
        for i in 0..3 {
            assert_eq!(out.tau[i] + out.y0[i], out.y1[i]);
        }
    }

    #[test]
    fn identical_heads_give_zero_effect() {
        let mut m = model();
        let w = m.trunk.out_weight.mean;
        let data: Vec<f64> = m.store.get(w).data().chunks(2).flat_map(|r| [r[0], r[0]]).collect();
        *m.store.get_mut(w) = Tensor::new(m.store.get(w).shape().to_vec(), data).unwrap();
        let b = m.trunk.out_bias.mean;
        *m.store.get_mut(b) = Tensor::vector(vec![0.3, 0.3]);
        assert!(run(&m).tau.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn shared_bias_shift_leaves_tau() {
        let m = model();
        let before = run(&m);
        let mut shifted = m.clone();
        let b = shifted.trunk.out_bias.mean;
        let data: Vec<f64> = shifted.store.get(b).data().iter().map(|v| v + 2.5).collect();
        *shifted.store.get_mut(b) = Tensor::vector(data);
        let after = run(&shifted);
        for (a, b) in before.tau.iter().zip(&after.tau) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
