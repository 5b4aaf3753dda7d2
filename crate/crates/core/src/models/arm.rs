//! The Bayesian CNN arm shared by every model.
//!
//! Each convolutional block is `conv (same) -> activation -> batchnorm ->
//! 1x1 bottleneck projection -> max-pool`. The pooled features are flattened,
//! optionally concatenated with tabular covariates, and passed through dense
//! hidden layers (`dense -> activation -> batchnorm`) and a linear output.

use serde::{Deserialize, Serialize};

use super::params::{BnLayer, BnRunning, Forward, GaussWeight, ParamStore};
use crate::autodiff::kernels::softplus_inv;
use crate::autodiff::{Padding, Var};
use crate::error::{Error, Result};
use crate::rng::{normals, Stream};
use crate::tensor::Tensor;
use crate::variational::LinearOp;

/// Posterior scale every weight starts from before priors are fitted.
pub const INIT_SIGMA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnArmConfig {
    pub conv_layers: usize,
    pub filter_size: usize,
    pub filters_per_layer: usize,
    pub bottleneck_dim: usize,
    pub pool: usize,
    pub bn_momentum: f64,
    pub activation: Activation,
    /// Hidden dense widths followed by the output width. The output width is
    /// overridden by arms whose role fixes it (the gate emits K logits).
    pub head_dims: Vec<usize>,
}

impl Default for CnnArmConfig {
    fn default() -> Self {
        Self {
            conv_layers: 4,
            filter_size: 5,
            filters_per_layer: 32,
            bottleneck_dim: 3,
            pool: 2,
            bn_momentum: 0.90,
            activation: Activation::Swish,
            head_dims: vec![16, 1],
        }
    }
}

impl CnnArmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("conv_layers", self.conv_layers),
            ("filter_size", self.filter_size),
            ("filters_per_layer", self.filters_per_layer),
            ("bottleneck_dim", self.bottleneck_dim),
            ("pool", self.pool),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("arm config: {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid(format!("arm config: bn_momentum must lie in [0, 1), got {}", self.bn_momentum)));
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(Error::invalid("arm config: head_dims must be nonempty and positive"));
        }
        Ok(())
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.head_dims[..self.head_dims.len() - 1]
    }

    /// Flattened feature width for an `h x w` input.
    pub fn feature_dim(&self, height: usize, width: usize) -> Result<usize> {
        let (mut h, mut w) = (height, width);
        for layer in 0..self.conv_layers {
            if self.pool > h || self.pool > w {
                return Err(Error::invalid(format!(
                    "arm config: {height}x{width} input is too small for {} pooled layers (layer {layer} sees {h}x{w})",
                    self.conv_layers
                )));
            }
            h /= self.pool;
            w /= self.pool;
        }
        Ok(h * w * self.bottleneck_dim)
    }
}

/// Input geometry seen by an arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tabular: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ConvBlock {
    kernel: GaussWeight,
    bias: GaussWeight,
    bn: BnLayer,
    proj: GaussWeight,
    proj_bias: GaussWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DenseBlock {
    weight: GaussWeight,
    bias: GaussWeight,
    bn: BnLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnArm {
    config: CnnArmConfig,
    dims: InputDims,
    convs: Vec<ConvBlock>,
    dense: Vec<DenseBlock>,
    pub out_weight: GaussWeight,
    pub out_bias: GaussWeight,
    out_dim: usize,
    weights: Vec<GaussWeight>,
}

struct Builder<'a> {
    prefix: &'a str,
    store: &'a mut ParamStore,
    running: &'a mut Vec<BnRunning>,
    rng: &'a mut Stream,
    weights: Vec<GaussWeight>,
}

impl Builder<'_> {
    fn gauss(&mut self, name: &str, shape: &[usize], scale: f64) -> GaussWeight {
        let n: usize = shape.iter().product();
        let mean: Vec<f64> = normals(self.rng, n).into_iter().map(|v| v * scale).collect();
        let w = GaussWeight {
            mean: self
                .store
                .add(format!("{}.{name}.mean", self.prefix), Tensor::new(shape.to_vec(), mean).expect("init shape")),
            rho: self
                .store
                .add(format!("{}.{name}.rho", self.prefix), Tensor::full(shape, softplus_inv(INIT_SIGMA))),
        };
        self.weights.push(w);
        w
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.store.add(format!("{}.{name}.gamma", self.prefix), Tensor::full(&[channels], 1.0));
        let beta = self.store.add(format!("{}.{name}.beta", self.prefix), Tensor::zeros(&[channels]));
        self.running.push(BnRunning::new(channels));
        BnLayer {
            gamma,
            beta,
            slot: self.running.len() - 1,
        }
    }
}

impl CnnArm {
    /// Allocates parameters in `store` and running-stat slots in `running`.
    pub fn build(
        prefix: &str,
        config: &CnnArmConfig,
        dims: InputDims,
        out_dim: usize,
        store: &mut ParamStore,
        running: &mut Vec<BnRunning>,
        rng: &mut Stream,
    ) -> Result<Self> {
        config.validate()?;
        if dims.height == 0 || dims.width == 0 || dims.channels == 0 || out_dim == 0 {
            return Err(Error::invalid("arm: image dims and output width must be positive"));
        }
        let flat = config.feature_dim(dims.height, dims.width)?;
        let mut b = Builder {
            prefix,
            store,
            running,
            rng,
            weights: Vec::new(),
        };
        let (k, f, p) = (config.filter_size, config.filters_per_layer, config.bottleneck_dim);
        let mut cin = dims.channels;
        let mut convs = Vec::new();
        for l in 0..config.conv_layers {
            let fan_in = (k * k * cin) as f64;
            convs.push(ConvBlock {
                kernel: b.gauss(&format!("conv{l}.kernel"), &[k, k, cin, f], fan_in.sqrt().recip()),
                bias: b.gauss(&format!("conv{l}.bias"), &[f], 0.0),
                bn: b.bn(&format!("conv{l}.bn"), f),
                proj: b.gauss(&format!("conv{l}.proj"), &[1, 1, f, p], (f as f64).sqrt().recip()),
                proj_bias: b.gauss(&format!("conv{l}.proj_bias"), &[p], 0.0),
            });
            cin = p;
        }
        let mut width = flat + dims.tabular;
        let mut dense = Vec::new();
        for (l, &h) in config.hidden_dims().iter().enumerate() {
            dense.push(DenseBlock {
                weight: b.gauss(&format!("dense{l}.weight"), &[width, h], (width as f64).sqrt().recip()),
                bias: b.gauss(&format!("dense{l}.bias"), &[h], 0.0),
                bn: b.bn(&format!("dense{l}.bn"), h),
            });
            width = h;
        }
        let out_weight = b.gauss("out.weight", &[width, out_dim], (width as f64).sqrt().recip());
        let out_bias = b.gauss("out.bias", &[out_dim], 0.0);
        let weights = b.weights;
        Ok(Self {
            config: config.clone(),
            dims,
            convs,
            dense,
            out_weight,
            out_bias,
            out_dim,
            weights,
        })
    }

    pub fn config(&self) -> &CnnArmConfig {
        &self.config
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Every Gaussian weight of the arm, in declaration order.
    pub fn weights(&self) -> &[GaussWeight] {
        &self.weights
    }

    fn activate(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Swish => f.g.swish(x),
            Activation::Softplus => f.g.softplus(x),
        }
    }

    /// Image features after the convolutional stack, `[B, flat]`.
    pub fn features(&self, f: &mut Forward<'_>, images: Var) -> Result<Var> {
        let shape = f.g.shape(images).to_vec();
        let expected = [self.dims.height, self.dims.width, self.dims.channels];
        if shape.len() != 4 {
            return Err(Error::shape("arm", "image batch rank", 4, shape.len()));
        }
        for (i, name) in ["image height", "image width", "image channels"].into_iter().enumerate() {
            if shape[i + 1] != expected[i] {
                return Err(Error::shape("arm", name, expected[i], shape[i + 1]));
            }
        }
        let conv = LinearOp::Conv {
            stride: 1,
            padding: Padding::Same,
        };
        let mut x = images;
        for block in &self.convs {
            x = f.linear(conv, x, block.kernel)?;
            x = f.add_bias(x, block.bias)?;
            x = self.activate(f, x)?;
            x = f.batchnorm(x, block.bn)?;
            x = f.linear(conv, x, block.proj)?;
            x = f.add_bias(x, block.proj_bias)?;
            x = f.g.maxpool2d(x, self.config.pool)?;
        }
        let s = f.g.shape(x).to_vec();
        f.g.reshape(x, &[s[0], s[1] * s[2] * s[3]])
    }

    /// Arm output `[B, out_dim]`.
    pub fn forward(&self, f: &mut Forward<'_>, images: Var, tabular: Option<Var>) -> Result<Var> {
        let x = self.features(f, images)?;
        let mut x = fuse_tabular(f, x, tabular, self.dims.tabular)?;
        let dense = LinearOp::Dense;
        for block in &self.dense {
            x = f.linear(dense, x, block.weight)?;
            x = f.add_bias(x, block.bias)?;
            x = self.activate(f, x)?;
            x = f.batchnorm(x, block.bn)?;
        }
        x = f.linear(dense, x, self.out_weight)?;
        f.add_bias(x, self.out_bias)
    }
}

/// Appends standardized tabular covariates to flattened image features.
pub fn fuse_tabular(f: &mut Forward<'_>, features: Var, tabular: Option<Var>, expected: usize) -> Result<Var> {
    match tabular {
        None if expected == 0 => Ok(features),
        None => Err(Error::shape("fuse_tabular", "tabular width", expected, 0)),
        Some(t) => {
            let width = *f.g.shape(t).last().unwrap_or(&0);
            if width != expected {
                return Err(Error::shape("fuse_tabular", "tabular width", expected, width));
            }
            if width == 0 {
                return Ok(features);
            }
            f.g.concat_last(features, t)
        }
    }
}
