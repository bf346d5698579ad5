//! Deterministic building blocks and the tuned reference architecture:
//! three blocks of conv3d(128, 3x3x3, same, relu) -> maxpool(2) -> batchnorm,
//! then global max pooling, dense(256, relu), dropout(0.2), dense(1) and a
//! sigmoid head. Activations ride on the conv/dense layers, so the network
//! counts 14 layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, BN_EPS};
pub use crate::autodiff::Padding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

/// Posterior family of a conv3d/dense layer; `None` keeps it deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BayesVariant {
    #[default]
    None,
    Reparam,
    LocalReparam,
    Flipout,
    Mnf,
}

impl BayesVariant {
    pub fn is_bayesian(&self) -> bool {
        !matches!(self, BayesVariant::None)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "deterministic" => Ok(BayesVariant::None),
            "reparam" | "reparameterization" => Ok(BayesVariant::Reparam),
            "local_reparam" | "local-reparam" => Ok(BayesVariant::LocalReparam),
            "flipout" => Ok(BayesVariant::Flipout),
            "mnf" => Ok(BayesVariant::Mnf),
            other => Err(Error::Config(format!("unknown bayes variant '{other}'"))),
        }
    }
}

/// How predicted probabilities are reported at evaluation time:
/// a single mean-weight sigmoid pass, or the mean over Monte-Carlo forwards
/// (the Bernoulli-mean head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Sigmoid,
    BernoulliMean,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(HeadKind::Sigmoid),
            "bernoulli_mean" | "bernoulli-mean" => Ok(HeadKind::BernoulliMean),
            other => Err(Error::Config(format!("unknown head '{other}'"))),
        }
    }
}

/// One layer of a network specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d {
        filters: usize,
        kernel: [usize; 3],
        stride: usize,
        padding: Padding,
        activation: Activation,
        variant: BayesVariant,
    },
    MaxPool3d {
        window: [usize; 3],
    },
    BatchNorm,
    Relu,
    Dense {
        units: usize,
        activation: Activation,
        variant: BayesVariant,
    },
    Dropout {
        rate: f64,
        always_on: bool,
    },
    GlobalMaxPool,
    SigmoidHead,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { variant, .. } => match variant {
                BayesVariant::None => "conv3d",
                BayesVariant::Reparam => "reparam_conv3d",
                BayesVariant::LocalReparam => "local_reparam_conv3d",
                BayesVariant::Flipout => "flipout_conv3d",
                BayesVariant::Mnf => "mnf_conv3d",
            },
            LayerSpec::MaxPool3d { .. } => "maxpool3d",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { variant, .. } => match variant {
                BayesVariant::None => "dense",
                BayesVariant::Reparam => "reparam_dense",
                BayesVariant::LocalReparam => "local_reparam_dense",
                BayesVariant::Flipout => "flipout_dense",
                BayesVariant::Mnf => "mnf_dense",
            },
            LayerSpec::SigmoidHead => "sigmoid_head",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalMaxPool => "global_maxpool",
        }
    }
}

/// An ordered layer stack with a fixed input volume shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub head: HeadKind,
}

/// Shape flowing between layers: channelled volume, flat features, or the
/// final probability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerShape {
    Spatial { channels: usize, extent: [usize; 3] },
    Flat(usize),
}

impl LayerShape {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            LayerShape::Spatial { channels, extent } => {
                vec![*channels, extent[0], extent[1], extent[2]]
            }
            LayerShape::Flat(n) => vec![*n],
        }
    }
}

impl NetworkSpec {
    /// Infer the output shape of every layer; errors mirror what forward
    /// execution would raise.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut cur = LayerShape::Spatial {
            channels: 1,
            extent: self.input_shape,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = match (layer, &cur) {
                (
                    LayerSpec::Conv3d { filters, kernel, stride, padding, .. },
                    LayerShape::Spatial { channels, extent },
                ) => {
                    let xs = vec![1, *channels, extent[0], extent[1], extent[2]];
                    let ks = vec![*filters, *channels, kernel[0], kernel[1], kernel[2]];
                    let d = kernels::conv_dims(&xs, &ks, *stride, *padding)?;
                    LayerShape::Spatial {
                        channels: *filters,
                        extent: d.out,
                    }
                }
                (LayerSpec::MaxPool3d { window }, LayerShape::Spatial { channels, extent }) => {
                    for a in 0..3 {
                        if window[a] == 0 || window[a] > extent[a] || extent[a] % window[a] != 0 {
                            return Err(Error::Shape {
                                op: "maxpool3d",
                                lhs: extent.to_vec(),
                                rhs: window.to_vec(),
                            });
                        }
                    }
                    LayerShape::Spatial {
                        channels: *channels,
                        extent: [
                            extent[0] / window[0],
                            extent[1] / window[1],
                            extent[2] / window[2],
                        ],
                    }
                }
                (LayerSpec::BatchNorm, s @ LayerShape::Spatial { .. }) => s.clone(),
                (LayerSpec::Relu, s) => s.clone(),
                (LayerSpec::Dropout { rate, .. }, s) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    s.clone()
                }
                (LayerSpec::GlobalMaxPool, LayerShape::Spatial { channels, .. }) => {
                    LayerShape::Flat(*channels)
                }
                (LayerSpec::Dense { units, .. }, LayerShape::Flat(_)) => LayerShape::Flat(*units),
                (LayerSpec::SigmoidHead, LayerShape::Flat(1)) => LayerShape::Flat(1),
                (layer, shape) => {
                    return Err(Error::Shape {
                        op: "infer_shapes",
                        lhs: shape.dims(),
                        rhs: vec![layer.kind_name().len()],
                    })
                }
            };
            out.push(cur.clone());
        }
        match out.last() {
            Some(LayerShape::Flat(1)) => Ok(out),
            _ => Err(Error::Config(
                "network must end in a single probability output".into(),
            )),
        }
    }

    pub fn has_stochastic_layers(&self) -> bool {
        self.layers.iter().any(|l| match l {
            LayerSpec::Conv3d { variant, .. } | LayerSpec::Dense { variant, .. } => {
                variant.is_bayesian()
            }
            LayerSpec::Dropout { always_on, .. } => *always_on,
            _ => false,
        })
    }
}

/// The tuned reference model. `bayes_variant` swaps every conv3d/dense for
/// its Bayesian counterpart; `mc_dropout` keeps the dropout layer active at
/// prediction time.
pub fn build_reference_model(
    input_shape: [usize; 3],
    bayes_variant: BayesVariant,
    head: HeadKind,
    mc_dropout: bool,
) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    for _ in 0..3 {
        layers.push(LayerSpec::Conv3d {
            filters: 128,
            kernel: [3, 3, 3],
            stride: 1,
            padding: Padding::Same,
            activation: Activation::Relu,
            variant: bayes_variant,
        });
        layers.push(LayerSpec::MaxPool3d { window: [2, 2, 2] });
        layers.push(LayerSpec::BatchNorm);
    }
    layers.push(LayerSpec::GlobalMaxPool);
    layers.push(LayerSpec::Dense {
        units: 256,
        activation: Activation::Relu,
        variant: bayes_variant,
    });
    layers.push(LayerSpec::Dropout {
        rate: 0.2,
        always_on: mc_dropout,
    });
    layers.push(LayerSpec::Dense {
        units: 1,
        activation: Activation::None,
        variant: bayes_variant,
    });
    layers.push(LayerSpec::SigmoidHead);
    let spec = NetworkSpec {
        input_shape,
        layers,
        head,
    };
    spec.infer_shapes()?;
    Ok(spec)
}

// ── plain layer operations on single volumes ─────────────────────────

/// Cross-correlation of one `(C, X, Y, Z)` volume with `(F, C, kx, ky, kz)`
/// kernels.
pub fn conv3d(input: &Tensor, kernels_t: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Shape {
            op: "conv3d",
            lhs: input.shape().to_vec(),
            rhs: kernels_t.shape().to_vec(),
        });
    }
    let mut batched = input.shape().to_vec();
    batched.insert(0, 1);
    let out = kernels::conv3d_forward(&input.reshaped(batched)?, kernels_t, stride, padding)?;
    let s = out.shape().to_vec();
    out.reshaped(s[1..].to_vec())
}

/// Non-overlapping max pooling of one `(C, X, Y, Z)` volume.
pub fn maxpool3d(input: &Tensor, window: [usize; 3]) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Shape {
            op: "maxpool3d",
            lhs: input.shape().to_vec(),
            rhs: window.to_vec(),
        });
    }
    let mut batched = input.shape().to_vec();
    batched.insert(0, 1);
    let (out, _) = kernels::maxpool3d_forward(&input.reshaped(batched)?, window)?;
    let s = out.shape().to_vec();
    out.reshaped(s[1..].to_vec())
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Batch normalization over a `(B, C, ...)` tensor. Train mode normalizes by
/// batch moments and updates the running state; infer mode uses the state.
pub fn batchnorm(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BatchNormState,
    mode: BatchNormMode,
) -> Result<Tensor> {
    match mode {
        BatchNormMode::Train => {
            let (out, _, _, stats) = kernels::batchnorm_train_forward(input, gamma, beta)?;
            state.update(&stats.mean, &stats.var);
            Ok(out)
        }
        BatchNormMode::Infer => {
            let s = input.shape();
            if s.len() < 2 || gamma.len() != s[1] {
                return Err(Error::Shape {
                    op: "batchnorm",
                    lhs: s.to_vec(),
                    rhs: vec![gamma.len()],
                });
            }
            let c = s[1];
            let spatial: usize = s[2..].iter().product();
            let mut out = input.clone();
            for bi in 0..s[0] {
                for ci in 0..c {
                    let scale = gamma[ci] / (state.running_var[ci] + BN_EPS).sqrt();
                    let shift = beta[ci] - scale * state.running_mean[ci];
                    let base = (bi * c + ci) * spatial;
                    for t in 0..spatial {
                        let v = &mut out.data_mut()[base + t];
                        *v = scale * *v + shift;
                    }
                }
            }
            Ok(out)
        }
    }
}
