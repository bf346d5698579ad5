//! Runtime network: parameter storage per layer plus graph assembly for
//! training, mean-field evaluation and Monte-Carlo sampling.

use std::collections::BTreeMap;

use crate::autodiff::kernels::BN_EPS;
use crate::autodiff::{BatchStats, NodeId, Tape};
use crate::bayes::{
    self, draw_flipout_noise, kl_gaussian_graph, mnf_nodes, GaussianPosterior, MnfLayerParams,
};
use crate::error::{Error, Result};
use crate::flows::DEFAULT_STEPS;
use crate::layers::{
    Activation, BatchNormState, BayesVariant, LayerShape, LayerSpec, NetworkSpec,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Weight parameterization of a conv/dense layer.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightParams {
    Point(Tensor),
    Gaussian(GaussianPosterior),
    Mnf(MnfLayerParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Weighted { weights: WeightParams, bias: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor, state: BatchNormState },
    Stateless,
}

/// How a forward pass treats stochasticity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Sampled weights, active dropout, batch-statistics normalization.
    Train,
    /// All stochasticity disabled: posterior means, multiplicative latents
    /// pinned to one, dropout off, running-statistics normalization.
    MeanField,
    /// Sampled weights with running-statistics normalization; dropout only
    /// if marked always-on. One Monte-Carlo draw from the predictive.
    Sample,
}

/// Result of one graph assembly.
pub struct ForwardPass {
    /// Class-1 probabilities, shape `(B, 1)`.
    pub probs: NodeId,
    /// One KL contribution per Bayesian layer, in layer order.
    pub kl_nodes: Vec<(String, NodeId)>,
    /// Trainable parameter leaves by name (train mode only).
    pub param_nodes: BTreeMap<String, NodeId>,
    /// Batch statistics collected by train-mode batchnorm layers, to be
    /// applied via [`Network::apply_bn_updates`].
    pub bn_updates: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<LayerParams>,
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal_scaled(0.0, std);
    }
    t
}

fn weight_params(
    shape: &[usize],
    fan_in: usize,
    dim_z: usize,
    dim_out: usize,
    variant: BayesVariant,
    rng: &mut Rng,
) -> WeightParams {
    match variant {
        BayesVariant::None => WeightParams::Point(he_tensor(shape, fan_in, rng)),
        BayesVariant::Reparam | BayesVariant::LocalReparam | BayesVariant::Flipout => {
            WeightParams::Gaussian(GaussianPosterior::init(shape, fan_in, rng))
        }
        BayesVariant::Mnf => {
            WeightParams::Mnf(MnfLayerParams::init(shape, fan_in, dim_z, dim_out, DEFAULT_STEPS, rng))
        }
    }
}

impl Network {
    /// Initialize parameters for a validated spec.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut cur = LayerShape::Spatial {
            channels: 1,
            extent: spec.input_shape,
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            let params = match (layer, &cur) {
                (
                    LayerSpec::Conv3d { filters, kernel, variant, .. },
                    LayerShape::Spatial { channels, .. },
                ) => {
                    let shape = [*filters, *channels, kernel[0], kernel[1], kernel[2]];
                    let fan_in = channels * kernel[0] * kernel[1] * kernel[2];
                    LayerParams::Weighted {
                        weights: weight_params(&shape, fan_in, *filters, *filters, *variant, &mut rng),
                        bias: Tensor::zeros(&[*filters]),
                    }
                }
                (LayerSpec::Dense { units, variant, .. }, LayerShape::Flat(din)) => {
                    LayerParams::Weighted {
                        weights: weight_params(&[*din, *units], *din, *din, *units, *variant, &mut rng),
                        bias: Tensor::zeros(&[*units]),
                    }
                }
                (LayerSpec::BatchNorm, LayerShape::Spatial { channels, .. }) => {
                    LayerParams::BatchNorm {
                        gamma: Tensor::full(&[*channels], 1.0),
                        beta: Tensor::zeros(&[*channels]),
                        state: BatchNormState::new(*channels),
                    }
                }
                _ => LayerParams::Stateless,
            };
            layers.push(params);
            cur = shapes[i].clone();
        }
        Ok(Network { spec, layers })
    }

    pub fn layer_params(&self, idx: usize) -> &LayerParams {
        &self.layers[idx]
    }

    /// Visit every tensor (trainable parameters and batchnorm running
    /// statistics) in a stable name order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("l{i:02}.{name}");
            match layer {
                LayerParams::Weighted { weights, bias } => {
                    match weights {
                        WeightParams::Point(w) => f(&p("weight"), w),
                        WeightParams::Gaussian(g) => {
                            f(&p("mu"), &g.mu);
                            f(&p("rho"), &g.rho);
                        }
                        WeightParams::Mnf(m) => {
                            f(&p("mu"), &m.posterior.mu);
                            f(&p("rho"), &m.posterior.rho);
                            for (name, t) in m.flow.tensors() {
                                f(&p(&format!("flow.{name}")), t);
                            }
                            f(&p("aux.c"), &m.aux.c);
                            f(&p("aux.b1"), &m.aux.b1);
                            f(&p("aux.b2"), &m.aux.b2);
                            for (name, t) in m.aux.inverse_flow.tensors() {
                                f(&p(&format!("aux.flow.{name}")), t);
                            }
                        }
                    }
                    f(&p("bias"), bias);
                }
                LayerParams::BatchNorm { gamma, beta, state } => {
                    f(&p("gamma"), gamma);
                    f(&p("beta"), beta);
                    f(
                        &p("running_mean"),
                        &Tensor::vector(&state.running_mean),
                    );
                    f(&p("running_var"), &Tensor::vector(&state.running_var));
                }
                LayerParams::Stateless => {}
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = |name: &str| format!("l{i:02}.{name}");
            match layer {
                LayerParams::Weighted { weights, bias } => {
                    match weights {
                        WeightParams::Point(w) => f(&p("weight"), w),
                        WeightParams::Gaussian(g) => {
                            f(&p("mu"), &mut g.mu);
                            f(&p("rho"), &mut g.rho);
                        }
                        WeightParams::Mnf(m) => {
                            f(&p("mu"), &mut m.posterior.mu);
                            f(&p("rho"), &mut m.posterior.rho);
                            for (name, t) in m.flow.tensors_mut() {
                                f(&p(&format!("flow.{name}")), t);
                            }
                            f(&p("aux.c"), &mut m.aux.c);
                            f(&p("aux.b1"), &mut m.aux.b1);
                            f(&p("aux.b2"), &mut m.aux.b2);
                            for (name, t) in m.aux.inverse_flow.tensors_mut() {
                                f(&p(&format!("aux.flow.{name}")), t);
                            }
                        }
                    }
                    f(&p("bias"), bias);
                }
                LayerParams::BatchNorm { gamma, beta, state } => {
                    f(&p("gamma"), gamma);
                    f(&p("beta"), beta);
                    let mut rm = Tensor::vector(&state.running_mean);
                    f(&p("running_mean"), &mut rm);
                    state.running_mean = rm.data().to_vec();
                    let mut rv = Tensor::vector(&state.running_var);
                    f(&p("running_var"), &mut rv);
                    state.running_var = rv.data().to_vec();
                }
                LayerParams::Stateless => {}
            }
        }
    }

    /// All tensors as owned `(name, tensor)` pairs.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        for (idx, stats) in updates {
            if let LayerParams::BatchNorm { state, .. } = &mut self.layers[*idx] {
                state.update(&stats.mean, &stats.var);
            }
        }
    }

    /// Assemble the forward graph for a `(B, 1, X, Y, Z)` batch.
    pub fn forward(
        &self,
        tape: &Tape,
        input: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let expected = [
            self.spec.input_shape[0],
            self.spec.input_shape[1],
            self.spec.input_shape[2],
        ];
        if input.rank() != 5 || input.shape()[1] != 1 || input.shape()[2..] != expected {
            return Err(Error::Shape {
                op: "network_forward",
                lhs: input.shape().to_vec(),
                rhs: vec![0, 1, expected[0], expected[1], expected[2]],
            });
        }
        let batch = input.shape()[0];
        let train = mode == Mode::Train;
        let mut param_nodes = BTreeMap::new();
        let mut kl_nodes = Vec::new();
        let mut bn_updates = Vec::new();

        let mut x = tape.constant(input.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let prefix = format!("l{i:02}");
            let mut reg = |name: &str, t: &Tensor| -> NodeId {
                if train {
                    let id = tape.leaf(t.clone());
                    param_nodes.insert(format!("{prefix}.{name}"), id);
                    id
                } else {
                    tape.constant(t.clone())
                }
            };
            x = match (layer, &self.layers[i]) {
                (
                    LayerSpec::Conv3d { stride, padding, activation, variant, .. },
                    LayerParams::Weighted { weights, bias },
                ) => {
                    let y = conv_forward(
                        tape, x, weights, *stride, *padding, *variant, mode, batch, rng,
                        &prefix, &mut reg, &mut kl_nodes,
                    )?;
                    let y = add_channel_bias(tape, y, reg("bias", bias))?;
                    apply_activation(tape, y, *activation)?
                }
                (
                    LayerSpec::Dense { activation, variant, .. },
                    LayerParams::Weighted { weights, bias },
                ) => {
                    let y = dense_forward(
                        tape, x, weights, *variant, mode, batch, rng, &prefix, &mut reg,
                        &mut kl_nodes,
                    )?;
                    let bias_node = reg("bias", bias);
                    let out_shape = tape.shape(y);
                    let y = tape.add(y, tape.broadcast(bias_node, &out_shape)?)?;
                    apply_activation(tape, y, *activation)?
                }
                (LayerSpec::MaxPool3d { window }, _) => tape.maxpool3d(x, *window)?,
                (LayerSpec::BatchNorm, LayerParams::BatchNorm { gamma, beta, state }) => {
                    if train {
                        let g = reg("gamma", gamma);
                        let b = reg("beta", beta);
                        let (y, stats) = tape.batchnorm_train(x, g, b)?;
                        bn_updates.push((i, stats));
                        y
                    } else {
                        // fold running stats and affine params into one
                        // per-channel scale/shift
                        let c = gamma.numel();
                        let mut scale = vec![0.0; c];
                        let mut shift = vec![0.0; c];
                        for t in 0..c {
                            scale[t] = gamma.data()[t] / (state.running_var[t] + BN_EPS).sqrt();
                            shift[t] = beta.data()[t] - scale[t] * state.running_mean[t];
                        }
                        let xs = tape.shape(x);
                        let mut bshape = vec![1usize; xs.len()];
                        bshape[1] = c;
                        let sc = tape.constant(Tensor::from_parts(bshape.clone(), scale));
                        let sh = tape.constant(Tensor::from_parts(bshape, shift));
                        tape.add(
                            tape.mul(x, tape.broadcast(sc, &xs)?)?,
                            tape.broadcast(sh, &xs)?,
                        )?
                    }
                }
                (LayerSpec::Relu, _) => tape.relu(x)?,
                (LayerSpec::Dropout { rate, always_on }, _) => {
                    let active = match mode {
                        Mode::Train => true,
                        Mode::Sample => *always_on,
                        Mode::MeanField => false,
                    };
                    if active && *rate > 0.0 {
                        let mask = bayes::dropout_mask(&tape.shape(x), *rate, rng)?;
                        tape.mul(x, tape.constant(mask))?
                    } else {
                        x
                    }
                }
                (LayerSpec::GlobalMaxPool, _) => {
                    let s = tape.shape(x);
                    let pooled = tape.maxpool3d(x, [s[2], s[3], s[4]])?;
                    tape.reshape(pooled, &[s[0], s[1]])?
                }
                (LayerSpec::SigmoidHead, _) => tape.sigmoid(x)?,
                (spec, params) => {
                    return Err(Error::Config(format!(
                        "layer {i}: spec {} does not match stored parameters {params:?}",
                        spec.kind_name()
                    )))
                }
            };
        }
        Ok(ForwardPass {
            probs: x,
            kl_nodes,
            param_nodes,
            bn_updates,
        })
    }

    /// Probabilities for a batch of volumes, values only.
    pub fn predict_batch(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let pass = self.forward(&tape, input, mode, rng)?;
        Ok(tape.forward(pass.probs).data().to_vec())
    }
}

fn apply_activation(tape: &Tape, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::None => Ok(x),
        Activation::Relu => tape.relu(x),
    }
}

/// Add a `(F,)` bias across the channel axis of a `(B, F, X, Y, Z)` tensor.
fn add_channel_bias(tape: &Tape, x: NodeId, bias: NodeId) -> Result<NodeId> {
    let xs = tape.shape(x);
    let f = tape.shape(bias)[0];
    let reshaped = tape.reshape(bias, &[f, 1, 1, 1])?;
    tape.add(x, tape.broadcast(reshaped, &xs)?)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    tape: &Tape,
    x: NodeId,
    weights: &WeightParams,
    stride: usize,
    padding: crate::autodiff::Padding,
    variant: BayesVariant,
    mode: Mode,
    batch: usize,
    rng: &mut Rng,
    prefix: &str,
    reg: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    kl_nodes: &mut Vec<(String, NodeId)>,
) -> Result<NodeId> {
    let stochastic = mode != Mode::MeanField;
    match (weights, variant) {
        (WeightParams::Point(w), BayesVariant::None) => {
            let wn = reg("weight", w);
            tape.conv3d(x, wn, stride, padding)
        }
        (WeightParams::Gaussian(g), BayesVariant::Reparam) => {
            let (mu, sigma) = gaussian_nodes(tape, g, reg);
            push_kl(tape, kl_nodes, prefix, mu, sigma)?;
            let w = if stochastic {
                let mut eps = Tensor::zeros(g.mu.shape());
                rng.fill_normal(eps.data_mut());
                tape.add(mu, tape.mul(sigma, tape.constant(eps))?)?
            } else {
                mu
            };
            tape.conv3d(x, w, stride, padding)
        }
        (WeightParams::Gaussian(g), BayesVariant::LocalReparam) => {
            let (mu, sigma) = gaussian_nodes(tape, g, reg);
            push_kl(tape, kl_nodes, prefix, mu, sigma)?;
            let mean = tape.conv3d(x, mu, stride, padding)?;
            if !stochastic {
                return Ok(mean);
            }
            let var = tape.conv3d(tape.mul(x, x)?, tape.mul(sigma, sigma)?, stride, padding)?;
            let std = tape.sqrt(tape.affine(var, 1.0, 1e-24)?)?;
            let mut eps = Tensor::zeros(&tape.shape(mean));
            rng.fill_normal(eps.data_mut());
            tape.add(mean, tape.mul(std, tape.constant(eps))?)
        }
        (WeightParams::Gaussian(g), BayesVariant::Flipout) => {
            let (mu, sigma) = gaussian_nodes(tape, g, reg);
            push_kl(tape, kl_nodes, prefix, mu, sigma)?;
            let mean = tape.conv3d(x, mu, stride, padding)?;
            if !stochastic {
                return Ok(mean);
            }
            let in_ch = g.mu.shape()[1];
            let filters = g.mu.shape()[0];
            // per-example channel/filter sign vectors
            let mut s_signs = Tensor::zeros(&[batch, in_ch, 1, 1, 1]);
            for v in s_signs.data_mut() {
                *v = rng.sign();
            }
            let mut r_signs = Tensor::zeros(&[batch, filters, 1, 1, 1]);
            for v in r_signs.data_mut() {
                *v = rng.sign();
            }
            let mut eps = Tensor::zeros(g.mu.shape());
            rng.fill_normal(eps.data_mut());
            let dw = tape.mul(sigma, tape.constant(eps))?;
            let xs = tape.shape(x);
            let x_signed = tape.mul(x, tape.broadcast(tape.constant(s_signs), &xs)?)?;
            let pert = tape.conv3d(x_signed, dw, stride, padding)?;
            let ps = tape.shape(pert);
            let pert = tape.mul(pert, tape.broadcast(tape.constant(r_signs), &ps)?)?;
            tape.add(mean, pert)
        }
        (WeightParams::Mnf(m), BayesVariant::Mnf) => {
            let mut leaf = |name: &str, t: &Tensor| reg(name, t);
            let nodes = mnf_nodes(tape, m, &mut leaf);
            if stochastic {
                let filters = m.posterior.mu.shape()[0];
                let mut eps_z = vec![0.0; filters];
                rng.fill_normal(&mut eps_z);
                let mut eps_w = Tensor::zeros(m.posterior.mu.shape());
                rng.fill_normal(eps_w.data_mut());
                let pass =
                    bayes::mnf_conv3d_graph(tape, x, &nodes, stride, padding, &eps_z, &eps_w)?;
                kl_nodes.push((prefix.to_string(), pass.kl));
                Ok(pass.output)
            } else {
                // z pinned to one: plain analytic KL on the unscaled posterior
                push_kl_node(tape, kl_nodes, prefix, nodes.mu, nodes.sigma)?;
                tape.conv3d(x, nodes.mu, stride, padding)
            }
        }
        (w, v) => Err(Error::Config(format!(
            "conv layer parameter kind {w:?} does not match variant {v:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_forward(
    tape: &Tape,
    x: NodeId,
    weights: &WeightParams,
    variant: BayesVariant,
    mode: Mode,
    batch: usize,
    rng: &mut Rng,
    prefix: &str,
    reg: &mut dyn FnMut(&str, &Tensor) -> NodeId,
    kl_nodes: &mut Vec<(String, NodeId)>,
) -> Result<NodeId> {
    let stochastic = mode != Mode::MeanField;
    match (weights, variant) {
        (WeightParams::Point(w), BayesVariant::None) => {
            let wn = reg("weight", w);
            tape.matmul(x, wn)
        }
        (WeightParams::Gaussian(g), BayesVariant::Reparam) => {
            let (mu, sigma) = gaussian_nodes(tape, g, reg);
            push_kl(tape, kl_nodes, prefix, mu, sigma)?;
            let w = if stochastic {
                let mut eps = Tensor::zeros(g.mu.shape());
                rng.fill_normal(eps.data_mut());
                tape.add(mu, tape.mul(sigma, tape.constant(eps))?)?
            } else {
                mu
            };
            tape.matmul(x, w)
        }
        (WeightParams::Gaussian(g), BayesVariant::LocalReparam) => {
            let (mu, sigma) = gaussian_nodes(tape, g, reg);
            push_kl(tape, kl_nodes, prefix, mu, sigma)?;
            if !stochastic {
                return tape.matmul(x, mu);
            }
            let dout = g.mu.shape()[1];
            let mut eps = Tensor::zeros(&[batch, dout]);
            rng.fill_normal(eps.data_mut());
            bayes::local_reparam_dense_graph(tape, x, mu, sigma, &eps)
        }
        (WeightParams::Gaussian(g), BayesVariant::Flipout) => {
            let (mu, sigma) = gaussian_nodes(tape, g, reg);
            push_kl(tape, kl_nodes, prefix, mu, sigma)?;
            if !stochastic {
                return tape.matmul(x, mu);
            }
            let (din, dout) = (g.mu.shape()[0], g.mu.shape()[1]);
            let noise = draw_flipout_noise(batch, din, dout, rng);
            bayes::flipout_dense_graph(tape, x, mu, sigma, &noise)
        }
        (WeightParams::Mnf(m), BayesVariant::Mnf) => {
            let mut leaf = |name: &str, t: &Tensor| reg(name, t);
            let nodes = mnf_nodes(tape, m, &mut leaf);
            if stochastic {
                let din = m.posterior.mu.shape()[0];
                let mut eps_z = vec![0.0; din];
                rng.fill_normal(&mut eps_z);
                let mut eps_w = Tensor::zeros(m.posterior.mu.shape());
                rng.fill_normal(eps_w.data_mut());
                let pass = bayes::mnf_dense_graph(tape, x, &nodes, &eps_z, &eps_w)?;
                kl_nodes.push((prefix.to_string(), pass.kl));
                Ok(pass.output)
            } else {
                push_kl_node(tape, kl_nodes, prefix, nodes.mu, nodes.sigma)?;
                tape.matmul(x, nodes.mu)
            }
        }
        (w, v) => Err(Error::Config(format!(
            "dense layer parameter kind {w:?} does not match variant {v:?}"
        ))),
    }
}

fn gaussian_nodes(
    tape: &Tape,
    g: &GaussianPosterior,
    reg: &mut dyn FnMut(&str, &Tensor) -> NodeId,
) -> (NodeId, NodeId) {
    let mu = reg("mu", &g.mu);
    let rho = reg("rho", &g.rho);
    let sigma = tape
        .softplus(rho)
        .expect("softplus of finite rho cannot fail");
    (mu, sigma)
}

fn push_kl(
    tape: &Tape,
    kl_nodes: &mut Vec<(String, NodeId)>,
    prefix: &str,
    mu: NodeId,
    sigma: NodeId,
) -> Result<()> {
    push_kl_node(tape, kl_nodes, prefix, mu, sigma)
}

fn push_kl_node(
    tape: &Tape,
    kl_nodes: &mut Vec<(String, NodeId)>,
    prefix: &str,
    mean: NodeId,
    sigma: NodeId,
) -> Result<()> {
    let kl = kl_gaussian_graph(tape, mean, sigma)?;
    kl_nodes.push((prefix.to_string(), kl));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_reference_model, HeadKind};

    fn tiny_spec(variant: BayesVariant) -> NetworkSpec {
        NetworkSpec {
            input_shape: [4, 4, 4],
            layers: vec![
                LayerSpec::Conv3d {
                    filters: 2,
                    kernel: [3, 3, 3],
                    stride: 1,
                    padding: crate::autodiff::Padding::Same,
                    activation: Activation::Relu,
                    variant,
                },
                LayerSpec::MaxPool3d { window: [2, 2, 2] },
                LayerSpec::BatchNorm,
                LayerSpec::GlobalMaxPool,
                LayerSpec::Dense {
                    units: 3,
                    activation: Activation::Relu,
                    variant,
                },
                LayerSpec::Dropout { rate: 0.2, always_on: false },
                LayerSpec::Dense {
                    units: 1,
                    activation: Activation::None,
                    variant,
                },
                LayerSpec::SigmoidHead,
            ],
            head: HeadKind::Sigmoid,
        }
    }

    fn batch(b: usize) -> Tensor {
        let mut rng = Rng::new(99);
        let mut t = Tensor::zeros(&[b, 1, 4, 4, 4]);
        for v in t.data_mut() {
            *v = rng.uniform();
        }
        t
    }

    #[test]
    fn forward_shapes_match_inference_for_all_variants() {
        for variant in [
            BayesVariant::None,
            BayesVariant::Reparam,
            BayesVariant::LocalReparam,
            BayesVariant::Flipout,
            BayesVariant::Mnf,
        ] {
            let net = Network::init(tiny_spec(variant), 7).unwrap();
            let mut rng = Rng::new(1);
            let probs = net.predict_batch(&batch(2), Mode::Sample, &mut rng).unwrap();
            assert_eq!(probs.len(), 2, "variant {variant:?}");
            assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn bayesian_layers_contribute_kl_exactly_once() {
        let net = Network::init(tiny_spec(BayesVariant::Mnf), 7).unwrap();
        let tape = Tape::new();
        let mut rng = Rng::new(1);
        let pass = net.forward(&tape, &batch(2), Mode::Train, &mut rng).unwrap();
        assert_eq!(pass.kl_nodes.len(), 3); // conv + dense(3) + dense(1)
        let mut ids: Vec<&String> = pass.kl_nodes.iter().map(|(id, _)| id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn deterministic_spec_has_no_kl() {
        let net = Network::init(tiny_spec(BayesVariant::None), 7).unwrap();
        let tape = Tape::new();
        let mut rng = Rng::new(1);
        let pass = net.forward(&tape, &batch(2), Mode::Train, &mut rng).unwrap();
        assert!(pass.kl_nodes.is_empty());
    }

    #[test]
    fn mean_field_is_deterministic_across_calls() {
        let net = Network::init(tiny_spec(BayesVariant::Mnf), 3).unwrap();
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(999); // different rng must not matter
        let a = net.predict_batch(&batch(2), Mode::MeanField, &mut r1).unwrap();
        let b = net.predict_batch(&batch(2), Mode::MeanField, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mode_reproducible_under_seed() {
        let net = Network::init(tiny_spec(BayesVariant::Flipout), 3).unwrap();
        let a = net
            .predict_batch(&batch(2), Mode::Sample, &mut Rng::new(42))
            .unwrap();
        let b = net
            .predict_batch(&batch(2), Mode::Sample, &mut Rng::new(42))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_model_runs_forward() {
        let spec =
            build_reference_model([8, 8, 8], BayesVariant::None, HeadKind::Sigmoid, false)
                .unwrap();
        let net = Network::init(spec, 5).unwrap();
        let mut rng = Rng::new(1);
        let mut input = Tensor::zeros(&[2, 1, 8, 8, 8]);
        for v in input.data_mut() {
            *v = rng.uniform();
        }
        let probs = net.predict_batch(&input, Mode::MeanField, &mut rng).unwrap();
        assert_eq!(probs.len(), 2);
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let net = Network::init(tiny_spec(BayesVariant::None), 7).unwrap();
        let mut rng = Rng::new(1);
        let bad = Tensor::zeros(&[1, 1, 5, 5, 5]);
        assert!(matches!(
            net.predict_batch(&bad, Mode::MeanField, &mut rng),
            Err(Error::Shape { .. })
        ));
    }
}
