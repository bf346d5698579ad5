//! Variational layer variants and their KL contributions.
//!
//! Weight posteriors are fully factorized Gaussians `N(mu, softplus(rho)^2)`
//! against a fixed `N(0, I)` prior. On top of that base, the module provides
//! the reparameterization trick, local reparameterization, Flipout,
//! always-on MC dropout, and multiplicative normalizing flows (MNF), where a
//! flow-transformed latent scales the weight means per input unit (dense)
//! or per filter (conv3d) and the KL term becomes a single-sample bound with
//! a learned auxiliary posterior.
//!
//! Each stochastic forward exists once, as a tape graph builder taking the
//! noise tensors explicitly; the plain entry points draw the noise and run
//! the same graph on a scratch tape.

use crate::autodiff::{NodeId, Padding, Tape};
use crate::error::{Error, Result};
use crate::flows::{
    flow_forward_graph, flow_nodes, std_normal_log_pdf, FlowNodes, FlowStack,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fully factorized Gaussian posterior over a weight tensor.
/// The scale is parameterized as `sigma = softplus(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub rho: Tensor,
}

/// `rho` such that `softplus(rho)` equals the requested scale.
pub fn rho_for_sigma(sigma: f64) -> f64 {
    sigma.exp_m1().ln()
}

/// Default posterior scale at initialization.
pub const INIT_SIGMA: f64 = 0.01;

impl GaussianPosterior {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::Shape {
                op: "gaussian_posterior",
                lhs: mu.shape().to_vec(),
                rhs: rho.shape().to_vec(),
            });
        }
        Ok(GaussianPosterior { mu, rho })
    }

    /// He-style random means, sigma ~= `INIT_SIGMA`.
    pub fn init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut mu = Tensor::zeros(shape);
        for v in mu.data_mut() {
            *v = rng.normal_scaled(0.0, std);
        }
        GaussianPosterior {
            mu,
            rho: Tensor::full(shape, rho_for_sigma(INIT_SIGMA)),
        }
    }

    /// Degenerate posterior with exactly zero scale (softplus underflows).
    pub fn point(mu: Tensor) -> Self {
        let rho = Tensor::full(mu.shape(), -800.0);
        GaussianPosterior { mu, rho }
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(crate::autodiff::softplus)
    }
}

/// Auxiliary posterior `r(z_K | w, phi)`: an inverse flow on `z_K` followed
/// by a factorized Gaussian whose moments are bounded functions of the
/// sampled weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPosterior {
    /// Pairs with the per-output-unit weight means; length = output units.
    pub c: Tensor,
    /// Mean feature, length = flow dimension.
    pub b1: Tensor,
    /// Variance feature, length = flow dimension.
    pub b2: Tensor,
    /// The learned inverse map `z_K -> z_0'`.
    pub inverse_flow: FlowStack,
}

impl AuxPosterior {
    /// Zero features and identity flow: `r` is exactly the standard normal.
    pub fn identity(dim_z: usize, dim_out: usize, k: usize) -> Self {
        AuxPosterior {
            c: Tensor::zeros(&[dim_out]),
            b1: Tensor::zeros(&[dim_z]),
            b2: Tensor::zeros(&[dim_z]),
            inverse_flow: FlowStack::identity(dim_z, k),
        }
    }

    pub fn init(dim_z: usize, dim_out: usize, k: usize, rng: &mut Rng) -> Self {
        let mut c = Tensor::zeros(&[dim_out]);
        for v in c.data_mut() {
            *v = rng.normal_scaled(0.0, 0.1);
        }
        AuxPosterior {
            c,
            b1: Tensor::zeros(&[dim_z]),
            b2: Tensor::zeros(&[dim_z]),
            inverse_flow: FlowStack::near_identity(dim_z, k, rng),
        }
    }
}

impl MnfLayerParams {
    /// Training initialization: He-style posterior, multiplicative flow
    /// contracted around one, auxiliary flow seeded as its approximate
    /// inverse so the initial bound tracks the analytic KL.
    pub fn init(
        shape: &[usize],
        fan_in: usize,
        dim_z: usize,
        dim_out: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Self {
        let posterior = GaussianPosterior::init(shape, fan_in, rng);
        let flow = FlowStack::contract_to_one(dim_z, k, rng);
        let mut aux = AuxPosterior::init(dim_z, dim_out, k, rng);
        aux.inverse_flow = FlowStack::expand_from_one(dim_z, k, rng);
        MnfLayerParams {
            posterior,
            flow,
            aux,
        }
    }
}

/// Parameters of one MNF layer: Gaussian posterior, multiplicative flow
/// over `z` (dim = input units for dense, filter count for conv3d), and the
/// auxiliary posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct MnfLayerParams {
    pub posterior: GaussianPosterior,
    pub flow: FlowStack,
    pub aux: AuxPosterior,
}

/// Per-layer KL contributions of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct KlLedger {
    entries: Vec<(String, f64)>,
}

impl KlLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a layer's contribution; each layer may contribute exactly once
    /// per forward pass.
    pub fn record(&mut self, layer_id: &str, value: f64) -> Result<()> {
        if self.entries.iter().any(|(id, _)| id == layer_id) {
            return Err(Error::Config(format!(
                "KL ledger: layer {layer_id} recorded twice in one pass"
            )));
        }
        self.entries.push((layer_id.to_string(), value));
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v).sum()
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ── sampling and analytic KL ─────────────────────────────────────────

/// Reparameterized weight draw: `w = mu + softplus(rho) * eps`, `eps ~ N(0,I)`.
pub fn sample_reparameterized(post: &GaussianPosterior, rng: &mut Rng) -> Tensor {
    let sigma = post.sigma();
    let mut out = post.mu.clone();
    for (v, s) in out.data_mut().iter_mut().zip(sigma.data()) {
        *v += s * rng.normal();
    }
    out
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, 1))`, summed over all weights.
pub fn kl_gaussian_vs_standard_normal(post: &GaussianPosterior) -> f64 {
    let sigma = post.sigma();
    post.mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| {
            let s2 = (s * s).max(f64::MIN_POSITIVE);
            0.5 * (m * m + s2 - 1.0 - s2.ln())
        })
        .sum()
}

/// Graph twin of [`kl_gaussian_vs_standard_normal`] with an arbitrary mean
/// node (MNF passes the z-scaled means).
pub fn kl_gaussian_graph(tape: &Tape, mean: NodeId, sigma: NodeId) -> Result<NodeId> {
    let mu2 = tape.mul(mean, mean)?;
    let s2 = tape.clamp(tape.mul(sigma, sigma)?, f64::MIN_POSITIVE, f64::MAX)?;
    let inner = tape.sub(tape.affine(tape.add(mu2, s2)?, 1.0, -1.0)?, tape.log(s2)?)?;
    tape.affine(tape.sum(inner)?, 0.5, 0.0)
}

// ── Flipout ──────────────────────────────────────────────────────────

/// Noise for one Flipout dense pass: a shared weight perturbation and
/// per-example Rademacher sign vectors.
pub struct FlipoutNoise {
    pub eps: Tensor,
    pub s_signs: Tensor,
    pub r_signs: Tensor,
}

pub fn draw_flipout_noise(batch: usize, din: usize, dout: usize, rng: &mut Rng) -> FlipoutNoise {
    let mut eps = Tensor::zeros(&[din, dout]);
    rng.fill_normal(eps.data_mut());
    let mut s_signs = Tensor::zeros(&[batch, din]);
    for v in s_signs.data_mut() {
        *v = rng.sign();
    }
    let mut r_signs = Tensor::zeros(&[batch, dout]);
    for v in r_signs.data_mut() {
        *v = rng.sign();
    }
    FlipoutNoise {
        eps,
        s_signs,
        r_signs,
    }
}

/// Flipout dense pass on the tape:
/// `out = x*mu + ((x . s) * (sigma.eps)) . r`.
pub fn flipout_dense_graph(
    tape: &Tape,
    x: NodeId,
    mu: NodeId,
    sigma: NodeId,
    noise: &FlipoutNoise,
) -> Result<NodeId> {
    let eps = tape.constant(noise.eps.clone());
    let s = tape.constant(noise.s_signs.clone());
    let r = tape.constant(noise.r_signs.clone());
    let mean_out = tape.matmul(x, mu)?;
    let dw = tape.mul(sigma, eps)?;
    let pert = tape.mul(tape.matmul(tape.mul(x, s)?, dw)?, r)?;
    tape.add(mean_out, pert)
}

/// Plain Flipout dense forward: `input (B, din)`, posterior over `(din, dout)`.
pub fn flipout_dense_forward(
    input: &Tensor,
    post: &GaussianPosterior,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (b, din, dout) = dense_dims(input, post)?;
    let noise = draw_flipout_noise(b, din, dout, rng);
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let mu = tape.constant(post.mu.clone());
    let sigma = tape.constant(post.sigma());
    let out = flipout_dense_graph(&tape, x, mu, sigma, &noise)?;
    Ok(tape.forward(out))
}

// ── local reparameterization ─────────────────────────────────────────

/// Local reparameterization on the tape: sample the pre-activations
/// `a ~ N(x*mu, (x^2)*(sigma^2))` directly.
pub fn local_reparam_dense_graph(
    tape: &Tape,
    x: NodeId,
    mu: NodeId,
    sigma: NodeId,
    eps: &Tensor,
) -> Result<NodeId> {
    let e = tape.constant(eps.clone());
    let mean = tape.matmul(x, mu)?;
    let var = tape.matmul(tape.mul(x, x)?, tape.mul(sigma, sigma)?)?;
    // tiny floor keeps the sqrt differentiable when sigma underflows
    let std = tape.sqrt(tape.affine(var, 1.0, 1e-24)?)?;
    tape.add(mean, tape.mul(std, e)?)
}

pub fn local_reparam_dense_forward(
    input: &Tensor,
    post: &GaussianPosterior,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (b, _, dout) = dense_dims(input, post)?;
    let mut eps = Tensor::zeros(&[b, dout]);
    rng.fill_normal(eps.data_mut());
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let mu = tape.constant(post.mu.clone());
    let sigma = tape.constant(post.sigma());
    let out = local_reparam_dense_graph(&tape, x, mu, sigma, &eps)?;
    Ok(tape.forward(out))
}

fn dense_dims(input: &Tensor, post: &GaussianPosterior) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 || post.mu.rank() != 2 || input.shape()[1] != post.mu.shape()[0] {
        return Err(Error::Shape {
            op: "bayes_dense",
            lhs: input.shape().to_vec(),
            rhs: post.mu.shape().to_vec(),
        });
    }
    Ok((input.shape()[0], input.shape()[1], post.mu.shape()[1]))
}

// ── MC dropout ───────────────────────────────────────────────────────

/// Inverted dropout mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 - rate;
    let mut mask = Tensor::zeros(shape);
    for v in mask.data_mut() {
        *v = if rng.uniform() < keep { 1.0 / keep } else { 0.0 };
    }
    Ok(mask)
}

/// MC dropout: inverted dropout that stays active in both the training and
/// the test path.
pub fn mc_dropout_forward(input: &Tensor, rate: f64, rng: &mut Rng) -> Result<Tensor> {
    let mask = dropout_mask(input.shape(), rate, rng)?;
    let mut out = input.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    Ok(out)
}

// ── multiplicative normalizing flows ─────────────────────────────────

/// Tape handles for one MNF layer's parameters.
pub struct MnfNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
    pub flow: FlowNodes,
    pub c: NodeId,
    pub b1: NodeId,
    pub b2: NodeId,
    pub aux_flow: FlowNodes,
}

/// Register an MNF layer's parameters on a tape. Names passed to `leaf` are
/// relative ("mu", "flow.s0.scale.w1", "aux.c", ...).
pub fn mnf_nodes(
    tape: &Tape,
    params: &MnfLayerParams,
    leaf: &mut dyn FnMut(&str, &Tensor) -> NodeId,
) -> MnfNodes {
    let mu = leaf("mu", &params.posterior.mu);
    let rho = leaf("rho", &params.posterior.rho);
    let sigma = tape
        .softplus(rho)
        .expect("softplus of a finite tensor cannot fail");
    let mut flow_leaf = |name: &str, t: &Tensor| leaf(&format!("flow.{name}"), t);
    let flow = flow_nodes(tape, &params.flow, &mut flow_leaf);
    let c = leaf("aux.c", &params.aux.c);
    let b1 = leaf("aux.b1", &params.aux.b1);
    let b2 = leaf("aux.b2", &params.aux.b2);
    let mut aux_leaf = |name: &str, t: &Tensor| leaf(&format!("aux.flow.{name}"), t);
    let aux_flow = flow_nodes(tape, &params.aux.inverse_flow, &mut aux_leaf);
    MnfNodes {
        mu,
        sigma,
        flow,
        c,
        b1,
        b2,
        aux_flow,
    }
}

/// Single-sample KL bound of one MNF pass, as a graph node:
/// `KL(q(w|zK) || p(w)) + log q(zK) - log r(zK | w, phi)`.
///
/// `z0_values` are the host-side base draws (constant under the parameters);
/// `w_bar` is the per-output-unit mean of the sampled weights, shape
/// `(1, dim_out)`.
#[allow(clippy::too_many_arguments)]
pub fn mnf_kl_graph(
    tape: &Tape,
    nodes: &MnfNodes,
    zk: NodeId,
    z0_values: &[f64],
    log_det_fwd: NodeId,
    mean_scaled: NodeId,
    sigma: NodeId,
    w_bar: NodeId,
) -> Result<NodeId> {
    let dim_z = tape.shape(zk)[1];
    let dim_out = tape.shape(w_bar)[1];

    let analytic = kl_gaussian_graph(tape, mean_scaled, sigma)?;
    // log q(zK) = log N(z0; 0, I) - log_det_fwd
    let log_q = tape.affine(log_det_fwd, -1.0, std_normal_log_pdf(z0_values))?;

    // log r(zK | w): push zK through the auxiliary flow, then evaluate the
    // bounded Gaussian of the weight features.
    let (z0p, ld_aux) = flow_forward_graph(tape, zk, &nodes.aux_flow)?;
    let c_col = tape.reshape(nodes.c, &[dim_out, 1])?;
    let t = tape.tanh(tape.matmul(w_bar, c_col)?)?;
    let t_bc = tape.broadcast(t, &[1, dim_z])?;
    let b1_row = tape.reshape(nodes.b1, &[1, dim_z])?;
    let b2_row = tape.reshape(nodes.b2, &[1, dim_z])?;
    let mu_tilde = tape.mul(b1_row, t_bc)?;
    // sigma_tilde^2 = 2*sigmoid(u): expresses the exact standard normal at
    // u = 0 while staying bounded in (0, 2)
    let u = tape.mul(b2_row, t_bc)?;
    let neg_u = tape.neg(u)?;
    let inv_var = tape.affine(tape.affine(tape.exp(neg_u)?, 1.0, 1.0)?, 0.5, 0.0)?;
    let log_var = tape.affine(tape.softplus(neg_u)?, -1.0, std::f64::consts::LN_2)?;
    let diff = tape.sub(z0p, mu_tilde)?;
    let quad = tape.mul(tape.mul(diff, diff)?, inv_var)?;
    let log_r_gauss = tape.affine(
        tape.sum(tape.add(quad, log_var)?)?,
        -0.5,
        -0.5 * dim_z as f64 * (2.0 * std::f64::consts::PI).ln(),
    )?;
    let log_r = tape.add(log_r_gauss, ld_aux)?;

    let kl = tape.sub(tape.add(analytic, log_q)?, log_r)?;
    if !tape.forward(kl).all_finite() {
        return Err(Error::Numerical { op: "kl_mnf_bound" });
    }
    Ok(kl)
}

/// Output of an MNF graph pass: activations plus the layer's KL node.
pub struct MnfPass {
    pub output: NodeId,
    pub kl: NodeId,
}

/// MNF dense pass with explicit noise: `eps_z` has length `din`,
/// `eps_w` is `(din, dout)`-shaped.
pub fn mnf_dense_graph(
    tape: &Tape,
    x: NodeId,
    nodes: &MnfNodes,
    eps_z: &[f64],
    eps_w: &Tensor,
) -> Result<MnfPass> {
    let (din, dout) = {
        let s = tape.shape(nodes.mu);
        (s[0], s[1])
    };
    if eps_z.len() != din {
        return Err(Error::Config(format!(
            "mnf_dense: flow dim {} != input width {din}",
            eps_z.len()
        )));
    }
    let z0 = tape.constant(Tensor::from_parts(vec![1, din], eps_z.to_vec()));
    let (zk, ld_fwd) = flow_forward_graph(tape, z0, &nodes.flow)?;
    let z_col = tape.reshape(zk, &[din, 1])?;
    let z_bc = tape.broadcast(z_col, &[din, dout])?;
    let mean_scaled = tape.mul(nodes.mu, z_bc)?;
    let w = tape.add(mean_scaled, tape.mul(nodes.sigma, tape.constant(eps_w.clone()))?)?;
    let output = tape.matmul(x, w)?;

    let ones = tape.constant(Tensor::full(&[1, din], 1.0 / din as f64));
    let w_bar = tape.matmul(ones, w)?;
    let kl = mnf_kl_graph(tape, nodes, zk, eps_z, ld_fwd, mean_scaled, nodes.sigma, w_bar)?;
    Ok(MnfPass { output, kl })
}

/// MNF conv3d pass with explicit noise: `eps_z` has length `filters`,
/// `eps_w` is kernel-shaped `(F, C, kx, ky, kz)`. The flow latent scales
/// each filter's mean kernel.
pub fn mnf_conv3d_graph(
    tape: &Tape,
    x: NodeId,
    nodes: &MnfNodes,
    stride: usize,
    padding: Padding,
    eps_z: &[f64],
    eps_w: &Tensor,
) -> Result<MnfPass> {
    let kshape = tape.shape(nodes.mu);
    let filters = kshape[0];
    if eps_z.len() != filters {
        return Err(Error::Config(format!(
            "mnf_conv3d: flow dim {} != filter count {filters}",
            eps_z.len()
        )));
    }
    let fan = kshape[1] * kshape[2] * kshape[3] * kshape[4];
    let z0 = tape.constant(Tensor::from_parts(vec![1, filters], eps_z.to_vec()));
    let (zk, ld_fwd) = flow_forward_graph(tape, z0, &nodes.flow)?;
    let z_rs = tape.reshape(zk, &[filters, 1, 1, 1, 1])?;
    let z_bc = tape.broadcast(z_rs, &kshape)?;
    let mean_scaled = tape.mul(nodes.mu, z_bc)?;
    let w = tape.add(mean_scaled, tape.mul(nodes.sigma, tape.constant(eps_w.clone()))?)?;
    let output = tape.conv3d(x, w, stride, padding)?;

    let w_flat = tape.reshape(w, &[filters, fan])?;
    let ones = tape.constant(Tensor::full(&[fan, 1], 1.0 / fan as f64));
    let w_bar = tape.reshape(tape.matmul(w_flat, ones)?, &[1, filters])?;
    let kl = mnf_kl_graph(tape, nodes, zk, eps_z, ld_fwd, mean_scaled, nodes.sigma, w_bar)?;
    Ok(MnfPass { output, kl })
}

fn mnf_scratch(
    params: &MnfLayerParams,
) -> (Tape, MnfNodes) {
    let tape = Tape::new();
    let nodes = {
        let mut leaf = |_: &str, t: &Tensor| tape.constant(t.clone());
        mnf_nodes(&tape, params, &mut leaf)
    };
    (tape, nodes)
}

/// Plain MNF dense forward: draws `z0 ~ N(0, I)` and the weight noise from
/// `rng`, records the layer's KL bound in the ledger.
pub fn mnf_dense_forward(
    input: &Tensor,
    params: &MnfLayerParams,
    rng: &mut Rng,
    layer_id: &str,
    ledger: &mut KlLedger,
) -> Result<Tensor> {
    let (_, din, dout) = dense_dims(input, &params.posterior)?;
    params
        .flow
        .check_dim(din, "mnf_dense")
        .map_err(|_| Error::Config(format!(
            "mnf_dense: flow dim {} != input width {din}",
            params.flow.dim()
        )))?;
    let mut eps_z = vec![0.0; din];
    rng.fill_normal(&mut eps_z);
    let mut eps_w = Tensor::zeros(&[din, dout]);
    rng.fill_normal(eps_w.data_mut());
    let (tape, nodes) = mnf_scratch(params);
    let x = tape.constant(input.clone());
    let pass = mnf_dense_graph(&tape, x, &nodes, &eps_z, &eps_w)?;
    ledger.record(layer_id, tape.value_item(pass.kl)?)?;
    Ok(tape.forward(pass.output))
}

/// Plain MNF conv3d forward over a single `(C, X, Y, Z)` volume.
pub fn mnf_conv3d_forward(
    input: &Tensor,
    params: &MnfLayerParams,
    stride: usize,
    padding: Padding,
    rng: &mut Rng,
    layer_id: &str,
    ledger: &mut KlLedger,
) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Shape {
            op: "mnf_conv3d",
            lhs: input.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let kshape = params.posterior.mu.shape().to_vec();
    let filters = kshape[0];
    params
        .flow
        .check_dim(filters, "mnf_conv3d")
        .map_err(|_| Error::Config(format!(
            "mnf_conv3d: flow dim {} != filter count {filters}",
            params.flow.dim()
        )))?;
    let mut eps_z = vec![0.0; filters];
    rng.fill_normal(&mut eps_z);
    let mut eps_w = Tensor::zeros(&kshape);
    rng.fill_normal(eps_w.data_mut());
    let (tape, nodes) = mnf_scratch(params);
    let mut batched = input.shape().to_vec();
    batched.insert(0, 1);
    let x = tape.constant(input.reshaped(batched)?);
    let pass = mnf_conv3d_graph(&tape, x, &nodes, stride, padding, &eps_z, &eps_w)?;
    ledger.record(layer_id, tape.value_item(pass.kl)?)?;
    let out = tape.forward(pass.output);
    let s = out.shape().to_vec();
    out.reshaped(s[1..].to_vec())
}

/// Single-sample estimate of the MNF KL bound from the pieces of one
/// forward pass: `KL(q(w|zK)||p(w)) + log q(zK) - log r(zK|w, phi)`.
pub fn kl_mnf_bound(
    params: &MnfLayerParams,
    w_sample: &Tensor,
    z0: &[f64],
    zk: &[f64],
    log_det_fwd: f64,
) -> Result<f64> {
    let dim_z = params.flow.dim();
    if z0.len() != dim_z || zk.len() != dim_z {
        return Err(Error::Shape {
            op: "kl_mnf_bound",
            lhs: vec![z0.len(), zk.len()],
            rhs: vec![dim_z],
        });
    }
    let (tape, nodes) = mnf_scratch(params);
    let zk_node = tape.constant(Tensor::from_parts(vec![1, dim_z], zk.to_vec()));
    let ld = tape.scalar(log_det_fwd);

    // scaled means: per input unit for dense (rank 2), per filter for conv
    let mu_shape = params.posterior.mu.shape().to_vec();
    let (mean_scaled, w_bar) = match mu_shape.len() {
        2 => {
            let (din, dout) = (mu_shape[0], mu_shape[1]);
            let zc = tape.reshape(zk_node, &[din, 1])?;
            let scaled = tape.mul(nodes.mu, tape.broadcast(zc, &[din, dout])?)?;
            let ones = tape.constant(Tensor::full(&[1, din], 1.0 / din as f64));
            let wb = tape.matmul(ones, tape.constant(w_sample.clone()))?;
            (scaled, wb)
        }
        5 => {
            let filters = mu_shape[0];
            let fan: usize = mu_shape[1..].iter().product();
            let zc = tape.reshape(zk_node, &[filters, 1, 1, 1, 1])?;
            let scaled = tape.mul(nodes.mu, tape.broadcast(zc, &mu_shape)?)?;
            let w_flat = tape.reshape(tape.constant(w_sample.clone()), &[filters, fan])?;
            let ones = tape.constant(Tensor::full(&[fan, 1], 1.0 / fan as f64));
            let wb = tape.reshape(tape.matmul(w_flat, ones)?, &[1, filters])?;
            (scaled, wb)
        }
        _ => {
            return Err(Error::Shape {
                op: "kl_mnf_bound",
                lhs: mu_shape,
                rhs: vec![],
            })
        }
    };
    let kl = mnf_kl_graph(&tape, &nodes, zk_node, z0, ld, mean_scaled, nodes.sigma, w_bar)?;
    tape.value_item(kl)
}
