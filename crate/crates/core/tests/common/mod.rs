//! Shared oracles for the integration suites. Everything here computes
//! expected values through routes independent of the implementation under
//! test: nested-loop convolution, pairwise AUC counting, brute-force
//! calibration recounts, trapezoid quadrature and central finite
//! differences.

#![allow(dead_code)]

use voxbayes::autodiff::check::finite_difference_gradient;
use voxbayes::autodiff::{NodeId, Padding, Tape};
use voxbayes::bayes::MnfLayerParams;
use voxbayes::rng::Rng;
use voxbayes::tensor::Tensor;
use voxbayes::Result;

/// Brute-force cross-correlation oracle over `(B, C, X, Y, Z)` input and
/// `(F, C, kx, ky, kz)` kernels.
pub fn conv3d_oracle(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: Padding,
) -> Tensor {
    let xs = x.shape();
    let ks = k.shape();
    let (b, c) = (xs[0], xs[1]);
    let ext = [xs[2], xs[3], xs[4]];
    let f = ks[0];
    let kd = [ks[2], ks[3], ks[4]];
    let mut pad_lo = [0isize; 3];
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        match padding {
            Padding::Valid => {
                out_ext[a] = (ext[a] - kd[a]) / stride + 1;
            }
            Padding::Same => {
                out_ext[a] = ext[a].div_ceil(stride);
                let needed = (out_ext[a] - 1) * stride + kd[a];
                pad_lo[a] = (needed.saturating_sub(ext[a]) / 2) as isize;
            }
        }
    }
    let mut out = Tensor::zeros(&[b, f, out_ext[0], out_ext[1], out_ext[2]]);
    for bi in 0..b {
        for fi in 0..f {
            for ox in 0..out_ext[0] {
                for oy in 0..out_ext[1] {
                    for oz in 0..out_ext[2] {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for dx in 0..kd[0] {
                                for dy in 0..kd[1] {
                                    for dz in 0..kd[2] {
                                        let sx = (ox * stride) as isize - pad_lo[0] + dx as isize;
                                        let sy = (oy * stride) as isize - pad_lo[1] + dy as isize;
                                        let sz = (oz * stride) as isize - pad_lo[2] + dz as isize;
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= ext[0] as isize
                                            || sy >= ext[1] as isize
                                            || sz >= ext[2] as isize
                                        {
                                            continue;
                                        }
                                        acc += x.at(&[
                                            bi,
                                            ci,
                                            sx as usize,
                                            sy as usize,
                                            sz as usize,
                                        ]) * k.at(&[fi, ci, dx, dy, dz]);
                                    }
                                }
                            }
                        }
                        out.set(&[bi, fi, ox, oy, oz], acc);
                    }
                }
            }
        }
    }
    out
}

/// Pairwise-counting AUC oracle: wins plus half-ties over all
/// positive-negative pairs.
pub fn auc_pairwise_oracle(probs: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, (&pi, &yi)) in probs.iter().zip(labels).enumerate() {
        for (j, (&pj, &yj)) in probs.iter().zip(labels).enumerate() {
            if i == j || yi != 1 || yj != 0 {
                continue;
            }
            pairs += 1.0;
            if pi > pj {
                num += 1.0;
            } else if pi == pj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Independent calibration recount straight from the raw pairs.
pub fn ece_brute_force(probs: &[f64], labels: &[u8], threshold: f64, m: usize) -> f64 {
    let n = probs.len();
    let mut ece = 0.0;
    for bin in 0..m {
        let lo = bin as f64 / m as f64;
        let hi = (bin + 1) as f64 / m as f64;
        let mut count = 0usize;
        let mut conf_sum = 0.0;
        let mut correct = 0usize;
        for (&p, &y) in probs.iter().zip(labels) {
            let c = p.max(1.0 - p);
            let inside = if bin == 0 { c <= hi } else { c > lo && c <= hi };
            if inside {
                count += 1;
                conf_sum += c;
                let pred = (p >= threshold) as u8;
                correct += (pred == y) as usize;
            }
        }
        if count > 0 {
            let acc = correct as f64 / count as f64;
            let conf = conf_sum / count as f64;
            ece += count as f64 / n as f64 * (acc - conf).abs();
        }
    }
    ece
}

/// Trapezoid rule over uniformly spaced samples.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    step * (0.5 * values[0] + inner + 0.5 * values[values.len() - 1])
}

// ── gradient checking ────────────────────────────────────────────────

/// Relative error with an absolute floor of one in the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check one differentiable construction against central finite
/// differences. `build` assembles a graph from leaves created from the
/// inputs; the harness reduces its output to a scalar through a fixed
/// random projection, so directionally wrong gradients cannot cancel.
/// Returns the worst elementwise relative error over all inputs.
pub fn gradcheck(
    inputs: &[Tensor],
    build: &dyn Fn(&Tape, &[NodeId]) -> Result<NodeId>,
    projection_seed: u64,
) -> f64 {
    let run = |tensors: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
        let tape = Tape::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &leaves).expect("graph construction");
        let out_shape = tape.shape(out);
        let mut w = Tensor::zeros(&out_shape);
        let mut rng = Rng::new(projection_seed);
        for v in w.data_mut() {
            *v = rng.uniform_in(0.5, 1.5);
        }
        let root = tape
            .sum(tape.mul(out, tape.constant(w)).expect("projection"))
            .expect("reduction");
        (tape, leaves, root)
    };

    let (tape, leaves, root) = run(inputs);
    tape.backward(root).expect("backward");
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(leaves[idx]);
        let mut probe_inputs: Vec<Tensor> = inputs.to_vec();
        let fd = finite_difference_gradient(
            &mut |t: &Tensor| {
                probe_inputs[idx] = t.clone();
                let (tape, _, root) = run(&probe_inputs);
                tape.value_item(root)
            },
            input,
            1e-5,
        )
        .expect("finite differences");
        for (a, b) in analytic.data().iter().zip(fd.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

/// All trainable tensors of an MNF layer, in the exact order `mnf_nodes`
/// registers them.
pub fn collect_mnf_tensors(p: &mut MnfLayerParams) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::new();
    out.push(&mut p.posterior.mu);
    out.push(&mut p.posterior.rho);
    for (_, t) in p.flow.tensors_mut() {
        out.push(t);
    }
    out.push(&mut p.aux.c);
    out.push(&mut p.aux.b1);
    out.push(&mut p.aux.b2);
    for (_, t) in p.aux.inverse_flow.tensors_mut() {
        out.push(t);
    }
    out
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform_in(lo, hi);
    }
    t
}

pub fn random_normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal_scaled(0.0, std);
    }
    t
}
