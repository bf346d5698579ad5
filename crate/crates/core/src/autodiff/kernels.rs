//! Raw tensor kernels behind the tape primitives. All loops are ordered so
//! that parallel execution writes disjoint slices and every element is the
//! result of a fixed sequential reduction, keeping outputs bit-deterministic
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

/// Resolved geometry of one conv3d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub input: [usize; 3],
    pub filters: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad_lo: [usize; 3],
    pub out: [usize; 3],
}

impl ConvDims {
    pub fn out_voxels(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }
}

pub fn conv_dims(
    x_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvDims> {
    if x_shape.len() != 5 || k_shape.len() != 5 {
        return Err(Error::Shape {
            op: "conv3d",
            lhs: x_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Config("conv3d: stride must be >= 1".into()));
    }
    let (batch, in_ch) = (x_shape[0], x_shape[1]);
    let input = [x_shape[2], x_shape[3], x_shape[4]];
    let filters = k_shape[0];
    let kernel = [k_shape[2], k_shape[3], k_shape[4]];
    if k_shape[1] != in_ch {
        return Err(Error::Shape {
            op: "conv3d",
            lhs: x_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    let mut pad_lo = [0usize; 3];
    let mut out = [0usize; 3];
    for a in 0..3 {
        match padding {
            Padding::Valid => {
                if kernel[a] > input[a] {
                    return Err(Error::Shape {
                        op: "conv3d",
                        lhs: x_shape.to_vec(),
                        rhs: k_shape.to_vec(),
                    });
                }
                out[a] = (input[a] - kernel[a]) / stride + 1;
            }
            Padding::Same => {
                out[a] = input[a].div_ceil(stride);
                let needed = (out[a] - 1) * stride + kernel[a];
                let total = needed.saturating_sub(input[a]);
                // symmetric padding, extra voxel on the high side when odd
                pad_lo[a] = total / 2;
            }
        }
    }
    Ok(ConvDims {
        batch,
        in_ch,
        input,
        filters,
        kernel,
        stride,
        pad_lo,
        out,
    })
}

/// Gather the input patches of one batch item into a `(out_voxels, patch_len)`
/// matrix, zero-filling out-of-bounds (padded) positions.
fn im2col(item: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let [ix, iy, iz] = d.input;
    let [kx, ky, kz] = d.kernel;
    let patch = d.patch_len();
    cols.fill(0.0);
    let mut v = 0usize;
    for ox in 0..d.out[0] {
        let bx = (ox * d.stride) as isize - d.pad_lo[0] as isize;
        for oy in 0..d.out[1] {
            let by = (oy * d.stride) as isize - d.pad_lo[1] as isize;
            for oz in 0..d.out[2] {
                let bz = (oz * d.stride) as isize - d.pad_lo[2] as isize;
                let row = &mut cols[v * patch..(v + 1) * patch];
                for c in 0..d.in_ch {
                    let cbase = c * ix * iy * iz;
                    for dx in 0..kx {
                        let sx = bx + dx as isize;
                        if sx < 0 || sx >= ix as isize {
                            continue;
                        }
                        for dy in 0..ky {
                            let sy = by + dy as isize;
                            if sy < 0 || sy >= iy as isize {
                                continue;
                            }
                            // contiguous z-run, clipped to the volume
                            let z0 = bz.max(0);
                            let z1 = (bz + kz as isize).min(iz as isize);
                            if z0 >= z1 {
                                continue;
                            }
                            let src0 = cbase
                                + (sx as usize) * iy * iz
                                + (sy as usize) * iz
                                + z0 as usize;
                            let dst0 = ((c * kx + dx) * ky + dy) * kz + (z0 - bz) as usize;
                            let len = (z1 - z0) as usize;
                            row[dst0..dst0 + len]
                                .copy_from_slice(&item[src0..src0 + len]);
                        }
                    }
                }
                v += 1;
            }
        }
    }
}

/// Scatter-add a `(out_voxels, patch_len)` gradient matrix back onto the
/// input gradient of one batch item. Inverse of `im2col`.
fn col2im_add(cols: &[f64], d: &ConvDims, grad_item: &mut [f64]) {
    let [ix, iy, iz] = d.input;
    let [kx, ky, kz] = d.kernel;
    let patch = d.patch_len();
    let mut v = 0usize;
    for ox in 0..d.out[0] {
        let bx = (ox * d.stride) as isize - d.pad_lo[0] as isize;
        for oy in 0..d.out[1] {
            let by = (oy * d.stride) as isize - d.pad_lo[1] as isize;
            for oz in 0..d.out[2] {
                let bz = (oz * d.stride) as isize - d.pad_lo[2] as isize;
                let row = &cols[v * patch..(v + 1) * patch];
                for c in 0..d.in_ch {
                    let cbase = c * ix * iy * iz;
                    for dx in 0..kx {
                        let sx = bx + dx as isize;
                        if sx < 0 || sx >= ix as isize {
                            continue;
                        }
                        for dy in 0..ky {
                            let sy = by + dy as isize;
                            if sy < 0 || sy >= iy as isize {
                                continue;
                            }
                            let z0 = bz.max(0);
                            let z1 = (bz + kz as isize).min(iz as isize);
                            if z0 >= z1 {
                                continue;
                            }
                            let dst0 = cbase
                                + (sx as usize) * iy * iz
                                + (sy as usize) * iz
                                + z0 as usize;
                            let src0 = ((c * kx + dx) * ky + dy) * kz + (z0 - bz) as usize;
                            for t in 0..(z1 - z0) as usize {
                                grad_item[dst0 + t] += row[src0 + t];
                            }
                        }
                    }
                }
                v += 1;
            }
        }
    }
}

const V_BLOCK: usize = 64;

/// Dot product with eight independent accumulators. The summation order is
/// fixed per code path, so results are reproducible on a given machine; the
/// split lets the loop vectorize.
#[inline(always)]
fn dot_scalar(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut acc = [0.0f64; 8];
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

#[inline(always)]
fn axpy_scalar(dst: &mut [f64], scale: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn dot_fma(a: &[f64], b: &[f64]) -> f64 {
    dot_scalar(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn axpy_fma(dst: &mut [f64], scale: f64, src: &[f64]) {
    axpy_scalar(dst, scale, src)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: required CPU features verified at runtime
        return unsafe { dot_fma(a, b) };
    }
    dot_scalar(a, b)
}

/// `dst += scale * src`.
#[inline]
fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: required CPU features verified at runtime
        return unsafe { axpy_fma(dst, scale, src) };
    }
    axpy_scalar(dst, scale, src)
}

/// 4x2 register tile: eight dot products of four kernel rows against two
/// patch rows, sharing every loaded cache line. Accumulators fit the AVX2
/// register file. All rows must have equal length.
#[inline(always)]
#[allow(clippy::needless_range_loop)]
fn tile4x2_body(k: [&[f64]; 4], c: [&[f64]; 2]) -> [[f64; 2]; 4] {
    let n = k[0].len();
    for r in 1..4 {
        assert_eq!(k[r].len(), n);
    }
    assert_eq!(c[0].len(), n);
    assert_eq!(c[1].len(), n);
    // acc[f][v] holds 4 partial lane sums over t
    let mut acc = [[[0.0f64; 4]; 2]; 4];
    let chunks = n / 4;
    for ch in 0..chunks {
        let t = ch * 4;
        // SAFETY: t + 4 <= n for every row, asserted above
        unsafe {
            let c0 = [
                *c[0].get_unchecked(t),
                *c[0].get_unchecked(t + 1),
                *c[0].get_unchecked(t + 2),
                *c[0].get_unchecked(t + 3),
            ];
            let c1 = [
                *c[1].get_unchecked(t),
                *c[1].get_unchecked(t + 1),
                *c[1].get_unchecked(t + 2),
                *c[1].get_unchecked(t + 3),
            ];
            for (fi, kf) in k.iter().enumerate() {
                let kv = [
                    *kf.get_unchecked(t),
                    *kf.get_unchecked(t + 1),
                    *kf.get_unchecked(t + 2),
                    *kf.get_unchecked(t + 3),
                ];
                let a = &mut acc[fi];
                for l in 0..4 {
                    a[0][l] += kv[l] * c0[l];
                    a[1][l] += kv[l] * c1[l];
                }
            }
        }
    }
    let mut out = [[0.0f64; 2]; 4];
    for fi in 0..4 {
        for vi in 0..2 {
            let a = acc[fi][vi];
            let mut s = (a[0] + a[1]) + (a[2] + a[3]);
            for t in chunks * 4..n {
                s += k[fi][t] * c[vi][t];
            }
            out[fi][vi] = s;
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn tile4x2_fma(k: [&[f64]; 4], c: [&[f64]; 2]) -> [[f64; 2]; 4] {
    tile4x2_body(k, c)
}

#[inline]
fn tile4x2(k: [&[f64]; 4], c: [&[f64]; 2]) -> [[f64; 2]; 4] {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: required CPU features verified at runtime
        return unsafe { tile4x2_fma(k, c) };
    }
    tile4x2_body(k, c)
}

pub fn conv3d_forward(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let d = conv_dims(x.shape(), k.shape(), stride, padding)?;
    let ov = d.out_voxels();
    let patch = d.patch_len();
    let item_in = d.in_ch * d.input.iter().product::<usize>();
    let item_out = d.filters * ov;
    let mut out = vec![0.0; d.batch * item_out];
    let kdata = k.data();

    out.par_chunks_mut(item_out)
        .zip(x.data().par_chunks(item_in))
        .for_each(|(out_item, in_item)| {
            let mut cols = vec![0.0; ov * patch];
            im2col(in_item, &d, &mut cols);
            // f-chunked output rows; v-blocked and 4x4 register-tiled so
            // every kernel/patch row loaded from L2 is reused four ways
            out_item
                .par_chunks_mut(ov * 8.min(d.filters))
                .enumerate()
                .for_each(|(chunk_idx, out_rows)| {
                    let f0 = chunk_idx * 8.min(d.filters);
                    let nf = out_rows.len() / ov;
                    let nf_tiled = nf & !3;
                    for v0 in (0..ov).step_by(V_BLOCK) {
                        let v1 = (v0 + V_BLOCK).min(ov);
                        let v1_tiled = v0 + ((v1 - v0) & !1);
                        for v in (v0..v1_tiled).step_by(2) {
                            let crow = |i: usize| &cols[(v + i) * patch..(v + i + 1) * patch];
                            let c2 = [crow(0), crow(1)];
                            for fb in (0..nf_tiled).step_by(4) {
                                let krow = |i: usize| {
                                    &kdata[(f0 + fb + i) * patch..(f0 + fb + i + 1) * patch]
                                };
                                let tile = tile4x2([krow(0), krow(1), krow(2), krow(3)], c2);
                                for (fi, row) in tile.iter().enumerate() {
                                    let base = (fb + fi) * ov + v;
                                    out_rows[base..base + 2].copy_from_slice(row);
                                }
                            }
                            for fi in nf_tiled..nf {
                                let krow = &kdata[(f0 + fi) * patch..(f0 + fi + 1) * patch];
                                for (i, cv) in c2.iter().enumerate() {
                                    out_rows[fi * ov + v + i] = dot(cv, krow);
                                }
                            }
                        }
                        for v in v1_tiled..v1 {
                            let crow = &cols[v * patch..(v + 1) * patch];
                            for fi in 0..nf {
                                let krow = &kdata[(f0 + fi) * patch..(f0 + fi + 1) * patch];
                                out_rows[fi * ov + v] = dot(crow, krow);
                            }
                        }
                    }
                });
        });

    Ok(Tensor::from_parts(
        vec![d.batch, d.filters, d.out[0], d.out[1], d.out[2]],
        out,
    ))
}

/// Gradients of conv3d w.r.t. input and kernels given the output gradient.
/// Each side is only computed when requested.
#[allow(clippy::type_complexity)]
pub fn conv3d_backward(
    x: &Tensor,
    k: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_x: bool,
    need_k: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    if !need_x && !need_k {
        return Ok((None, None));
    }
    let d = conv_dims(x.shape(), k.shape(), stride, padding)?;
    let ov = d.out_voxels();
    let patch = d.patch_len();
    let item_in = d.in_ch * d.input.iter().product::<usize>();
    let item_out = d.filters * ov;
    let kdata = k.data();

    // per item: (grad_x item, grad_k accumulator); grad_k summed over items after
    let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..d.batch)
        .into_par_iter()
        .map(|b| {
            let go_item = &grad_out.data()[b * item_out..(b + 1) * item_out];

            // grad_k[f] += sum_v go[f][v] * cols[v]
            let mut gk = Vec::new();
            if need_k {
                let in_item = &x.data()[b * item_in..(b + 1) * item_in];
                let mut cols = vec![0.0; ov * patch];
                im2col(in_item, &d, &mut cols);
                gk = vec![0.0; d.filters * patch];
                gk.par_chunks_mut(patch * d.filters.min(8))
                    .enumerate()
                    .for_each(|(chunk_idx, gk_rows)| {
                        let f0 = chunk_idx * d.filters.min(8);
                        let nf = gk_rows.len() / patch;
                        for v in 0..ov {
                            let crow = &cols[v * patch..(v + 1) * patch];
                            for fi in 0..nf {
                                let g = go_item[(f0 + fi) * ov + v];
                                if g == 0.0 {
                                    continue;
                                }
                                let row = &mut gk_rows[fi * patch..(fi + 1) * patch];
                                axpy(row, g, crow);
                            }
                        }
                    });
            }

            // grad_cols[v] = sum_f go[f][v] * k[f], then scatter back
            let mut gx_item = Vec::new();
            if need_x {
                let mut gcols = vec![0.0; ov * patch];
                gcols
                    .par_chunks_mut(V_BLOCK * patch)
                    .enumerate()
                    .for_each(|(blk, gc_rows)| {
                        let v0 = blk * V_BLOCK;
                        let nv = gc_rows.len() / patch;
                        for f in 0..d.filters {
                            let krow = &kdata[f * patch..(f + 1) * patch];
                            for vi in 0..nv {
                                let g = go_item[f * ov + v0 + vi];
                                if g == 0.0 {
                                    continue;
                                }
                                let row = &mut gc_rows[vi * patch..(vi + 1) * patch];
                                axpy(row, g, krow);
                            }
                        }
                    });
                gx_item = vec![0.0; item_in];
                col2im_add(&gcols, &d, &mut gx_item);
            }
            (gx_item, gk)
        })
        .collect();

    let mut gx = vec![0.0; if need_x { d.batch * item_in } else { 0 }];
    let mut gk = vec![0.0; if need_k { d.filters * patch } else { 0 }];
    for (b, (gxi, gki)) in per_item.into_iter().enumerate() {
        if need_x {
            gx[b * item_in..(b + 1) * item_in].copy_from_slice(&gxi);
        }
        for (dst, src) in gk.iter_mut().zip(gki.iter()) {
            *dst += src;
        }
    }
    Ok((
        need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        need_k.then(|| Tensor::from_parts(k.shape().to_vec(), gk)),
    ))
}

/// Non-overlapping max pooling; returns the pooled tensor and, per output
/// element, the flat offset of the winning input voxel (first maximum in
/// scan order on ties).
pub fn maxpool3d_forward(x: &Tensor, window: [usize; 3]) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Shape {
            op: "maxpool3d",
            lhs: s.to_vec(),
            rhs: window.to_vec(),
        });
    }
    let (b, c) = (s[0], s[1]);
    let ext = [s[2], s[3], s[4]];
    for a in 0..3 {
        if window[a] == 0 || window[a] > ext[a] || !ext[a].is_multiple_of(window[a]) {
            return Err(Error::Shape {
                op: "maxpool3d",
                lhs: s.to_vec(),
                rhs: window.to_vec(),
            });
        }
    }
    let out_ext = [ext[0] / window[0], ext[1] / window[1], ext[2] / window[2]];
    let out_n = b * c * out_ext[0] * out_ext[1] * out_ext[2];
    let mut out = vec![0.0; out_n];
    let mut arg = vec![0usize; out_n];
    let data = x.data();
    let (iy, iz) = (ext[1], ext[2]);
    let mut o = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * ext[0] * iy * iz;
            for ox in 0..out_ext[0] {
                for oy in 0..out_ext[1] {
                    for oz in 0..out_ext[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_off = 0usize;
                        for dx in 0..window[0] {
                            for dy in 0..window[1] {
                                for dz in 0..window[2] {
                                    let off = base
                                        + (ox * window[0] + dx) * iy * iz
                                        + (oy * window[1] + dy) * iz
                                        + (oz * window[2] + dz);
                                    if data[off] > best {
                                        best = data[off];
                                        best_off = off;
                                    }
                                }
                            }
                        }
                        out[o] = best;
                        arg[o] = best_off;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, c, out_ext[0], out_ext[1], out_ext[2]], out),
        arg,
    ))
}

/// Per-channel batch statistics of a rank >= 2 tensor laid out `(B, C, ...)`.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

/// Train-mode batch normalization. Returns output, normalized input cache,
/// per-channel inverse std, and the batch statistics (biased variance).
pub fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>, BatchStats)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Shape {
            op: "batchnorm",
            lhs: s.to_vec(),
            rhs: vec![gamma.len()],
        });
    }
    let (b, c) = (s[0], s[1]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape {
            op: "batchnorm",
            lhs: s.to_vec(),
            rhs: vec![gamma.len()],
        });
    }
    if b < 2 {
        return Err(Error::Config(
            "batchnorm: train mode requires batch >= 2".into(),
        ));
    }
    let spatial: usize = s[2..].iter().product();
    let n = (b * spatial) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * spatial;
            for t in 0..spatial {
                acc += data[base + t];
            }
        }
        mean[ci] = acc / n;
        let mut vacc = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * spatial;
            for t in 0..spatial {
                let d = data[base + t] - mean[ci];
                vacc += d * d;
            }
        }
        var[ci] = vacc / n;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * spatial;
            for t in 0..spatial {
                let h = (data[base + t] - mean[ci]) * inv_std[ci];
                xhat[base + t] = h;
                out[base + t] = gamma[ci] * h + beta[ci];
            }
        }
    }
    Ok((
        Tensor::from_parts(s.to_vec(), out),
        xhat,
        inv_std,
        BatchStats { mean, var },
    ))
}

/// Backward of train-mode batchnorm: gradients for input, gamma, beta.
pub fn batchnorm_train_backward(
    grad_out: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    shape: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let n = (b * spatial) as f64;
    let mut gx = vec![0.0; grad_out.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ci in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * spatial;
            for t in 0..spatial {
                sum_g += grad_out[base + t];
                sum_gh += grad_out[base + t] * xhat[base + t];
            }
        }
        ggamma[ci] = sum_gh;
        gbeta[ci] = sum_g;
        let scale = gamma[ci] * inv_std[ci] / n;
        for bi in 0..b {
            let base = (bi * c + ci) * spatial;
            for t in 0..spatial {
                gx[base + t] = scale
                    * (n * grad_out[base + t] - sum_g - xhat[base + t] * sum_gh);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// `out(m,n) = a(m,k) * b(k,n)`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, orow)| {
            for l in 0..k {
                let av = ad[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[l * n..(l + 1) * n];
                axpy(orow, av, brow);
            }
        });
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out(m,n) = a(m,k) * b(n,k)^T`; rows of both operands are contiguous.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[0]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, orow)| {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                orow[j] = dot(arow, brow);
            }
        });
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `out(k,n) = a(m,k)^T * b(m,n)`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; k * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let brow = &bd[i * n..(i + 1) * n];
        for l in 0..k {
            let av = ad[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            axpy(orow, av, brow);
        }
    }
    Ok(Tensor::from_parts(vec![k, n], out))
}

/// Right-aligned (numpy-style) broadcast of `x` to `target`. Axes of extent 1
/// expand; missing leading axes are implicitly 1.
pub fn broadcast_forward(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() > target.len() {
        return Err(Error::Shape {
            op: "broadcast",
            lhs: xs.to_vec(),
            rhs: target.to_vec(),
        });
    }
    // effective source shape, left-padded with 1s
    let rank = target.len();
    let mut src = vec![1usize; rank];
    src[rank - xs.len()..].copy_from_slice(xs);
    for a in 0..rank {
        if src[a] != target[a] && src[a] != 1 {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: xs.to_vec(),
                rhs: target.to_vec(),
            });
        }
    }
    // source strides, 0 on broadcast axes
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for a in (0..rank).rev() {
        strides[a] = if src[a] == 1 { 0 } else { acc };
        acc *= src[a];
    }
    let numel: usize = target.iter().product();
    let mut out = vec![0.0; numel];
    let data = x.data();
    let inner = target[rank - 1];
    let outer = numel / inner;
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut src_off = 0usize;
        for a in 0..rank - 1 {
            src_off += idx[a] * strides[a];
        }
        let dst = &mut out[o * inner..(o + 1) * inner];
        if inner_stride == 0 {
            dst.fill(data[src_off]);
        } else {
            dst.copy_from_slice(&data[src_off..src_off + inner]);
        }
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < target[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(Tensor::from_parts(target.to_vec(), out))
}

/// Reduce the gradient of a broadcast output back onto the source shape.
pub fn broadcast_backward(grad_out: &Tensor, x_shape: &[usize]) -> Vec<f64> {
    let target = grad_out.shape();
    let rank = target.len();
    let mut src = vec![1usize; rank];
    src[rank - x_shape.len()..].copy_from_slice(x_shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for a in (0..rank).rev() {
        strides[a] = if src[a] == 1 { 0 } else { acc };
        acc *= src[a];
    }
    let src_numel: usize = src.iter().product();
    let mut gx = vec![0.0; src_numel];
    let g = grad_out.data();
    let inner = target[rank - 1];
    let outer = g.len() / inner;
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut src_off = 0usize;
        for a in 0..rank - 1 {
            src_off += idx[a] * strides[a];
        }
        let grow = &g[o * inner..(o + 1) * inner];
        if inner_stride == 0 {
            gx[src_off] += grow.iter().sum::<f64>();
        } else {
            for (t, &gv) in grow.iter().enumerate() {
                gx[src_off + t] += gv;
            }
        }
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < target[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i = Tensor::eye(2);
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        // b^T has shape (2,3); a * (b^T)^T == a * b
        let bt = Tensor::new(vec![2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        assert_eq!(matmul_nt(&a, &bt).unwrap().data(), ab.data());
        // a^T has shape (3,2); (a^T)^T * b == a * b
        let at = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        assert_eq!(matmul_tn(&at, &b).unwrap().data(), ab.data());
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let out = conv3d_forward(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(out.data()[0], 8.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let out = conv3d_forward(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let x = Tensor::full(&[1, 1, 3, 3, 3], 2.5);
        let k = Tensor::zeros(&[2, 1, 2, 2, 2]);
        let out = conv3d_forward(&x, &k, 1, Padding::Same).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_too_large_is_shape_error() {
        let x = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        assert!(matches!(
            conv3d_forward(&x, &k, 1, Padding::Valid),
            Err(Error::Shape { op: "conv3d", .. })
        ));
    }

    #[test]
    fn maxpool_takes_window_max() {
        let x = Tensor::new(vec![1, 1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let (out, arg) = maxpool3d_forward(&x, [2, 2, 2]).unwrap();
        assert_eq!(out.data(), &[8.0]);
        assert_eq!(arg, vec![7]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan_order() {
        let x = Tensor::full(&[1, 1, 2, 2, 2], 3.0);
        let (out, arg) = maxpool3d_forward(&x, [2, 2, 2]).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_window_exceeding_extent_errors() {
        let x = Tensor::full(&[1, 1, 1, 1, 1], 0.0);
        assert!(maxpool3d_forward(&x, [2, 2, 2]).is_err());
    }

    #[test]
    fn batchnorm_constant_batch_outputs_beta() {
        let x = Tensor::full(&[2, 3, 2], 5.0);
        let gamma = vec![1.0; 3];
        let beta = vec![0.25; 3];
        let (out, _, _, stats) = batchnorm_train_forward(&x, &gamma, &beta).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.mean, vec![5.0; 3]);
        assert_eq!(stats.var, vec![0.0; 3]);
    }

    #[test]
    fn batchnorm_rejects_batch_of_one() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        assert!(matches!(
            batchnorm_train_forward(&x, &[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn broadcast_bias_pattern() {
        let bias = Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let out = broadcast_forward(&bias, &[3, 2, 2]).unwrap();
        assert_eq!(
            out.data(),
            &[10.0, 10.0, 20.0, 20.0, 10.0, 10.0, 20.0, 20.0, 10.0, 10.0, 20.0, 20.0]
        );
        let g = Tensor::full(&[3, 2, 2], 1.0);
        assert_eq!(broadcast_backward(&g, &[2, 1]), vec![6.0, 6.0]);
    }

    #[test]
    fn broadcast_incompatible_errors() {
        let x = Tensor::full(&[3], 1.0);
        assert!(broadcast_forward(&x, &[2, 2]).is_err());
    }
}
