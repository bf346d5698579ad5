//! Shapley-value attribution over 3D voxel patches: exact enumeration for
//! small partitions, a permutation-sampling estimator for larger grids, and
//! a slice-montage overlay rendering.
//!
//! A coalition evaluation composites the explained volume from the patches
//! in the coalition and the baseline elsewhere, then queries the model. The
//! class-1 game attributes `p`; the class-0 game attributes `1 - p`, so its
//! values are the exact negation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::svg::{fmt, SvgDoc};
use crate::tensor::Tensor;

/// Exact enumeration cap: 2^12 coalition evaluations.
pub const MAX_EXACT_PATCHES: usize = 12;
/// Default patch grid for full-size volumes.
pub const DEFAULT_GRID: [usize; 3] = [8, 8, 4];

/// A contiguous axis-aligned block of voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBlock {
    pub x: (usize, usize),
    pub y: (usize, usize),
    pub z: (usize, usize),
}

/// Disjoint contiguous patches covering a volume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPartition {
    pub shape: [usize; 3],
    pub grid: [usize; 3],
    pub blocks: Vec<PatchBlock>,
}

/// Near-equal 1D split: remainders go to the trailing segments.
fn axis_splits(extent: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = extent / parts;
    let rem = extent % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i >= parts - rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Partition a volume into a `(gx, gy, gz)` grid of contiguous blocks.
pub fn partition_volume(shape: [usize; 3], grid: [usize; 3]) -> Result<PatchPartition> {
    for a in 0..3 {
        if grid[a] == 0 || grid[a] > shape[a] {
            return Err(Error::Config(format!(
                "grid {grid:?} incompatible with shape {shape:?}"
            )));
        }
    }
    let xs = axis_splits(shape[0], grid[0]);
    let ys = axis_splits(shape[1], grid[1]);
    let zs = axis_splits(shape[2], grid[2]);
    let mut blocks = Vec::with_capacity(grid.iter().product());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                blocks.push(PatchBlock { x, y, z });
            }
        }
    }
    Ok(PatchPartition { shape, grid, blocks })
}

impl PatchPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Materialize the boolean voxel mask of one patch.
    pub fn mask(&self, idx: usize) -> Vec<bool> {
        let n = self.shape.iter().product();
        let mut mask = vec![false; n];
        let b = &self.blocks[idx];
        for x in b.x.0..b.x.1 {
            for y in b.y.0..b.y.1 {
                for z in b.z.0..b.z.1 {
                    mask[(x * self.shape[1] + y) * self.shape[2] + z] = true;
                }
            }
        }
        mask
    }
}

/// Copy the voxels of the coalition's patches from `volume` over `baseline`.
fn composite(
    volume: &Tensor,
    baseline: &Tensor,
    partition: &PatchPartition,
    coalition: u64,
) -> Tensor {
    let mut out = baseline.clone();
    let [_, ny, nz] = partition.shape;
    for (i, b) in partition.blocks.iter().enumerate() {
        if coalition & (1 << i) == 0 {
            continue;
        }
        for x in b.x.0..b.x.1 {
            for y in b.y.0..b.y.1 {
                let off = (x * ny + y) * nz + b.z.0;
                let len = b.z.1 - b.z.0;
                out.data_mut()[off..off + len]
                    .copy_from_slice(&volume.data()[off..off + len]);
            }
        }
    }
    out
}

/// Per-class attribution values over the patches of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub grid: [usize; 3],
    /// Model output on the all-baseline volume (class-1 probability).
    pub base_value: f64,
    /// Model output on the full volume (class-1 probability).
    pub target_value: f64,
    /// Class-1 Shapley values per patch; the class-0 values are `-values`.
    pub values: Vec<f64>,
    pub baseline: String,
}

impl AttributionMap {
    /// Class-0 view: game `1 - p`, so values negate and the anchor points
    /// complement.
    pub fn class0_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| -v).collect()
    }

    pub fn class0_base_value(&self) -> f64 {
        1.0 - self.base_value
    }

    pub fn class0_target_value(&self) -> f64 {
        1.0 - self.target_value
    }
}

/// Exact Shapley values by full coalition enumeration (patch count <= 12).
pub fn exact_shapley(
    model_fn: &(dyn Fn(&Tensor) -> Result<f64> + Sync),
    volume: &Tensor,
    partition: &PatchPartition,
    baseline: &Tensor,
) -> Result<AttributionMap> {
    let n = partition.len();
    if n > MAX_EXACT_PATCHES {
        return Err(Error::TooManyPatches {
            count: n,
            max: MAX_EXACT_PATCHES,
        });
    }
    check_shapes(volume, partition, baseline)?;
    let coalitions = 1u64 << n;
    // evaluate every coalition once, in parallel, ordered by mask value
    let values: Result<Vec<f64>> = (0..coalitions)
        .into_par_iter()
        .map(|mask| model_fn(&composite(volume, baseline, partition, mask)))
        .collect();
    let values = values?;

    // phi_i = sum_{S without i} |S|!(n-|S|-1)!/n! (f(S+i) - f(S))
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; n];
    for mask in 0..coalitions {
        let s = mask.count_ones() as usize;
        if s == n {
            continue; // full coalition leaves no patch to add
        }
        let weight = fact[s] * fact[n - s - 1] / fact[n];
        for (i, p) in phi.iter_mut().enumerate() {
            if mask & (1 << i) == 0 {
                *p += weight * (values[(mask | (1 << i)) as usize] - values[mask as usize]);
            }
        }
    }
    Ok(AttributionMap {
        grid: partition.grid,
        base_value: values[0],
        target_value: values[(coalitions - 1) as usize],
        values: phi,
        baseline: "zeros".into(),
    })
}

/// Permutation-sampling Shapley estimator: marginal contributions along
/// `n_permutations` random orderings, deterministic per seed.
pub fn sampled_shapley(
    model_fn: &(dyn Fn(&Tensor) -> Result<f64> + Sync),
    volume: &Tensor,
    partition: &PatchPartition,
    baseline: &Tensor,
    n_permutations: usize,
    seed: u64,
) -> Result<AttributionMap> {
    if n_permutations == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    check_shapes(volume, partition, baseline)?;
    let n = partition.len();
    let base_value = model_fn(baseline)?;
    let target_value = model_fn(volume)?;
    let root = Rng::new(seed);

    // each permutation walks one ordering, accumulating marginal gains;
    // permutation results are summed in index order for determinism
    let per_perm: Result<Vec<Vec<f64>>> = (0..n_permutations)
        .into_par_iter()
        .map(|p| {
            let mut rng = root.derive(p as u64);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let mut phi = vec![0.0; n];
            let mut coalition = 0u64;
            let mut prev = base_value;
            for &patch in &order {
                coalition |= 1 << patch;
                let cur = model_fn(&composite(volume, baseline, partition, coalition))?;
                phi[patch] = cur - prev;
                prev = cur;
            }
            Ok(phi)
        })
        .collect();
    let mut phi = vec![0.0; n];
    for perm in per_perm? {
        for (acc, v) in phi.iter_mut().zip(perm) {
            *acc += v;
        }
    }
    for v in phi.iter_mut() {
        *v /= n_permutations as f64;
    }
    Ok(AttributionMap {
        grid: partition.grid,
        base_value,
        target_value,
        values: phi,
        baseline: "zeros".into(),
    })
}

fn check_shapes(volume: &Tensor, partition: &PatchPartition, baseline: &Tensor) -> Result<()> {
    let want: Vec<usize> = partition.shape.to_vec();
    if volume.shape() != want.as_slice() || baseline.shape() != want.as_slice() {
        return Err(Error::Shape {
            op: "shapley",
            lhs: volume.shape().to_vec(),
            rhs: want,
        });
    }
    Ok(())
}

/// Attribution JSON document: `{grid, base_value, target_value, values}`
/// plus the baseline note.
pub fn attribution_to_json(map: &AttributionMap) -> Result<String> {
    serde_json::to_string_pretty(map).map_err(|e| Error::Io(e.to_string()))
}

/// Render an axial-slice montage with a signed diverging overlay (positive
/// red, negative blue, symmetric scale) for both classes, with the model's
/// predicted probabilities in the caption.
pub fn render_attribution_overlay(
    volume: &Tensor,
    partition: &PatchPartition,
    map: &AttributionMap,
) -> String {
    let [nx, ny, nz] = partition.shape;
    let cell = 4.0;
    let slice_w = nx as f64 * cell;
    let slice_h = ny as f64 * cell;
    let gap = 8.0;
    let cols = 4usize.min(nz.max(1));
    let rows = nz.div_ceil(cols);
    let panel_w = cols as f64 * (slice_w + gap) + gap;
    let panel_h = rows as f64 * (slice_h + gap) + gap;
    let width = panel_w * 2.0 + 3.0 * gap;
    let height = panel_h + 90.0;
    let mut doc = SvgDoc::new(width, height);

    let max_abs = map
        .values
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);

    // patch lookup per voxel
    let patch_of = |x: usize, y: usize, z: usize| -> usize {
        partition
            .blocks
            .iter()
            .position(|b| {
                x >= b.x.0 && x < b.x.1 && y >= b.y.0 && y < b.y.1 && z >= b.z.0 && z < b.z.1
            })
            .expect("partition covers the volume")
    };

    for (class, values) in [(0usize, map.class0_values()), (1, map.values.clone())] {
        let x_base = gap + class as f64 * (panel_w + gap);
        doc.text(
            x_base,
            16.0,
            12.0,
            &format!("class {class} attribution"),
        );
        for z in 0..nz {
            let col = z % cols;
            let row = z / cols;
            let sx = x_base + gap + col as f64 * (slice_w + gap);
            let sy = 24.0 + gap + row as f64 * (slice_h + gap);
            for x in 0..nx {
                for y in 0..ny {
                    let v = volume.at(&[x, y, z]);
                    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    let px = sx + x as f64 * cell;
                    let py = sy + y as f64 * cell;
                    doc.rect(
                        px,
                        py,
                        cell,
                        cell,
                        &format!("rgb({g},{g},{g})"),
                        1.0,
                    );
                    let phi = values[patch_of(x, y, z)];
                    let color = if phi >= 0.0 { "red" } else { "blue" };
                    doc.rect(px, py, cell, cell, color, 0.5 * phi.abs() / max_abs);
                }
            }
        }
    }
    doc.text(
        gap,
        height - 40.0,
        13.0,
        &format!(
            "p(class 0) = {} | p(class 1) = {}",
            fmt(map.class0_target_value()),
            fmt(map.target_value)
        ),
    );
    doc.text(
        gap,
        height - 20.0,
        11.0,
        &format!(
            "baseline = {} | base p1 = {} | grid = {}x{}x{}",
            map.baseline,
            fmt(map.base_value),
            map.grid[0],
            map.grid[1],
            map.grid[2]
        ),
    );
    doc.finish()
}
