//! Stochastic 3D augmentation: rotation about the Z axis with trilinear
//! interpolation and zero fill, independent axis flips, and additive
//! Gaussian noise. Outputs stay inside [0, 1] and keep the input shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::Volume;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Maximum rotation magnitude in degrees; the angle is drawn uniformly
    /// from `[-max, +max]`. `None` disables rotation.
    pub rotate_max_deg: Option<f64>,
    /// Flip each axis independently with probability 0.5.
    pub flips: bool,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate_max_deg: Some(20.0),
            flips: true,
            noise_sigma: 0.01,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            rotate_max_deg: None,
            flips: false,
            noise_sigma: 0.0,
        }
    }
}

/// Rotate in the (X, Y) plane about the volume centre by `angle` radians,
/// sampling the source trilinearly with zero fill outside the grid.
pub fn rotate_z(voxels: &Tensor, angle: f64) -> Tensor {
    let s = voxels.shape();
    let (nx, ny, nz) = (s[0], s[1], s[2]);
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    let (cos_t, sin_t) = (angle.cos(), angle.sin());
    let mut out = Tensor::zeros(s);
    for x in 0..nx {
        let dx = x as f64 - cx;
        for y in 0..ny {
            let dy = y as f64 - cy;
            // inverse mapping: rotate the output coordinate back by -angle
            let sx = cx + cos_t * dx + sin_t * dy;
            let sy = cy - sin_t * dx + cos_t * dy;
            for z in 0..nz {
                let v = sample_trilinear(voxels, sx, sy, z as f64);
                out.set(&[x, y, z], v);
            }
        }
    }
    out
}

/// Trilinear sample at a fractional coordinate; zero outside the grid.
pub fn sample_trilinear(voxels: &Tensor, x: f64, y: f64, z: f64) -> f64 {
    let s = voxels.shape();
    let (nx, ny, nz) = (s[0] as isize, s[1] as isize, s[2] as isize);
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let mut acc = 0.0;
    for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
        if wx == 0.0 {
            continue;
        }
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dz, wz) in [(0isize, 1.0 - fz), (1, fz)] {
                if wz == 0.0 {
                    continue;
                }
                let (ix, iy, iz) = (x0 as isize + dx, y0 as isize + dy, z0 as isize + dz);
                if ix < 0 || iy < 0 || iz < 0 || ix >= nx || iy >= ny || iz >= nz {
                    continue; // zero fill
                }
                acc += wx
                    * wy
                    * wz
                    * voxels.at(&[ix as usize, iy as usize, iz as usize]);
            }
        }
    }
    acc
}

/// Reverse one axis of a 3D tensor.
pub fn flip_axis(voxels: &Tensor, axis: usize) -> Tensor {
    let s = voxels.shape();
    let mut out = Tensor::zeros(s);
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                let mut idx = [x, y, z];
                idx[axis] = s[axis] - 1 - idx[axis];
                out.set(&idx, voxels.at(&[x, y, z]));
            }
        }
    }
    out
}

/// Apply the augmentation policy to a normalized volume. Pure given
/// `(volume, rng state)`; the draw order is rotation angle, three flip
/// coins, then the noise field.
pub fn augment(volume: &Volume, rng: &mut Rng, policy: &AugmentPolicy) -> Result<Volume> {
    if policy.noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise sigma must be non-negative, got {}",
            policy.noise_sigma
        )));
    }
    let mut out = volume.clone();
    if let Some(max_deg) = policy.rotate_max_deg {
        let angle = rng.uniform_in(-max_deg, max_deg).to_radians();
        out.voxels = rotate_z(&out.voxels, angle);
        out.log_transform(&format!("rotate_z:{angle:.6}"));
    }
    if policy.flips {
        for axis in 0..3 {
            if rng.bernoulli(0.5) {
                out.voxels = flip_axis(&out.voxels, axis);
                out.log_transform(&format!("flip:{axis}"));
            }
        }
    }
    if policy.noise_sigma > 0.0 {
        for v in out.voxels.data_mut() {
            *v += rng.normal_scaled(0.0, policy.noise_sigma);
        }
        out.log_transform(&format!("noise:{}", policy.noise_sigma));
    }
    for v in out.voxels.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}
