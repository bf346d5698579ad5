//! Built-in synthetic dataset: class 1 adds a Gaussian-intensity ellipsoid
//! of random centre and size to low-level noise, class 0 is noise only.
//! Volumes are generated directly in normalized [0, 1] intensity space.

use crate::dataset::{LabeledSample, SourceClass};
use crate::nifti::Volume;
use crate::rng::Rng;
use crate::tensor::Tensor;

const NOISE_LEVEL: f64 = 0.2;

/// Generate one volume. `class1` controls whether a blob is present.
pub fn blob_volume(shape: [usize; 3], class1: bool, rng: &mut Rng) -> Volume {
    let mut t = Tensor::zeros(&shape);
    for v in t.data_mut() {
        *v = rng.uniform() * NOISE_LEVEL;
    }
    if class1 {
        // random centre inside the central half, axis radii 15-30% of extent
        let mut center = [0.0; 3];
        let mut radius = [0.0; 3];
        for a in 0..3 {
            let e = shape[a] as f64;
            center[a] = rng.uniform_in(0.25 * e, 0.75 * e);
            radius[a] = rng.uniform_in(0.15 * e, 0.30 * e);
        }
        let amplitude = rng.uniform_in(0.5, 0.9);
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let d2 = ((x as f64 - center[0]) / radius[0]).powi(2)
                        + ((y as f64 - center[1]) / radius[1]).powi(2)
                        + ((z as f64 - center[2]) / radius[2]).powi(2);
                    let idx = [x, y, z];
                    let v = t.at(&idx) + amplitude * (-0.5 * d2).exp();
                    t.set(&idx, v);
                }
            }
        }
    }
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut vol = Volume::new(t, [1.0; 3], "synthetic").expect("rank 3 by construction");
    vol.log_transform(if class1 { "blob" } else { "noise" });
    vol
}

/// Generate `n` samples with alternating classes (even index = class 0).
/// Blobby volumes are labelled CT-3, clean ones CT-0.
pub fn blob_dataset(n: usize, shape: [usize; 3], seed: u64) -> Vec<LabeledSample> {
    let root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let class1 = i % 2 == 1;
            let volume = blob_volume(shape, class1, &mut rng);
            let class = if class1 { SourceClass::Ct3 } else { SourceClass::Ct0 };
            LabeledSample::new(volume, class)
        })
        .collect()
}
