//! Gaussian heatmap rendering of extreme points.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};
use crate::extreme::ExtremePointSet;
use crate::volume::Shape3;

pub const DEFAULT_SIGMA_VOX: f64 = 5.0;

/// Six per-point Gaussian channels plus their clamped sum.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapVolume {
    pub channels: Vec<Array3<f32>>,
    pub summed: Array3<f32>,
    pub sigma_vox: f64,
}

/// Voxelwise sum of the channels, clamped to `[0, 1]`.
pub fn sum_clamped<'a>(channels: impl IntoIterator<Item = &'a Array3<f32>>) -> Array3<f32> {
    let mut iter = channels.into_iter();
    let first = iter.next().expect("at least one channel");
    let mut acc = first.clone();
    for c in iter {
        Zip::from(&mut acc).and(c).for_each(|a, &b| *a += b);
    }
    acc.mapv_inplace(|v| v.clamp(0.0, 1.0));
    acc
}

/// Render one unit-peak Gaussian per extreme point.
pub fn render_heatmaps(e: &ExtremePointSet, shape: Shape3, sigma_vox: f64) -> Result<HeatmapVolume> {
    if !(sigma_vox > 0.0 && sigma_vox.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma_vox}")));
    }
    e.check_bounds(shape)?;
    let inv = 1.0 / (2.0 * sigma_vox * sigma_vox);
    let channels: Vec<Array3<f32>> = e
        .points()
        .iter()
        .map(|p| {
            // separable: exp(-(dx²+dy²+dz²)/2σ²) = gx·gy·gz
            let g = |axis: usize, c: usize| -> f64 {
                let d = c as f64 - p[axis] as f64;
                (-d * d * inv).exp()
            };
            let gx: Vec<f64> = (0..shape[0]).map(|i| g(0, i)).collect();
            let gy: Vec<f64> = (0..shape[1]).map(|j| g(1, j)).collect();
            let gz: Vec<f64> = (0..shape[2]).map(|k| g(2, k)).collect();
            Array3::from_shape_fn(shape, |(i, j, k)| (gx[i] * gy[j] * gz[k]) as f32)
        })
        .collect();
    let summed = sum_clamped(&channels);
    Ok(HeatmapVolume {
        channels,
        summed,
        sigma_vox,
    })
}
