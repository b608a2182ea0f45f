//! Volumes, masks and probability maps on a common voxel grid, plus the
//! grid-level operations used throughout the pipeline: resampling, intensity
//! windowing, binarization and Dice overlap.
//!
//! Grids are stored as `Array3` indexed `(i, j, k)` along `(x, y, z)`.

use std::collections::VecDeque;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];
pub type Spacing3 = [f64; 3];

fn check_spacing(spacing: &Spacing3) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")))
    }
}

fn dims(a: &Array3<impl Sized>) -> Shape3 {
    let (x, y, z) = a.dim();
    [x, y, z]
}

/// A 3D scalar image with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing_mm: Spacing3,
    pub study_id: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing_mm: Spacing3, study_id: impl Into<String>) -> Result<Self> {
        check_spacing(&spacing_mm)?;
        if voxels.is_empty() {
            return Err(Error::invalid("volume has an empty grid"));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite intensities"));
        }
        Ok(Self {
            voxels,
            spacing_mm,
            study_id: study_id.into(),
        })
    }

    pub fn shape(&self) -> Shape3 {
        dims(&self.voxels)
    }
}

/// Binary foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub voxels: Array3<u8>,
    pub spacing_mm: Spacing3,
    pub study_id: String,
}

impl SegmentationMask {
    pub fn new(voxels: Array3<u8>, spacing_mm: Spacing3, study_id: impl Into<String>) -> Result<Self> {
        check_spacing(&spacing_mm)?;
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            voxels,
            spacing_mm,
            study_id: study_id.into(),
        })
    }

    /// Build a mask from any predicate-like grid; nonzero values become foreground.
    pub fn from_bool(voxels: Array3<bool>, spacing_mm: Spacing3, study_id: impl Into<String>) -> Result<Self> {
        Self::new(voxels.mapv(u8::from), spacing_mm, study_id)
    }

    pub fn shape(&self) -> Shape3 {
        dims(&self.voxels)
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn contains(&self, ijk: [usize; 3]) -> bool {
        self.voxels.get(ijk).is_some_and(|&v| v != 0)
    }
}

/// Soft prediction counterpart of [`SegmentationMask`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub voxels: Array3<f32>,
    pub spacing_mm: Spacing3,
}

impl ProbabilityMap {
    pub fn new(voxels: Array3<f32>, spacing_mm: Spacing3) -> Result<Self> {
        check_spacing(&spacing_mm)?;
        if voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(Self { voxels, spacing_mm })
    }

    pub fn shape(&self) -> Shape3 {
        dims(&self.voxels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Source coordinate of a destination voxel center when an axis of `n_src`
/// voxels is resampled to `n_dst` voxels over the same physical extent.
pub fn source_coordinate(dst: usize, n_src: usize, n_dst: usize) -> f64 {
    let c = (dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5;
    c.clamp(0.0, (n_src - 1) as f64)
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

fn linear_taps(n_src: usize, n_dst: usize) -> AxisTaps {
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(n_dst),
        hi: Vec::with_capacity(n_dst),
        w: Vec::with_capacity(n_dst),
    };
    for d in 0..n_dst {
        let c = source_coordinate(d, n_src, n_dst);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w.push(c - lo as f64);
    }
    taps
}

fn nearest_index(dst: usize, n_src: usize, n_dst: usize) -> usize {
    (((dst as f64 + 0.5) * n_src as f64 / n_dst as f64).floor() as usize).min(n_src - 1)
}

fn check_target(target: Shape3) -> Result<()> {
    if target.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "target shape components must be >= 2, got {target:?}"
        )));
    }
    Ok(())
}

fn rescale_spacing(spacing: Spacing3, src: Shape3, dst: Shape3) -> Spacing3 {
    [0, 1, 2].map(|a| spacing[a] * src[a] as f64 / dst[a] as f64)
}

/// Resample a floating-point grid; shared by volumes and probability maps.
pub fn resample_grid(src: &Array3<f32>, target: Shape3, mode: Interpolation) -> Array3<f32> {
    let s = dims(src);
    match mode {
        Interpolation::Nearest => {
            let ix: Vec<_> = (0..target[0]).map(|d| nearest_index(d, s[0], target[0])).collect();
            let iy: Vec<_> = (0..target[1]).map(|d| nearest_index(d, s[1], target[1])).collect();
            let iz: Vec<_> = (0..target[2]).map(|d| nearest_index(d, s[2], target[2])).collect();
            Array3::from_shape_fn(target, |(i, j, k)| src[[ix[i], iy[j], iz[k]]])
        }
        Interpolation::Linear => {
            let tx = linear_taps(s[0], target[0]);
            let ty = linear_taps(s[1], target[1]);
            let tz = linear_taps(s[2], target[2]);
            Array3::from_shape_fn(target, |(i, j, k)| {
                let mut acc = 0.0f64;
                for (xi, wx) in [(tx.lo[i], 1.0 - tx.w[i]), (tx.hi[i], tx.w[i])] {
                    if wx == 0.0 {
                        continue;
                    }
                    for (yi, wy) in [(ty.lo[j], 1.0 - ty.w[j]), (ty.hi[j], ty.w[j])] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (zi, wz) in [(tz.lo[k], 1.0 - tz.w[k]), (tz.hi[k], tz.w[k])] {
                            if wz == 0.0 {
                                continue;
                            }
                            acc += wx * wy * wz * src[[xi, yi, zi]] as f64;
                        }
                    }
                }
                acc as f32
            })
        }
    }
}

/// Resample a volume to `target_shape`, preserving its physical extent.
pub fn resample_volume(v: &Volume, target_shape: Shape3, mode: Interpolation) -> Result<Volume> {
    check_target(target_shape)?;
    Ok(Volume {
        voxels: resample_grid(&v.voxels, target_shape, mode),
        spacing_mm: rescale_spacing(v.spacing_mm, v.shape(), target_shape),
        study_id: v.study_id.clone(),
    })
}

/// Nearest-neighbour resampling of a mask (the only valid mode for labels).
pub fn resample_mask(m: &SegmentationMask, target_shape: Shape3) -> Result<SegmentationMask> {
    check_target(target_shape)?;
    let s = m.shape();
    let ix: Vec<_> = (0..target_shape[0]).map(|d| nearest_index(d, s[0], target_shape[0])).collect();
    let iy: Vec<_> = (0..target_shape[1]).map(|d| nearest_index(d, s[1], target_shape[1])).collect();
    let iz: Vec<_> = (0..target_shape[2]).map(|d| nearest_index(d, s[2], target_shape[2])).collect();
    Ok(SegmentationMask {
        voxels: Array3::from_shape_fn(target_shape, |(i, j, k)| m.voxels[[ix[i], iy[j], iz[k]]]),
        spacing_mm: rescale_spacing(m.spacing_mm, s, target_shape),
        study_id: m.study_id.clone(),
    })
}

pub fn resample_probability(p: &ProbabilityMap, target_shape: Shape3, mode: Interpolation) -> Result<ProbabilityMap> {
    check_target(target_shape)?;
    Ok(ProbabilityMap {
        voxels: resample_grid(&p.voxels, target_shape, mode).mapv(|v| v.clamp(0.0, 1.0)),
        spacing_mm: rescale_spacing(p.spacing_mm, p.shape(), target_shape),
    })
}

/// Linear intensity window: `clip((x - lo) / (hi - lo), 0, 1)`.
pub fn window_normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("window requires lo < hi, got [{lo}, {hi}]")));
    }
    let width = hi - lo;
    Ok(Volume {
        voxels: v.voxels.mapv(|x| ((x - lo) / width).clamp(0.0, 1.0)),
        spacing_mm: v.spacing_mm,
        study_id: v.study_id.clone(),
    })
}

/// Dice-Sørensen coefficient; 1.0 when both masks are empty.
pub fn dice_score(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    Zip::from(&a.voxels).and(&b.voxels).for_each(|&x, &y| {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    });
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Foreground wherever `p >= threshold`.
pub fn binarize(p: &ProbabilityMap, threshold: f32) -> Result<SegmentationMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(SegmentationMask {
        voxels: p.voxels.mapv(|v| u8::from(v >= threshold)),
        spacing_mm: p.spacing_mm,
        study_id: String::new(),
    })
}

/// Keep only the largest 6-connected foreground component.
pub fn largest_component(m: &SegmentationMask) -> SegmentationMask {
    let shape = m.shape();
    let mut label = Array3::<u32>::zeros(shape);
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for ((i, j, k), &v) in m.voxels.indexed_iter() {
        if v == 0 || label[[i, j, k]] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0usize;
        label[[i, j, k]] = next;
        queue.push_back([i, j, k]);
        while let Some(p) = queue.pop_front() {
            size += 1;
            for axis in 0..3 {
                for delta in [-1isize, 1] {
                    let c = p[axis] as isize + delta;
                    if c < 0 || c >= shape[axis] as isize {
                        continue;
                    }
                    let mut q = p;
                    q[axis] = c as usize;
                    if m.voxels[q] != 0 && label[q] == 0 {
                        label[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    SegmentationMask {
        voxels: label.mapv(|l| u8::from(l != 0 && l == best.0)),
        spacing_mm: m.spacing_mm,
        study_id: m.study_id.clone(),
    }
}
