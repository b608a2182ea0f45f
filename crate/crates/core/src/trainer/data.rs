use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::extreme::{extract_extreme_points, ExtremePointSet};
use crate::heatmap::render_heatmaps;
use crate::losses::BatchRole;
use crate::nn::Tensor;
use crate::volume::{resample_mask, resample_volume, window_normalize, Interpolation, SegmentationMask, Shape3, Spacing3, Volume};

use super::audit::DataAccess;
use super::config::TrainConfig;

/// One study prepared on the model grid.
#[derive(Clone, Debug)]
pub struct Sample {
    pub study_id: String,
    pub role: BatchRole,
    /// `[1, 1, x, y, z]`, intensities windowed to `[0, 1]`.
    pub image: Tensor,
    /// `[1, 1, x, y, z]` binary mask, source studies only.
    pub mask: Option<Tensor>,
    /// `[1, 6, x, y, z]` rendered extreme-point heatmaps, when points are known.
    pub heat: Option<Tensor>,
    pub native_shape: Shape3,
    pub spacing_mm: Spacing3,
}

fn single(shape: Shape3, channels: usize, data: Vec<f32>) -> Result<Tensor> {
    Tensor::from_vec([1, channels, shape[0], shape[1], shape[2]], data)
}

pub fn image_tensor(vol: &Volume, model_shape: Shape3, window: (f32, f32)) -> Result<Tensor> {
    let w = window_normalize(vol, window.0, window.1)?;
    let r = resample_volume(&w, model_shape, Interpolation::Linear)?;
    single(model_shape, 1, r.voxels.iter().copied().collect())
}

pub fn mask_tensor(m: &SegmentationMask, model_shape: Shape3) -> Result<Tensor> {
    let r = resample_mask(m, model_shape)?;
    single(model_shape, 1, r.voxels.iter().map(|&v| v as f32).collect())
}

/// Heatmaps for points given on the native grid, rendered on the model grid.
pub fn heat_tensor(points: &ExtremePointSet, native: Shape3, model_shape: Shape3, sigma_vox: f64) -> Result<Tensor> {
    points.check_bounds(native)?;
    let mapped = points.map_to_grid(native, model_shape);
    let h = render_heatmaps(&mapped, model_shape, sigma_vox)?;
    let mut data = Vec::with_capacity(6 * model_shape.iter().product::<usize>());
    for c in &h.channels {
        data.extend(c.iter().copied());
    }
    single(model_shape, 6, data)
}

/// Indices of the source studies used for training, testing and validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// 70/20/10 train/test/validation split, shuffled by `seed`; every part gets
/// at least one study.
pub fn split_source(n: usize, seed: u64) -> Result<SourceSplit> {
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 source studies, got {n}")));
    }
    let val = ((0.1 * n as f64).round() as usize).max(1);
    let test = ((0.2 * n as f64).round() as usize).max(1);
    let train = n - val - test;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SourceSplit {
        train: idx[..train].to_vec(),
        test: idx[train..train + test].to_vec(),
        val: idx[train + test..].to_vec(),
    })
}

/// How many non-evaluation and evaluation target studies contribute point
/// supervision at a given fraction: `ceil(f * N)` in total, with the
/// evaluation set getting `ceil(f * N_eval)` of them.
pub fn ps_counts(n_train: usize, n_eval: usize, fraction: f64) -> (usize, usize) {
    let total = ((fraction * (n_train + n_eval) as f64) - 1e-9).ceil().max(0.0) as usize;
    let eval = (((fraction * n_eval as f64) - 1e-9).ceil().max(0.0) as usize).min(n_eval).min(total);
    (total - eval, eval)
}

pub fn load_source(
    manifest: &CorpusManifest,
    indices: &[usize],
    config: &TrainConfig,
    access: &DataAccess,
) -> Result<Vec<Sample>> {
    indices
        .iter()
        .map(|&i| {
            let s = &manifest.source_studies[i];
            let vol = access.volume(&manifest.resolve(&s.volume), &s.study_id)?;
            let mask = access.mask(&manifest.resolve(&s.mask), &s.study_id)?;
            if mask.shape() != vol.shape() {
                return Err(Error::ShapeMismatch {
                    expected: vol.shape().to_vec(),
                    actual: mask.shape().to_vec(),
                });
            }
            let points = extract_extreme_points(&mask)?;
            Ok(Sample {
                study_id: s.study_id.clone(),
                role: BatchRole::SOURCE,
                image: image_tensor(&vol, config.model_shape, config.window_hu)?,
                mask: Some(mask_tensor(&mask, config.model_shape)?),
                heat: Some(heat_tensor(&points, vol.shape(), config.model_shape, config.sigma_vox)?),
                native_shape: vol.shape(),
                spacing_mm: vol.spacing_mm,
            })
        })
        .collect()
}

fn target_sample(vol: &Volume, points: Option<&ExtremePointSet>, config: &TrainConfig) -> Result<Sample> {
    let heat = points
        .map(|p| heat_tensor(p, vol.shape(), config.model_shape, config.sigma_vox))
        .transpose()?;
    Ok(Sample {
        study_id: vol.study_id.clone(),
        role: if heat.is_some() { BatchRole::TARGET_PS } else { BatchRole::TARGET_UNLABELLED },
        image: image_tensor(vol, config.model_shape, config.window_hu)?,
        mask: None,
        heat,
        native_shape: vol.shape(),
        spacing_mm: vol.spacing_mm,
    })
}

/// Target studies (non-evaluation then evaluation) for adversarial training.
///
/// Point files are opened only for the studies selected by the fraction,
/// and never when the variant ignores target points. Evaluation masks are
/// never opened.
pub fn load_target(manifest: &CorpusManifest, config: &TrainConfig, access: &DataAccess) -> Result<Vec<Sample>> {
    let use_ps = config.variant.uses_target_ps();
    let (k_train, k_eval) = if use_ps {
        ps_counts(manifest.n_target_train(), manifest.evaluation_studies.len(), config.ps_fraction)
    } else {
        (0, 0)
    };
    if k_train > manifest.target_ps_studies.len() {
        return Err(Error::invalid(format!(
            "fraction {} needs {k_train} point-labelled target studies, corpus has {}",
            config.ps_fraction,
            manifest.target_ps_studies.len()
        )));
    }
    let mut out = Vec::new();
    for (i, s) in manifest.target_ps_studies.iter().enumerate() {
        let vol = access.volume(&manifest.resolve(&s.volume), &s.study_id)?;
        let points = if i < k_train {
            Some(access.points(&manifest.resolve(&s.ps))?)
        } else {
            None
        };
        out.push(target_sample(&vol, points.as_ref(), config)?);
    }
    for s in &manifest.target_unlabelled_studies {
        let vol = access.volume(&manifest.resolve(&s.volume), &s.study_id)?;
        out.push(target_sample(&vol, None, config)?);
    }
    for (i, s) in manifest.evaluation_studies.iter().enumerate() {
        let vol = access.volume(&manifest.resolve(&s.volume), &s.study_id)?;
        let points = if i < k_eval {
            Some(access.points(&manifest.resolve(&s.ps))?)
        } else {
            None
        };
        out.push(target_sample(&vol, points.as_ref(), config)?);
    }
    Ok(out)
}

/// Everything the trainer reads from disk.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub split: SourceSplit,
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl TrainingData {
    pub fn load(manifest: &CorpusManifest, config: &TrainConfig, access: &DataAccess) -> Result<Self> {
        if manifest.source_studies.is_empty() {
            return Err(Error::invalid("manifest has no source studies"));
        }
        let split = split_source(manifest.source_studies.len(), manifest.seed)?;
        let source_train = load_source(manifest, &split.train, config, access)?;
        let source_val = load_source(manifest, &split.val, config, access)?;
        let target = if config.variant.adapts() {
            load_target(manifest, config, access)?
        } else {
            Vec::new()
        };
        Ok(Self {
            split,
            source_train,
            source_val,
            target,
        })
    }

    /// Number of target items carrying point supervision.
    pub fn n_target_ps(&self) -> usize {
        self.target.iter().filter(|s| s.heat.is_some()).count()
    }
}

/// Deterministic generator for one pass over a data set.
pub fn epoch_rng(seed: u64, stream: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | (epoch & 0xffff_ffff));
    rng
}

/// Shuffled visiting order of `n` items.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Shuffle point-labelled and unlabelled target items separately, then
/// interleave them so every prefix keeps their overall proportion.
pub fn stratified_order(samples: &[Sample], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ps: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].heat.is_some()).collect();
    let mut un: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].heat.is_none()).collect();
    ps.shuffle(rng);
    un.shuffle(rng);
    let (np, nu) = (ps.len(), un.len());
    let mut out = Vec::with_capacity(np + nu);
    let (mut a, mut b) = (0, 0);
    while a < np || b < nu {
        // take from the stratum that is furthest behind its share
        let take_ps = b >= nu || (a < np && (a as f64 + 0.5) / np as f64 <= (b as f64 + 0.5) / nu as f64);
        if take_ps {
            out.push(ps[a]);
            a += 1;
        } else {
            out.push(un[b]);
            b += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        let s = split_source(40, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (28, 8, 4));
        let s = split_source(8, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (5, 2, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.val).copied().collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(split_source(2, 0).is_err());
    }

    #[test]
    fn ps_counts_follow_the_ceiling_rule() {
        assert_eq!(ps_counts(40, 10, 1.0), (40, 10));
        assert_eq!(ps_counts(40, 10, 0.25), (10, 3));
        assert_eq!(ps_counts(40, 10, 0.5), (20, 5));
        assert_eq!(ps_counts(16, 4, 0.5), (8, 2));
        for (n, e, f) in [(7usize, 3usize, 0.3f64), (40, 10, 0.33), (5, 5, 0.1)] {
            let (a, b) = ps_counts(n, e, f);
            assert_eq!(a + b, (f * (n + e) as f64).ceil() as usize);
        }
    }

    fn fake(ps: bool) -> Sample {
        Sample {
            study_id: String::new(),
            role: if ps { BatchRole::TARGET_PS } else { BatchRole::TARGET_UNLABELLED },
            image: Tensor::zeros([1, 1, 1, 1, 1]),
            mask: None,
            heat: ps.then(|| Tensor::zeros([1, 6, 1, 1, 1])),
            native_shape: [1, 1, 1],
            spacing_mm: [1.0; 3],
        }
    }

    #[test]
    fn stratified_order_interleaves_proportionally() {
        let samples: Vec<Sample> = (0..12).map(|i| fake(i % 3 == 0)).collect();
        let order = stratified_order(&samples, &mut epoch_rng(0, 0, 0));
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        for w in order.chunks(3) {
            assert_eq!(w.iter().filter(|&&i| samples[i].heat.is_some()).count(), 1);
        }
        assert_eq!(order, stratified_order(&samples, &mut epoch_rng(0, 0, 0)));
    }
}
