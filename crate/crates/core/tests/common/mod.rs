#![allow(dead_code)]

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ugda::corpus::{build_corpus, CorpusConfig, CorpusManifest};
use ugda::extreme::{Axis, ExtremePointSet, PointSource, Side, Slot};
use ugda::losses::BatchRole;
use ugda::networks::{DiscriminatorConfig, PhnnConfig};
use ugda::nn::Tensor;
use ugda::phantom::{Domain, PhantomParams};
use ugda::trainer::data::{Sample, SourceSplit, TrainingData};
use ugda::trainer::{TrainConfig, Variant};
use ugda::volume::{ProbabilityMap, SegmentationMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random mask on a random grid up to `max` per axis: a union of boxes plus
/// salt noise, sometimes empty.
pub fn random_mask(r: &mut ChaCha8Rng, max: usize) -> SegmentationMask {
    let shape = [r.gen_range(1..=max), r.gen_range(1..=max), r.gen_range(1..=max)];
    let mut v = Array3::<u8>::zeros(shape);
    if r.gen_bool(0.95) {
        for _ in 0..r.gen_range(1..4) {
            let lo: [usize; 3] = [0, 1, 2].map(|a| r.gen_range(0..shape[a]));
            let hi: [usize; 3] = [0, 1, 2].map(|a| r.gen_range(lo[a]..shape[a]));
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        v[[i, j, k]] = 1;
                    }
                }
            }
        }
        let salt = r.gen_range(0.0..0.02);
        v.mapv_inplace(|x| if r.gen_bool(salt) { 1 - x } else { x });
    }
    let spacing = [r.gen_range(0.5..3.0), r.gen_range(0.5..3.0), r.gen_range(0.5..5.0)];
    SegmentationMask::new(v, spacing, "rand").unwrap()
}

pub fn random_probability(r: &mut ChaCha8Rng, shape: [usize; 3]) -> ProbabilityMap {
    let v = Array3::from_shape_fn(shape, |_| r.gen_range(0.0f32..1.0));
    ProbabilityMap::new(v, [1.0; 3]).unwrap()
}

pub fn brute_dice(a: &SegmentationMask, b: &SegmentationMask) -> f64 {
    let va: Vec<bool> = a.voxels.iter().map(|&x| x != 0).collect();
    let vb: Vec<bool> = b.voxels.iter().map(|&x| x != 0).collect();
    let inter = va.iter().zip(&vb).filter(|(x, y)| **x && **y).count();
    let total = va.iter().filter(|x| **x).count() + vb.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Extreme points by exhaustive search: for each slot take the extremal
/// slice, then the voxel minimising squared distance to the slice centroid
/// (compared exactly in rationals), ties broken lexicographically.
pub fn brute_extreme_points(m: &SegmentationMask) -> Option<[[usize; 3]; 6]> {
    let fg: Vec<[usize; 3]> = m
        .voxels
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((i, j, k), _)| [i, j, k])
        .collect();
    if fg.is_empty() {
        return None;
    }
    let mut out = [[0usize; 3]; 6];
    for slot in Slot::ALL {
        let a = slot.axis.index();
        let target = match slot.side {
            Side::Min => fg.iter().map(|p| p[a]).min().unwrap(),
            Side::Max => fg.iter().map(|p| p[a]).max().unwrap(),
        };
        let slice: Vec<[usize; 3]> = fg.iter().copied().filter(|p| p[a] == target).collect();
        let n = slice.len() as i64;
        let sum: [i64; 3] = [0, 1, 2].map(|d| slice.iter().map(|p| p[d] as i64).sum());
        let mut best = slice[0];
        let mut best_key = i64::MAX;
        for p in &slice {
            let key: i64 = (0..3).map(|d| (n * p[d] as i64 - sum[d]).pow(2)).sum();
            if key < best_key || (key == best_key && *p < best) {
                best_key = key;
                best = *p;
            }
        }
        out[slot.index()] = best;
    }
    Some(out)
}

pub fn brute_mxa(pred: &SegmentationMask, gt: &[[usize; 3]; 6], spacing: [f64; 3]) -> Option<f64> {
    let p = brute_extreme_points(pred)?;
    let mut total = 0.0;
    for s in 0..6 {
        let d2: f64 = (0..3)
            .map(|a| ((p[s][a] as f64 - gt[s][a] as f64) * spacing[a]).powi(2))
            .sum();
        total += d2.sqrt();
    }
    Some(total / 6.0)
}

pub fn point_set(id: &str, spacing: [f64; 3], points: [[usize; 3]; 6]) -> ExtremePointSet {
    ExtremePointSet::new(id, spacing, PointSource::HumanClick, points).unwrap()
}

pub fn slot(axis: Axis, side: Side) -> Slot {
    Slot { axis, side }
}

/// Small networks on a 16³ grid for fast tests.
pub fn toy_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::for_variant(variant);
    c.seed = seed;
    c.model_shape = [16, 16, 16];
    c.heatmap_net = PhnnConfig {
        stage_channels: vec![4, 8],
        ..PhnnConfig::heatmap()
    };
    c.seg_net = PhnnConfig {
        stage_channels: vec![4, 8],
        ..PhnnConfig::segmentation()
    };
    c.discriminator = DiscriminatorConfig {
        channels: vec![4, 8],
        dilations: vec![2],
        ..c.discriminator
    };
    c.sigma_vox = 2.0;
    c
}

fn ball_sample(r: &mut ChaCha8Rng, id: &str, role: BatchRole, shape: [usize; 3]) -> Sample {
    let c: [f64; 3] = [0, 1, 2].map(|a| shape[a] as f64 / 2.0 + r.gen_range(-1.5..1.5));
    let rad = r.gen_range(3.0..5.0);
    let inside = |i: usize, j: usize, k: usize| {
        let p = [i, j, k];
        (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= rad * rad
    };
    let n: usize = shape.iter().product();
    let mut img = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let f = inside(i, j, k);
                img.push(if f { 0.7 } else { 0.2 } + r.gen_range(-0.05f32..0.05));
                mask.push(f as u8 as f32);
            }
        }
    }
    let [x, y, z] = shape;
    let image = Tensor::from_vec([1, 1, x, y, z], img).unwrap();
    let m = Tensor::from_vec([1, 1, x, y, z], mask.clone()).unwrap();
    let heat = if role.has_ps {
        let sm = SegmentationMask::new(
            Array3::from_shape_vec(shape, mask.iter().map(|&v| v as u8).collect()).unwrap(),
            [1.0; 3],
            id,
        )
        .unwrap();
        let pts = ugda::extreme::extract_extreme_points(&sm).unwrap();
        Some(ugda::trainer::data::heat_tensor(&pts, shape, shape, 2.0).unwrap())
    } else {
        None
    };
    Sample {
        study_id: id.to_string(),
        role,
        image,
        mask: role.has_mask.then_some(m),
        heat,
        native_shape: shape,
        spacing_mm: [1.0; 3],
    }
}

/// `n_src` source items followed by `n_ps` point-labelled and `n_unl`
/// unlabelled target items.
pub fn toy_samples(seed: u64, shape: [usize; 3], n_src: usize, n_ps: usize, n_unl: usize) -> Vec<Sample> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for i in 0..n_src {
        out.push(ball_sample(&mut r, &format!("src-{i}"), BatchRole::SOURCE, shape));
    }
    for i in 0..n_ps {
        out.push(ball_sample(&mut r, &format!("ps-{i}"), BatchRole::TARGET_PS, shape));
    }
    for i in 0..n_unl {
        out.push(ball_sample(&mut r, &format!("unl-{i}"), BatchRole::TARGET_UNLABELLED, shape));
    }
    out
}

/// A small phantom corpus on a 32×32×16 grid.
pub fn small_corpus(dir: &Path, n_source: usize, n_target: usize, n_eval: usize, ps_fraction: f64) -> CorpusManifest {
    let shape = [32, 32, 16];
    let cfg = CorpusConfig {
        out_dir: dir.to_path_buf(),
        n_source,
        n_target,
        n_eval,
        ps_fraction,
        seed: 11,
        jitter_vox: 0.0,
        source: PhantomParams::desk(Domain::Source).scaled_to(shape),
        target: PhantomParams::desk(Domain::Target).scaled_to(shape),
    };
    build_corpus(&cfg).unwrap()
}

/// Toy training data: 4 source train, 2 source val, 3 target PS, 3 unlabelled.
pub fn toy_data(config: &TrainConfig, seed: u64) -> TrainingData {
    let mut all = toy_samples(seed, config.model_shape, 6, 3, 3);
    let target = all.split_off(6);
    let val = all.split_off(4);
    TrainingData {
        split: SourceSplit {
            train: (0..4).collect(),
            test: vec![],
            val: (4..6).collect(),
        },
        source_train: all,
        source_val: val,
        target,
    }
}
