//! Synthetic abdominal phantoms with a controllable source/target domain shift.
//!
//! A study is a deformed ellipsoidal "organ" (the foreground) inside a body
//! outline, with hypodense lesions that belong to the organ, an adjacent
//! distractor structure of similar density, Gaussian noise and, for the
//! target domain, a low-frequency multiplicative bias field.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extreme::{extract_extreme_points, ExtremePointSet, Slot};
use crate::volume::{SegmentationMask, Shape3, Spacing3, Volume};

/// Intensity window (HU) used to normalise phantom volumes for the networks.
pub const DEFAULT_WINDOW_HU: (f32, f32) = (-160.0, 240.0);

const AIR_HU: f64 = -1000.0;
const MARGIN_VOX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub domain: Domain,
    pub shape: Shape3,
    pub spacing_mm: Spacing3,
    /// Organ centre as a fraction of `n - 1` per axis.
    pub center_frac: [f64; 3],
    pub center_jitter_vox: [f64; 3],
    pub radius_min_vox: [f64; 3],
    pub radius_max_vox: [f64; 3],
    /// Relative radial deformation, in `[0, 1)`.
    pub deformation_amplitude: f64,
    pub deformation_frequency: f64,
    pub lesion_count: [u32; 2],
    pub lesion_radius_vox: [f64; 2],
    pub lesion_contrast_hu: [f64; 2],
    pub body_hu: f64,
    pub organ_hu: f64,
    /// Density of the adjacent non-target structure; `None` disables it.
    pub distractor_hu: Option<f64>,
    pub noise_hu: f64,
    pub bias_amplitude: f64,
}

impl PhantomParams {
    /// Desk-scale defaults (64×64×24) for either domain.
    pub fn desk(domain: Domain) -> Self {
        let source = PhantomParams {
            domain: Domain::Source,
            shape: [64, 64, 24],
            spacing_mm: [6.0, 6.0, 8.0],
            center_frac: [0.42, 0.5, 0.5],
            center_jitter_vox: [2.0, 2.0, 1.0],
            radius_min_vox: [13.0, 10.0, 5.0],
            radius_max_vox: [17.0, 14.0, 7.0],
            deformation_amplitude: 0.1,
            deformation_frequency: 2.0,
            lesion_count: [0, 2],
            lesion_radius_vox: [1.5, 3.0],
            lesion_contrast_hu: [30.0, 60.0],
            body_hu: 20.0,
            organ_hu: 110.0,
            distractor_hu: Some(125.0),
            noise_hu: 12.0,
            bias_amplitude: 0.0,
        };
        match domain {
            Domain::Source => source,
            Domain::Target => PhantomParams {
                domain: Domain::Target,
                deformation_amplitude: 0.18,
                lesion_count: [1, 3],
                lesion_contrast_hu: [30.0, 110.0],
                organ_hu: 140.0,
                distractor_hu: Some(140.0),
                noise_hu: 15.0,
                bias_amplitude: 0.25,
                ..source
            },
        }
    }

    /// Same anatomy on a different grid; radii and jitter scale with the
    /// grid, and shrink further where the boundary margin would be violated.
    pub fn scaled_to(&self, shape: Shape3) -> Self {
        let f = [0, 1, 2].map(|a| shape[a] as f64 / self.shape[a] as f64);
        let mut p = PhantomParams {
            shape,
            spacing_mm: [0, 1, 2].map(|a| self.spacing_mm[a] / f[a]),
            center_jitter_vox: [0, 1, 2].map(|a| self.center_jitter_vox[a] * f[a]),
            radius_min_vox: [0, 1, 2].map(|a| self.radius_min_vox[a] * f[a]),
            radius_max_vox: [0, 1, 2].map(|a| self.radius_max_vox[a] * f[a]),
            lesion_radius_vox: self.lesion_radius_vox.map(|r| r * f[0]),
            ..self.clone()
        };
        for a in 0..3 {
            let n = (shape[a].max(1) - 1) as f64;
            let c = p.center_frac[a] * n;
            let room = c.min(n - c) - MARGIN_VOX;
            let reach = p.radius_max_vox[a] * (1.0 + p.deformation_amplitude) + p.center_jitter_vox[a];
            if reach > room && room > 0.0 {
                let k = 0.999 * room / reach;
                p.radius_min_vox[a] *= k;
                p.radius_max_vox[a] *= k;
                p.center_jitter_vox[a] *= k;
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 8) {
            return Err(Error::invalid(format!("phantom grid {:?} too small", self.shape)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("spacing must be positive"));
        }
        if !(0.0..1.0).contains(&self.deformation_amplitude) {
            return Err(Error::invalid("deformation amplitude must lie in [0, 1)"));
        }
        if !(self.noise_hu >= 0.0) || !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return Err(Error::invalid("noise must be >= 0 and bias amplitude in [0, 1)"));
        }
        if self.lesion_count[0] > self.lesion_count[1]
            || self.lesion_radius_vox[0] > self.lesion_radius_vox[1]
            || self.lesion_contrast_hu[0] > self.lesion_contrast_hu[1]
        {
            return Err(Error::invalid("lesion ranges must be ordered"));
        }
        for a in 0..3 {
            let (lo, hi) = (self.radius_min_vox[a], self.radius_max_vox[a]);
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::invalid(format!("radius range on axis {a} must be positive and ordered")));
            }
            let c = self.center_frac[a] * (self.shape[a] - 1) as f64;
            let reach = hi * (1.0 + self.deformation_amplitude) + self.center_jitter_vox[a];
            if c - reach < MARGIN_VOX || c + reach > (self.shape[a] - 1) as f64 - MARGIN_VOX {
                return Err(Error::invalid(format!(
                    "organ may come within {MARGIN_VOX} voxels of the boundary on axis {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-study seed derived from the master seed and the study id.
pub fn study_seed(master_seed: u64, study_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(study_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Smooth radial perturbation on the unit sphere with values in `[-1, 1]`.
struct Deformation {
    dirs: Vec<[f64; 3]>,
    phases: Vec<f64>,
    freq: f64,
}

impl Deformation {
    fn sample(rng: &mut impl Rng, freq: f64) -> Self {
        let dirs = (0..3).map(|_| UnitSphere.sample(rng)).collect();
        let phases = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        Self { dirs, phases, freq }
    }

    fn eval(&self, u: [f64; 3]) -> f64 {
        let s: f64 = self
            .dirs
            .iter()
            .zip(&self.phases)
            .map(|(d, p)| (self.freq * std::f64::consts::PI * (d[0] * u[0] + d[1] * u[1] + d[2] * u[2]) + p).sin())
            .sum();
        s / self.dirs.len() as f64
    }
}

/// Squared normalised radius of `p` and its direction on the unit sphere.
fn ellipsoid_level(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> (f64, [f64; 3]) {
    let q = [0, 1, 2].map(|a| (p[a] - c[a]) / r[a]);
    let rho2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
    let rho = rho2.sqrt();
    let u = if rho > 0.0 { q.map(|v| v / rho) } else { [1.0, 0.0, 0.0] };
    (rho2, u)
}

/// One phantom study. Deterministic in `(seed, params)`.
pub fn generate_study(seed: u64, params: &PhantomParams) -> Result<(Volume, SegmentationMask)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = params.shape;
    let n = shape.map(|v| v as f64);

    let center: [f64; 3] = [0, 1, 2].map(|a| {
        let j = params.center_jitter_vox[a];
        params.center_frac[a] * (n[a] - 1.0) + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }
    });
    let radii: [f64; 3] = [0, 1, 2].map(|a| {
        let (lo, hi) = (params.radius_min_vox[a], params.radius_max_vox[a]);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    });
    let deform = Deformation::sample(&mut rng, params.deformation_frequency);
    let amp = params.deformation_amplitude;

    let mut organ = Array3::<bool>::from_elem(shape, false);
    for ((i, j, k), v) in organ.indexed_iter_mut() {
        let (rho2, u) = ellipsoid_level([i as f64, j as f64, k as f64], center, radii);
        let bound = if amp > 0.0 { 1.0 + amp * deform.eval(u) } else { 1.0 };
        *v = rho2 <= bound * bound;
    }

    // lesions: hypodense spheres inside the organ
    let n_lesions = rng.gen_range(params.lesion_count[0]..=params.lesion_count[1]);
    let z_scale = params.spacing_mm[0] / params.spacing_mm[2];
    let mut lesions = Vec::new();
    for _ in 0..n_lesions {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let t: f64 = rng.gen_range(0.0..0.6);
        let c = [0, 1, 2].map(|a| center[a] + dir[a] * t * radii[a]);
        let r = rng.gen_range(params.lesion_radius_vox[0]..=params.lesion_radius_vox[1]);
        let contrast = rng.gen_range(params.lesion_contrast_hu[0]..=params.lesion_contrast_hu[1]);
        lesions.push((c, [r, r, (r * z_scale).max(1.0)], contrast));
    }

    let distractor = params.distractor_hu.map(|hu| {
        let rd = [0.4 * radii[0], 0.55 * radii[1], 0.7 * radii[2]];
        let c = [
            center[0] + radii[0] * (1.0 + amp) * 0.85 + rd[0] * 0.8,
            center[1] - 0.3 * radii[1],
            center[2],
        ];
        (c, rd, hu)
    });

    let bias = if params.bias_amplitude > 0.0 {
        let w: [f64; 3] = UnitSphere.sample(&mut rng);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        Some((w, phase))
    } else {
        None
    };

    let noise = Normal::new(0.0, params.noise_hu.max(f64::MIN_POSITIVE)).expect("finite std");
    let body_c = [(n[0] - 1.0) / 2.0, (n[1] - 1.0) / 2.0];
    let body_r = [0.47 * n[0], 0.40 * n[1]];

    let mut voxels = Array3::<f32>::zeros(shape);
    for ((i, j, k), v) in voxels.indexed_iter_mut() {
        let p = [i as f64, j as f64, k as f64];
        let bx = (p[0] - body_c[0]) / body_r[0];
        let by = (p[1] - body_c[1]) / body_r[1];
        let mut hu = if bx * bx + by * by <= 1.0 { params.body_hu } else { AIR_HU };
        if let Some((c, r, d_hu)) = distractor {
            if ellipsoid_level(p, c, r).0 <= 1.0 {
                hu = d_hu;
            }
        }
        if organ[[i, j, k]] {
            hu = params.organ_hu;
            for (c, r, contrast) in &lesions {
                if ellipsoid_level(p, *c, *r).0 <= 1.0 {
                    hu = params.organ_hu - contrast;
                }
            }
        }
        if hu > AIR_HU {
            if let Some((w, phase)) = bias {
                let t = (0..3).map(|a| w[a] * p[a] / n[a]).sum::<f64>();
                hu *= 1.0 + params.bias_amplitude * (std::f64::consts::TAU * t + phase).sin();
            }
        }
        if params.noise_hu > 0.0 {
            hu += noise.sample(&mut rng);
        }
        *v = hu as f32;
    }

    let id = format!("phantom-{seed}");
    let volume = Volume::new(voxels, params.spacing_mm, id.clone())?;
    let mask = SegmentationMask::from_bool(organ, params.spacing_mm, id)?;
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok((volume, mask))
}

/// Extreme points as an annotator would click them, optionally jittered
/// within the extremal slice and pulled back into the mask.
pub fn simulate_ps(m: &SegmentationMask, jitter_vox: f64, seed: u64) -> Result<ExtremePointSet> {
    if !(jitter_vox >= 0.0) {
        return Err(Error::invalid("jitter must be >= 0"));
    }
    let exact = extract_extreme_points(m)?;
    if jitter_vox == 0.0 {
        return Ok(exact);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = m.shape();
    let mut points = *exact.points();
    for slot in Slot::ALL {
        let a = slot.axis.index();
        let p = points[slot.index()];
        let mut cand = [p[0] as f64, p[1] as f64, p[2] as f64];
        for b in (0..3).filter(|&b| b != a) {
            cand[b] = (cand[b] + rng.gen_range(-jitter_vox..=jitter_vox)).round();
        }
        points[slot.index()] = nearest_on_slice(m, a, p[a], cand, shape);
    }
    ExtremePointSet::new(m.study_id.clone(), m.spacing_mm, exact.source, points)
}

/// In-mask voxel on slice `axis = level` nearest to `target`; ties go to the
/// lexicographically smallest index.
fn nearest_on_slice(m: &SegmentationMask, axis: usize, level: usize, target: [f64; 3], shape: Shape3) -> [usize; 3] {
    let mut best: Option<(f64, [usize; 3])> = None;
    let (b, c) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for u in 0..shape[b] {
        for v in 0..shape[c] {
            let mut p = [0usize; 3];
            p[axis] = level;
            p[b] = u;
            p[c] = v;
            if !m.contains(p) {
                continue;
            }
            let d = (u as f64 - target[b]).powi(2) + (v as f64 - target[c]).powi(2);
            if best.map_or(true, |(bd, bp)| d < bd || (d == bd && p < bp)) {
                best = Some((d, p));
            }
        }
    }
    best.expect("extremal slice contains the exact point").1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_params_keep_the_margin() {
        for d in [Domain::Source, Domain::Target] {
            let p = PhantomParams::desk(d);
            assert_eq!(p.scaled_to(p.shape), p);
            for shape in [[32, 32, 16], [24, 24, 12], [128, 96, 40]] {
                p.scaled_to(shape).validate().unwrap();
            }
        }
    }

    fn plain(domain: Domain) -> PhantomParams {
        PhantomParams {
            deformation_amplitude: 0.0,
            lesion_count: [0, 0],
            noise_hu: 0.0,
            bias_amplitude: 0.0,
            ..PhantomParams::desk(domain)
        }
    }

    #[test]
    fn deterministic() {
        let p = PhantomParams::desk(Domain::Target);
        let (v1, m1) = generate_study(11, &p).unwrap();
        let (v2, m2) = generate_study(11, &p).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn undeformed_mask_is_the_analytic_ellipsoid() {
        let p = plain(Domain::Source);
        let seed = 5;
        let (_, m) = generate_study(seed, &p).unwrap();
        // replay the rng draws that fix centre and radii
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: [f64; 3] = [0, 1, 2].map(|a| {
            let j = p.center_jitter_vox[a];
            p.center_frac[a] * (p.shape[a] as f64 - 1.0) + rng.gen_range(-j..=j)
        });
        let r: [f64; 3] = [0, 1, 2].map(|a| rng.gen_range(p.radius_min_vox[a]..=p.radius_max_vox[a]));
        for ((i, j, k), &v) in m.voxels.indexed_iter() {
            let q = [i as f64, j as f64, k as f64];
            let s: f64 = (0..3).map(|a| ((q[a] - c[a]) / r[a]).powi(2)).sum();
            assert_eq!(v == 1, s <= 1.0, "voxel {:?}", (i, j, k));
        }
    }

    #[test]
    fn margin_violation_rejected() {
        let mut p = PhantomParams::desk(Domain::Source);
        p.radius_max_vox[2] = 11.0;
        assert!(matches!(generate_study(0, &p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn study_seed_is_stable_and_id_sensitive() {
        assert_eq!(study_seed(3, "a"), study_seed(3, "a"));
        assert_ne!(study_seed(3, "a"), study_seed(3, "b"));
        assert_ne!(study_seed(3, "a"), study_seed(4, "a"));
    }

    #[test]
    fn jitter_keeps_points_in_mask_and_on_extremal_slices() {
        let (_, m) = generate_study(2, &PhantomParams::desk(Domain::Source)).unwrap();
        let exact = extract_extreme_points(&m).unwrap();
        for seed in 0..5 {
            let e = simulate_ps(&m, 2.0, seed).unwrap();
            for (slot, p) in e.iter() {
                assert!(m.contains(p));
                let a = slot.axis.index();
                assert_eq!(p[a], exact.get(slot)[a]);
            }
        }
        assert_eq!(simulate_ps(&m, 0.0, 9).unwrap(), exact);
    }
}
