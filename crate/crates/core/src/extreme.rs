//! Extreme-point pseudo-supervision: the six boundary voxels of an object that
//! attain the minimum and maximum coordinate along each axis.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{SegmentationMask, Shape3, Spacing3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "x" => Some(Axis::X),
            "y" => Some(Axis::Y),
            "z" => Some(Axis::Z),
            _ => None,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["x", "y", "z"][self.index()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Min,
    Max,
}

/// One of the six (axis, side) slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub axis: Axis,
    pub side: Side,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot { axis: Axis::X, side: Side::Min },
        Slot { axis: Axis::X, side: Side::Max },
        Slot { axis: Axis::Y, side: Side::Min },
        Slot { axis: Axis::Y, side: Side::Max },
        Slot { axis: Axis::Z, side: Side::Min },
        Slot { axis: Axis::Z, side: Side::Max },
    ];

    pub fn index(self) -> usize {
        self.axis.index() * 2 + self.side as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    HumanClick,
    DerivedFromMask,
    Predicted,
}

/// A single point as it appears on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtremePoint {
    pub axis: Axis,
    pub side: Side,
    pub ijk: [usize; 3],
}

impl ExtremePoint {
    pub fn slot(&self) -> Slot {
        Slot {
            axis: self.axis,
            side: self.side,
        }
    }
}

/// JSON payload shared by complete point sets and partial annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSetPayload {
    pub study_id: String,
    pub spacing_mm: Spacing3,
    pub source: PointSource,
    pub points: Vec<ExtremePoint>,
}

impl PointSetPayload {
    /// Checks slot uniqueness and, when `shape` is given, bounds.
    pub fn validate(&self, shape: Option<Shape3>) -> Result<()> {
        let mut seen = [false; 6];
        for p in &self.points {
            let s = p.slot().index();
            if seen[s] {
                return Err(Error::invalid(format!(
                    "slot ({}, {:?}) given more than once",
                    p.axis, p.side
                )));
            }
            seen[s] = true;
            if let Some(shape) = shape {
                if (0..3).any(|a| p.ijk[a] >= shape[a]) {
                    return Err(Error::invalid(format!(
                        "point {:?} outside grid {shape:?}",
                        p.ijk
                    )));
                }
            }
        }
        if self.points.len() > 6 {
            return Err(Error::invalid("more than six points"));
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.points.len() == 6 && self.validate(None).is_ok()
    }
}

/// Exactly six extreme points, stored in [`Slot::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremePointSet {
    pub study_id: String,
    pub spacing_mm: Spacing3,
    pub source: PointSource,
    points: [[usize; 3]; 6],
}

impl ExtremePointSet {
    pub fn new(
        study_id: impl Into<String>,
        spacing_mm: Spacing3,
        source: PointSource,
        points: [[usize; 3]; 6],
    ) -> Result<Self> {
        let set = Self {
            study_id: study_id.into(),
            spacing_mm,
            source,
            points,
        };
        set.check_ordering()?;
        Ok(set)
    }

    fn check_ordering(&self) -> Result<()> {
        for axis in Axis::ALL {
            let lo = self.get(Slot { axis, side: Side::Min });
            let hi = self.get(Slot { axis, side: Side::Max });
            if lo[axis.index()] > hi[axis.index()] {
                return Err(Error::invalid(format!(
                    "{axis}-min point lies beyond the {axis}-max point"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, slot: Slot) -> [usize; 3] {
        self.points[slot.index()]
    }

    pub fn points(&self) -> &[[usize; 3]; 6] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = (Slot, [usize; 3])> + '_ {
        Slot::ALL.iter().map(|s| (*s, self.points[s.index()]))
    }

    pub fn check_bounds(&self, shape: Shape3) -> Result<()> {
        for p in &self.points {
            if (0..3).any(|a| p[a] >= shape[a]) {
                return Err(Error::invalid(format!("point {p:?} outside grid {shape:?}")));
            }
        }
        Ok(())
    }

    /// Map points onto another grid covering the same physical extent.
    pub fn map_to_grid(&self, from: Shape3, to: Shape3) -> ExtremePointSet {
        let points = self.points.map(|p| {
            [0, 1, 2].map(|a| {
                (((p[a] as f64 + 0.5) * to[a] as f64 / from[a] as f64).floor() as usize).min(to[a] - 1)
            })
        });
        ExtremePointSet {
            study_id: self.study_id.clone(),
            spacing_mm: [0, 1, 2].map(|a| self.spacing_mm[a] * from[a] as f64 / to[a] as f64),
            source: self.source,
            points,
        }
    }

    pub fn to_payload(&self) -> PointSetPayload {
        PointSetPayload {
            study_id: self.study_id.clone(),
            spacing_mm: self.spacing_mm,
            source: self.source,
            points: self
                .iter()
                .map(|(s, ijk)| ExtremePoint {
                    axis: s.axis,
                    side: s.side,
                    ijk,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_payload())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let payload: PointSetPayload = serde_json::from_str(s)?;
        payload.try_into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<PointSetPayload> for ExtremePointSet {
    type Error = Error;

    fn try_from(p: PointSetPayload) -> Result<Self> {
        p.validate(None)?;
        if p.points.len() != 6 {
            return Err(Error::invalid(format!(
                "expected 6 extreme points, got {}",
                p.points.len()
            )));
        }
        let mut points = [[0usize; 3]; 6];
        for pt in &p.points {
            points[pt.slot().index()] = pt.ijk;
        }
        ExtremePointSet::new(p.study_id, p.spacing_mm, p.source, points)
    }
}

/// Select the extremal voxel for one slot.
///
/// Among voxels on the extremal slice, the one closest to the slice centroid
/// wins; remaining ties go to the lexicographically smallest `(i, j, k)`.
fn pick_on_slice(candidates: &[[usize; 3]]) -> [usize; 3] {
    let n = candidates.len() as i128;
    let mut sum = [0i128; 3];
    for c in candidates {
        for a in 0..3 {
            sum[a] += c[a] as i128;
        }
    }
    // squared distance to the centroid scaled by n^2 keeps the comparison exact
    let key = |c: &[usize; 3]| -> i128 {
        (0..3)
            .map(|a| {
                let d = n * c[a] as i128 - sum[a];
                d * d
            })
            .sum()
    };
    *candidates
        .iter()
        .min_by(|a, b| key(a).cmp(&key(b)).then_with(|| a.cmp(b)))
        .expect("slice is nonempty")
}

/// Extreme points of a nonempty mask, derived deterministically.
pub fn extract_extreme_points(m: &SegmentationMask) -> Result<ExtremePointSet> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &v) in m.voxels.indexed_iter() {
        if v == 0 {
            continue;
        }
        any = true;
        let p = [i, j, k];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    let mut slices: [Vec<[usize; 3]>; 6] = Default::default();
    for ((i, j, k), &v) in m.voxels.indexed_iter() {
        if v == 0 {
            continue;
        }
        let p = [i, j, k];
        for a in 0..3 {
            if p[a] == lo[a] {
                slices[a * 2].push(p);
            }
            if p[a] == hi[a] {
                slices[a * 2 + 1].push(p);
            }
        }
    }
    let points = [0, 1, 2, 3, 4, 5].map(|s| pick_on_slice(&slices[s]));
    ExtremePointSet::new(
        m.study_id.clone(),
        m.spacing_mm,
        PointSource::DerivedFromMask,
        points,
    )
}

fn distance_mm(a: [usize; 3], b: [usize; 3], spacing: Spacing3) -> f64 {
    (0..3)
        .map(|i| {
            let d = (a[i] as f64 - b[i] as f64) * spacing[i];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-slot Euclidean distances (mm) between two point sets.
pub fn slot_distances_mm(pred: &ExtremePointSet, gt: &ExtremePointSet, spacing: Spacing3) -> [f64; 6] {
    [0, 1, 2, 3, 4, 5].map(|s| distance_mm(pred.points[s], gt.points[s], spacing))
}

/// Mean extreme-point accuracy in millimetres.
///
/// Fails with [`Error::EmptyMask`] for an empty prediction; callers flag such
/// volumes instead of folding an infinite distance into aggregates.
pub fn mxa(pred: &SegmentationMask, gt_points: &ExtremePointSet) -> Result<f64> {
    let spacing = gt_points.spacing_mm;
    if (0..3).any(|a| (pred.spacing_mm[a] - spacing[a]).abs() > 1e-6 * spacing[a].max(1.0)) {
        return Err(Error::invalid(format!(
            "prediction spacing {:?} differs from point spacing {:?}",
            pred.spacing_mm, spacing
        )));
    }
    gt_points.check_bounds(pred.shape())?;
    let predicted = extract_extreme_points(pred)?;
    Ok(slot_distances_mm(&predicted, gt_points, spacing).iter().sum::<f64>() / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn solid_box(shape: Shape3, lo: [usize; 3], hi: [usize; 3]) -> SegmentationMask {
        let v = Array3::from_shape_fn(shape, |(i, j, k)| {
            let p = [i, j, k];
            u8::from((0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]))
        });
        SegmentationMask::new(v, [1.0; 3], "box").unwrap()
    }

    #[test]
    fn single_voxel_gives_six_identical_points() {
        let mut v = Array3::zeros((8, 8, 8));
        v[[3, 4, 5]] = 1;
        let m = SegmentationMask::new(v, [1.0; 3], "one").unwrap();
        let e = extract_extreme_points(&m).unwrap();
        assert!(e.points().iter().all(|p| *p == [3, 4, 5]));
        assert_eq!(e.source, PointSource::DerivedFromMask);
    }

    #[test]
    fn box_x_min_follows_centroid_then_lexicographic_rule() {
        let m = solid_box([16, 16, 16], [2, 3, 4], [6, 9, 11]);
        let e = extract_extreme_points(&m).unwrap();
        assert_eq!(e.get(Slot { axis: Axis::X, side: Side::Min }), [2, 6, 7]);
        assert_eq!(e.get(Slot { axis: Axis::X, side: Side::Max }), [6, 6, 7]);
        assert_eq!(e.get(Slot { axis: Axis::Z, side: Side::Max }), [4, 6, 11]);
    }

    #[test]
    fn empty_mask_errors() {
        let m = SegmentationMask::new(Array3::zeros((4, 4, 4)), [1.0; 3], "e").unwrap();
        assert!(matches!(extract_extreme_points(&m), Err(Error::EmptyMask)));
    }

    #[test]
    fn mxa_translation_and_anisotropy() {
        let gt_mask = solid_box([20, 16, 16], [4, 3, 4], [10, 9, 11]);
        let gt = extract_extreme_points(&gt_mask).unwrap();
        assert_eq!(mxa(&gt_mask, &gt).unwrap(), 0.0);
        let shifted = solid_box([20, 16, 16], [6, 3, 4], [12, 9, 11]);
        assert!((mxa(&shifted, &gt).unwrap() - 2.0).abs() < 1e-12);

        let mut gt_aniso = gt.clone();
        gt_aniso.spacing_mm = [2.0, 1.0, 1.0];
        let mut shifted_aniso = shifted.clone();
        shifted_aniso.spacing_mm = [2.0, 1.0, 1.0];
        assert!((mxa(&shifted_aniso, &gt_aniso).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mxa_empty_prediction_is_an_error() {
        let gt = extract_extreme_points(&solid_box([8, 8, 8], [1, 1, 1], [3, 3, 3])).unwrap();
        let empty = SegmentationMask::new(Array3::zeros((8, 8, 8)), [1.0; 3], "e").unwrap();
        assert!(matches!(mxa(&empty, &gt), Err(Error::EmptyMask)));
    }

    #[test]
    fn payload_validation() {
        let e = extract_extreme_points(&solid_box([8, 8, 8], [1, 1, 1], [3, 3, 3])).unwrap();
        let mut p = e.to_payload();
        assert!(p.is_complete());
        p.points[1] = p.points[0];
        assert!(p.validate(None).is_err());
        assert!(ExtremePointSet::try_from(p).is_err());

        let mut short = e.to_payload();
        short.points.pop();
        assert!(short.validate(Some([8, 8, 8])).is_ok());
        assert!(!short.is_complete());
        assert!(short.validate(Some([2, 2, 2])).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut e = extract_extreme_points(&solid_box([8, 8, 8], [1, 2, 1], [5, 3, 6])).unwrap();
        e.spacing_mm = [0.7421875, 0.1 + 0.2, 5.0];
        let text = e.to_json().unwrap();
        let back = ExtremePointSet::from_json(&text).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn ordering_invariant_enforced() {
        let mut pts = [[2, 2, 2]; 6];
        pts[0] = [5, 2, 2];
        assert!(ExtremePointSet::new("s", [1.0; 3], PointSource::HumanClick, pts).is_err());
    }
}
