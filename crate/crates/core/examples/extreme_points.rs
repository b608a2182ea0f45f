//! Extract the six extreme points of a mask, store them as JSON and score a
//! shifted prediction with the mean extreme-point distance (MXA).

use ndarray::Array3;
use ugda::extreme::{extract_extreme_points, mxa, ExtremePointSet};
use ugda::volume::SegmentationMask;

fn ellipsoid(shape: [usize; 3], c: [f64; 3], r: [f64; 3]) -> Array3<u8> {
    Array3::from_shape_fn(shape, |(i, j, k)| {
        let d = [i, j, k]
            .iter()
            .zip(c.iter().zip(&r))
            .map(|(&x, (&c, &r))| ((x as f64 - c) / r).powi(2))
            .sum::<f64>();
        u8::from(d <= 1.0)
    })
}

fn main() -> ugda::Result<()> {
    let spacing = [0.8, 0.8, 2.5];
    let gt = SegmentationMask::new(ellipsoid([48, 48, 20], [24.0, 22.0, 10.0], [14.0, 10.0, 6.0]), spacing, "case-01")?;
    let points = extract_extreme_points(&gt)?;
    for (slot, p) in points.iter() {
        println!("{slot:?}: {p:?}");
    }

    let json = points.to_json()?;
    let back = ExtremePointSet::from_json(&json)?;
    assert_eq!(back, points);
    println!("{json}");

    let pred = SegmentationMask::new(ellipsoid([48, 48, 20], [26.0, 22.0, 10.0], [13.0, 10.0, 6.0]), spacing, "case-01")?;
    println!("MXA of a 2-voxel shift: {:.3} mm", mxa(&pred, &points)?);
    println!("MXA against itself: {:.3} mm", mxa(&gt, &points)?);
    Ok(())
}
