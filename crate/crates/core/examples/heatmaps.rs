//! Render the six Gaussian heatmaps of a point set and inspect their values.

use ugda::extreme::{ExtremePointSet, PointSource};
use ugda::heatmap::render_heatmaps;

fn main() -> ugda::Result<()> {
    let shape = [32, 32, 16];
    let points = ExtremePointSet::new(
        "demo",
        [1.0; 3],
        PointSource::HumanClick,
        [[4, 16, 8], [27, 15, 8], [15, 3, 8], [16, 28, 7], [14, 16, 2], [16, 17, 13]],
    )?;
    let sigma = 5.0;
    let h = render_heatmaps(&points, shape, sigma)?;
    for (c, (slot, p)) in h.channels.iter().zip(points.iter()) {
        let [i, j, k] = p;
        let step = sigma as usize;
        let off = if i + step < shape[0] { i + step } else { i - step };
        println!("{slot:?}: peak {:.3}, one sigma away {:.4}", c[[i, j, k]], c[[off, j, k]]);
    }
    let max = h.summed.iter().cloned().fold(0.0f32, f32::max);
    let mean = h.summed.mean().unwrap_or(0.0);
    println!("summed map: max {max:.3}, mean {mean:.4}");
    Ok(())
}
