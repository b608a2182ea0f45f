//! Evaluate the training losses on hand-made outputs.

use ugda::extreme::{ExtremePointSet, PointSource};
use ugda::heatmap::render_heatmaps;
use ugda::losses::{loss_adv, loss_disc, loss_ext, loss_seg, total_loss, BatchRole};

fn main() -> ugda::Result<()> {
    let shape = [12, 12, 12];
    let pts = [[2, 6, 6], [9, 6, 6], [6, 2, 6], [6, 9, 6], [6, 6, 2], [6, 6, 9]];
    let truth = ExtremePointSet::new("a", [1.0; 3], PointSource::HumanClick, pts)?;
    let moved = ExtremePointSet::new("a", [1.0; 3], PointSource::Predicted, pts.map(|[i, j, k]| [i, j, k + 1]))?;
    let flat = |set: &ExtremePointSet| -> ugda::Result<Vec<f64>> {
        let h = render_heatmaps(set, shape, 2.0)?;
        Ok(h.channels.iter().flat_map(|c| c.iter().map(|&v| v as f64)).collect())
    };
    let ext = loss_ext(&flat(&moved)?, &flat(&truth)?)?;
    println!("L_ext, heatmaps one voxel off: {:.5}", ext.value);

    let mask: Vec<f64> = (0..64).map(|i| f64::from(i % 3 == 0)).collect();
    let good: Vec<f64> = mask.iter().map(|&m| 0.1 + 0.8 * m).collect();
    let poor = vec![0.5; 64];
    println!("L_seg confident {:.4}, uncertain {:.4}", loss_seg(&good, &mask)?.value, loss_seg(&poor, &mask)?.value);

    let (l_d, _, _) = loss_disc(&[2.0, 1.5], &[-1.0, -2.0])?;
    let adv = loss_adv(&[-1.0, -2.0], &[BatchRole::TARGET_PS, BatchRole::TARGET_UNLABELLED])?;
    println!("L_d {l_d:.4}, L_adv {:.4}", adv.value);
    println!("total with lambda 1e-4: {:.6}", total_loss(ext.value + 0.3, adv.value, 1e-4));
    Ok(())
}
