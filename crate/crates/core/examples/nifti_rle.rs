//! Write a phantom volume and mask as NIfTI, read them back, and run-length
//! encode the mask the way the inference endpoint returns it.

use ugda::nifti_io::{read_mask, read_volume, write_mask, write_volume};
use ugda::phantom::{generate_study, Domain, PhantomParams};
use ugda::rle::RleMask;
use ugda::volume::{resample_mask, window_normalize};
use ugda::Error;

fn main() -> ugda::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (vol, mask) = generate_study(7, &PhantomParams::desk(Domain::Target))?;
    let (vp, mp) = (dir.path().join("vol.nii"), dir.path().join("mask.nii"));
    write_volume(&vp, &vol)?;
    write_mask(&mp, &mask)?;
    let v2 = read_volume(&vp, "p7")?;
    let m2 = read_mask(&mp, "p7")?;
    println!("volume round trip exact: {}", v2.voxels == vol.voxels);
    println!("mask round trip exact: {}", m2.voxels == mask.voxels);

    let w = window_normalize(&v2, -160.0, 240.0)?;
    let (lo, hi) = w.voxels.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!("windowed intensities in [{lo:.2}, {hi:.2}]");

    let rle = RleMask::encode(&m2);
    println!("RLE: {} runs for {} foreground voxels", rle.runs.len(), rle.foreground());
    let decoded = rle.decode(m2.spacing_mm, "p7")?;
    println!("RLE round trip exact: {}", decoded.voxels == m2.voxels);

    let small = resample_mask(&m2, [32, 32, 12])?;
    println!("nearest-neighbour resample to {:?}: {} voxels", small.shape(), small.count());
    Ok(())
}
