//! NIfTI-1 reading and writing for volumes and masks (`.nii` or `.nii.gz`).
//!
//! Voxel spacing is written into both `pixdim` and the sform affine diagonal,
//! and read back from the affine diagonal whenever an sform is present.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{SegmentationMask, Spacing3, Volume};

fn nifti_err(path: &Path) -> impl FnOnce(nifti::NiftiError) -> Error + '_ {
    move |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    }
}

fn header_for(spacing: Spacing3) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim[1] = spacing[0] as f32;
    h.pixdim[2] = spacing[1] as f32;
    h.pixdim[3] = spacing[2] as f32;
    h.srow_x = [spacing[0] as f32, 0.0, 0.0, 0.0];
    h.srow_y = [0.0, spacing[1] as f32, 0.0, 0.0];
    h.srow_z = [0.0, 0.0, spacing[2] as f32, 0.0];
    h.sform_code = 1;
    h.qform_code = 0;
    h.xyzt_units = 2; // millimetres
    h
}

fn spacing_of(h: &NiftiHeader) -> Spacing3 {
    let diag = if h.sform_code > 0 {
        [h.srow_x[0], h.srow_y[1], h.srow_z[2]]
    } else {
        [h.pixdim[1], h.pixdim[2], h.pixdim[3]]
    };
    diag.map(|d| {
        let d = (d as f64).abs();
        if d > 0.0 {
            d
        } else {
            1.0
        }
    })
}

fn read_grid(path: &Path) -> Result<(Array3<f32>, Spacing3)> {
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err(path))?;
    let spacing = spacing_of(obj.header());
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(nifti_err(path))?;
    let data = match data.ndim() {
        3 => data,
        4 if data.shape()[3] == 1 => data.index_axis_move(ndarray::Axis(3), 0),
        n => {
            return Err(Error::invalid(format!(
                "{}: expected a 3D volume, found {n} dimensions",
                path.display()
            )))
        }
    };
    let grid = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok((grid.as_standard_layout().into_owned(), spacing))
}

/// Study id from a path like `dir/study_0001.nii.gz`.
pub fn study_id_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("study");
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

pub fn read_volume(path: &Path, study_id: impl Into<String>) -> Result<Volume> {
    let (grid, spacing) = read_grid(path)?;
    Volume::new(grid, spacing, study_id)
}

pub fn read_mask(path: &Path, study_id: impl Into<String>) -> Result<SegmentationMask> {
    let (grid, spacing) = read_grid(path)?;
    SegmentationMask::new(grid.mapv(|v| u8::from(v != 0.0)), spacing, study_id)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let header = header_for(v.spacing_mm);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&v.voxels)
        .map_err(nifti_err(path))
}

pub fn write_mask(path: &Path, m: &SegmentationMask) -> Result<()> {
    let header = header_for(m.spacing_mm);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&m.voxels)
        .map_err(nifti_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(
            Array3::from_shape_fn((5, 4, 3), |(i, j, k)| (i as f32 * 0.31 - j as f32 * 1.7 + k as f32).sin()),
            [0.75, 1.5, 4.0],
            "s",
        )
        .unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            let back = read_volume(&p, "s").unwrap();
            assert_eq!(back.voxels, v.voxels);
            assert_eq!(back.spacing_mm, v.spacing_mm);
        }
        let m = SegmentationMask::new(v.voxels.mapv(|x| u8::from(x > 0.0)), [0.75, 1.5, 4.0], "s").unwrap();
        let p = dir.path().join("m.nii.gz");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p, "s").unwrap(), m);
        assert_eq!(study_id_from_path(&p), "m");
    }
}
