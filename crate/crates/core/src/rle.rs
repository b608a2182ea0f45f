//! Run-length coding of binary masks.
//!
//! Voxels are visited z-major: `z` is the slowest index and `x` the fastest,
//! so each z slice is a contiguous block. Runs alternate background and
//! foreground, starting with background (a leading run may be zero).

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{SegmentationMask, Shape3, Spacing3};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub shape: Shape3,
    pub runs: Vec<u64>,
}

impl RleMask {
    pub fn encode(m: &SegmentationMask) -> Self {
        let [nx, ny, nz] = m.shape();
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u64;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = m.voxels[[i, j, k]] != 0;
                    if v != current {
                        runs.push(len);
                        current = v;
                        len = 0;
                    }
                    len += 1;
                }
            }
        }
        runs.push(len);
        RleMask { shape: m.shape(), runs }
    }

    pub fn decode(&self, spacing_mm: Spacing3, study_id: impl Into<String>) -> Result<SegmentationMask> {
        let [nx, ny, nz] = self.shape;
        let n = (nx * ny * nz) as u64;
        let total: u64 = self.runs.iter().sum();
        if total != n {
            return Err(Error::invalid(format!("runs cover {total} voxels, shape needs {n}")));
        }
        let mut voxels = Array3::<u8>::zeros(self.shape);
        let mut pos = 0u64;
        for (r, &len) in self.runs.iter().enumerate() {
            if r % 2 == 1 {
                for p in pos..pos + len {
                    let p = p as usize;
                    voxels[[p % nx, (p / nx) % ny, p / (nx * ny)]] = 1;
                }
            }
            pos += len;
        }
        SegmentationMask::new(voxels, spacing_mm, study_id)
    }

    pub fn foreground(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).sum()
    }
}
