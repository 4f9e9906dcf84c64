//! Ground-truth cell correspondences for the coarse and fine losses.

use crate::error::{Error, Result};
use crate::geometry::Homography;

/// For each A cell (row-major), the B cell containing its warped center,
/// if that center lands inside B.
pub fn gt_coarse_assignment(h: &Homography, a_hw: (usize, usize), b_hw: (usize, usize), cell: usize) -> Result<Vec<Option<usize>>> {
    Ok(gt_targets(h, a_hw, b_hw, cell)?.into_iter().map(|t| t.map(|t| t.idx_b)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub idx_b: usize,
    /// Warped A-cell center minus the B-cell center, in pixels.
    pub offset: [f64; 2],
}

pub fn gt_targets(h: &Homography, a_hw: (usize, usize), b_hw: (usize, usize), cell: usize) -> Result<Vec<Option<CellTarget>>> {
    if cell == 0 || !a_hw.0.is_multiple_of(cell) || !a_hw.1.is_multiple_of(cell) || !b_hw.0.is_multiple_of(cell) || !b_hw.1.is_multiple_of(cell) {
        return Err(Error::Invalid(format!("image sizes {a_hw:?}, {b_hw:?} not divisible by the cell size {cell}")));
    }
    let (ra, ca) = (a_hw.0 / cell, a_hw.1 / cell);
    let cb = b_hw.1 / cell;
    let half = cell as f64 / 2.0;
    let mut out = Vec::with_capacity(ra * ca);
    for r in 0..ra {
        for c in 0..ca {
            let (x, y) = ((c * cell) as f64 + half, (r * cell) as f64 + half);
            out.push(h.apply(x, y).and_then(|(xb, yb)| {
                let inside = xb >= 0.0 && yb >= 0.0 && xb < b_hw.1 as f64 && yb < b_hw.0 as f64;
                inside.then(|| {
                    let (rb, cbi) = ((yb / cell as f64) as usize, (xb / cell as f64) as usize);
                    CellTarget {
                        idx_b: rb * cb + cbi,
                        offset: [xb - ((cbi * cell) as f64 + half), yb - ((rb * cell) as f64 + half)],
                    }
                })
            }));
        }
    }
    Ok(out)
}
