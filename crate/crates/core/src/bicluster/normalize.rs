use nalgebra::{DMatrix, DVector};

use super::OccurrenceMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_SINKHORN_TOL: f64 = 1e-6;
pub const DEFAULT_SINKHORN_MAX_ITER: usize = 1000;

/// A real-valued rescaling of an occurrence matrix, together with the unit
/// left singular direction the rescaling makes trivial (the one every
/// connected component shares).
#[derive(Debug, Clone)]
pub struct NormalizedMatrix {
    pub values: DMatrix<f64>,
    pub trivial_left: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `A_n = R^{-1/2} A C^{-1/2}`.
pub fn normalize_scale(m: &OccurrenceMatrix) -> Result<NormalizedMatrix> {
    if m.row_sums.iter().chain(&m.col_sums).any(|&s| s <= 0.0) {
        return Err(Error::Internal("scale normalization of a zero row or column".into()));
    }
    let values = DMatrix::from_fn(m.rows(), m.cols(), |i, j| {
        m.cells[(i, j)] / (m.row_sums[i] * m.col_sums[j]).sqrt()
    });
    let trivial_left = DVector::from_iterator(m.rows(), m.row_sums.iter().map(|s| s.sqrt())).normalize();
    Ok(NormalizedMatrix {
        values,
        trivial_left,
        converged: true,
        iterations: 0,
    })
}

/// Sinkhorn scaling: rows are driven to sum 1 and columns to `r / c`, so the
/// total mass stays `r` for rectangular inputs.
pub fn normalize_bistochastic(m: &OccurrenceMatrix, tol: f64, max_iter: usize) -> NormalizedMatrix {
    let (r, c) = (m.rows(), m.cols());
    let col_target = r as f64 / c as f64;
    let mut x = m.cells.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..r {
            let s: f64 = x.row(i).sum();
            if s > 0.0 {
                x.row_mut(i).scale_mut(1.0 / s);
            }
        }
        for j in 0..c {
            let s: f64 = x.column(j).sum();
            if s > 0.0 {
                x.column_mut(j).scale_mut(col_target / s);
            }
        }
        let row_dev = (0..r)
            .map(|i| (x.row(i).sum() - 1.0).abs())
            .fold(0.0, f64::max);
        if row_dev < tol {
            converged = true;
            break;
        }
    }
    NormalizedMatrix {
        values: x,
        trivial_left: DVector::from_element(r, 1.0 / (r as f64).sqrt()),
        converged,
        iterations,
    }
}
