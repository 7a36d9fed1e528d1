use nalgebra::{DMatrix, SVD};

use super::normalize::NormalizedMatrix;
use super::OccurrenceMatrix;
use crate::error::{Error, Result};

/// Singular values at or below this fraction of the trivial one carry no
/// direction information; their embedding columns are zeroed.
const NULL_SINGULAR_RATIO: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    /// `(rows + cols) x dim`; the first `rows` points are samples.
    pub z: DMatrix<f64>,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    /// Singular values paired with the columns of `z`, descending.
    pub singular_values: Vec<f64>,
}

impl SpectralEmbedding {
    pub fn row_block(&self) -> DMatrix<f64> {
        self.z.rows(0, self.rows).into_owned()
    }

    pub fn col_block(&self) -> DMatrix<f64> {
        self.z.rows(self.rows, self.cols).into_owned()
    }
}

/// `clamp(floor(log2(min(r, c) / 2)), 1, min(r, c) - 1)`.
pub fn embedding_dim(rows: usize, cols: usize) -> usize {
    let m = rows.min(cols);
    let upper = m.saturating_sub(1).max(1);
    let raw = ((m as f64) / 2.0).log2().floor();
    let raw = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    raw.clamp(1, upper)
}

/// Spectral co-clustering embedding. The trivial singular pair is removed by
/// projecting its left direction out of the normalized matrix, so the next
/// `dim` triplets are well defined even when the leading singular value is
/// repeated (disconnected bipartite graphs).
pub fn embed(norm: &NormalizedMatrix, m: &OccurrenceMatrix) -> Result<SpectralEmbedding> {
    let a = &norm.values;
    let (r, c) = (a.nrows(), a.ncols());
    if r != m.rows() || c != m.cols() {
        return Err(Error::Internal("normalized matrix does not match occurrence matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("normalized matrix has non-finite entries".into()));
    }
    let dim = embedding_dim(r, c);

    let u0 = &norm.trivial_left;
    let trivial_row = u0.transpose() * a;
    let sigma0 = trivial_row.norm();
    let deflated = a - u0 * &trivial_row;

    let floor = NULL_SINGULAR_RATIO * sigma0.max(f64::MIN_POSITIVE);
    let (sv, u, v) = leading_triplets(&deflated, dim, floor)?;

    let mut z = DMatrix::zeros(r + c, dim);
    let mut singular_values = Vec::with_capacity(dim);
    for k in 0..dim {
        let sigma = sv.get(k).copied().unwrap_or(0.0);
        singular_values.push(sigma);
        if sigma <= floor {
            continue;
        }
        let mut left: Vec<f64> = u.column(k).iter().copied().collect();
        let mut right: Vec<f64> = v.column(k).iter().copied().collect();
        if canonical_sign(&left, &right) < 0.0 {
            left.iter_mut().for_each(|x| *x = -*x);
            right.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..r {
            z[(i, k)] = left[i] / m.row_sums[i].sqrt();
        }
        for j in 0..c {
            z[(r + j, k)] = right[j] / m.col_sums[j].sqrt();
        }
    }
    Ok(SpectralEmbedding {
        z,
        dim,
        rows: r,
        cols: c,
        singular_values,
    })
}

/// The first `dim` singular triplets as `(values, U, V)` with `U` and `V` as
/// columns. nalgebra's bidiagonal SVD is tried first; on matrices with many
/// repeated singular values it can return an inaccurate leading triplet, so
/// every triplet above `floor` is checked against `A v = s u` and a one-sided
/// Jacobi decomposition takes over when the check fails.
fn leading_triplets(a: &DMatrix<f64>, dim: usize, floor: f64) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let accurate = |sv: &[f64], u: &DMatrix<f64>, v: &DMatrix<f64>| -> f64 {
        (0..dim.min(sv.len()))
            .filter(|&k| sv[k] > floor)
            .map(|k| (a * v.column(k) - u.column(k) * sv[k]).norm())
            .fold(0.0, f64::max)
    };
    let tall = a.nrows() >= a.ncols();
    let input = if tall { a.clone() } else { a.transpose() };
    if let Some(svd) = SVD::try_new(input, true, true, f64::EPSILON, 0) {
        let u_raw = svd.u.expect("U requested");
        let v_raw = svd.v_t.expect("V requested").transpose();
        let (u, v) = if tall { (u_raw, v_raw) } else { (v_raw, u_raw) };
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        if accurate(&sv, &u, &v) <= RESIDUAL_TOL {
            return Ok((sv, u, v));
        }
    }
    let (sv, u, v) = jacobi_svd(a);
    let residual = accurate(&sv, &u, &v);
    if residual > RESIDUAL_TOL {
        return Err(Error::Numerical(format!(
            "SVD of a {}x{} matrix is inaccurate (residual {residual:.3e})",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok((sv, u, v))
}

const RESIDUAL_TOL: f64 = 1e-8;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations on the tall orientation.
/// Singular values come back in descending order.
fn jacobi_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let tall = a.nrows() >= a.ncols();
    let mut w = if tall { a.clone() } else { a.transpose() };
    let (m, n) = w.shape();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - s * y;
                        mat[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let sv: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let left = DMatrix::from_fn(m, n, |i, k| {
        let j = order[k];
        if norms[j] > 0.0 {
            w[(i, j)] / norms[j]
        } else {
            0.0
        }
    });
    let right = DMatrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    if tall {
        (sv, left, right)
    } else {
        (sv, right, left)
    }
}

/// Sign convention that does not depend on row or column order: the sum of
/// cubes decides, falling back to the largest-magnitude entry.
fn canonical_sign(left: &[f64], right: &[f64]) -> f64 {
    let cubes: f64 = left.iter().chain(right).map(|x| x * x * x).sum();
    let scale: f64 = left.iter().chain(right).map(|x| x.abs().powi(3)).sum();
    if cubes.abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return cubes.signum();
    }
    let extreme = left
        .iter()
        .chain(right)
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() + 1e-12 { x } else { best });
    if extreme < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::super::normalize::normalize_scale;
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dimension_formula() {
        assert_eq!(embedding_dim(4, 4), 1);
        assert_eq!(embedding_dim(2, 50), 1);
        assert_eq!(embedding_dim(3, 3), 1);
        assert_eq!(embedding_dim(20, 30), 3);
        assert_eq!(embedding_dim(40, 60), 4);
        assert_eq!(embedding_dim(80, 120), 5);
    }

    #[test]
    fn two_blocks_separate_on_first_axis() {
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push((0..10).map(|j| u8::from((i < 4) == (j < 5))).collect());
        }
        let m = OccurrenceMatrix::from_rows(rows).unwrap();
        let e = embed(&normalize_scale(&m).unwrap(), &m).unwrap();
        assert_eq!(e.dim, 2);
        let first: Vec<f64> = (0..8).map(|i| e.z[(i, 0)]).collect();
        let a_min = first[..4].iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = first[..4].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let b_min = first[4..].iter().copied().fold(f64::INFINITY, f64::min);
        let b_max = first[4..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let margin = (b_min - a_max).max(a_min - b_max);
        assert!(margin > 0.1, "margin {margin}");
        assert!(a_max.signum() != b_max.signum());
        // columns sit with their rows
        let col_first: Vec<f64> = (0..10).map(|j| e.z[(8 + j, 0)]).collect();
        assert!((col_first[0] - first[0]).abs() < 1e-9);
        assert!((col_first[9] - first[7]).abs() < 1e-9);
    }

    #[test]
    fn all_ones_embeds_to_origin() {
        let m = OccurrenceMatrix::from_rows(vec![vec![1; 10]; 10]).unwrap();
        let e = embed(&normalize_scale(&m).unwrap(), &m).unwrap();
        assert!(e.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows: Vec<Vec<u8>> = (0..12)
            .map(|i| (0..15).map(|j| u8::from(i == j || rng.gen_bool(0.35))).collect())
            .collect();
        let m = OccurrenceMatrix::from_rows(rows.clone()).unwrap();
        let e = embed(&normalize_scale(&m).unwrap(), &m).unwrap();
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<u8>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let mp = OccurrenceMatrix::from_rows(permuted).unwrap();
        let ep = embed(&normalize_scale(&mp).unwrap(), &mp).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for k in 0..e.dim {
                assert!((ep.z[(new_i, k)] - e.z[(old_i, k)]).abs() < 1e-9);
            }
        }
        for j in 0..15 {
            for k in 0..e.dim {
                assert!((ep.z[(12 + j, k)] - e.z[(12 + j, k)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jacobi_matches_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (r, c) in [(6, 9), (9, 6), (5, 5)] {
            let a = DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
            let (sv, u, v) = jacobi_svd(&a);
            assert!(sv.windows(2).all(|w| w[0] >= w[1]));
            let rebuilt = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sv.clone())) * v.transpose();
            assert!((rebuilt - &a).norm() < 1e-10);
            let reference = SVD::new(a.clone(), false, false).singular_values;
            for (x, y) in sv.iter().zip(reference.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_components_with_repeated_values() {
        // two disconnected sample groups, each sharing one gram, plus
        // per-sample grams; many singular values coincide
        let present: [&[usize]; 20] = [
            &[0, 7],
            &[0, 18],
            &[0, 8],
            &[0, 10],
            &[0, 12],
            &[0, 13],
            &[0, 9],
            &[0, 6],
            &[0, 11],
            &[0, 20],
            &[1, 14],
            &[1, 4, 19],
            &[1, 24],
            &[1, 2, 21],
            &[1, 3, 16],
            &[1, 4, 15],
            &[1, 23],
            &[1, 2, 17],
            &[1, 2, 3, 5],
            &[1, 22],
        ];
        let rows: Vec<Vec<u8>> = present
            .iter()
            .map(|p| (0..25).map(|j| u8::from(p.contains(&j))).collect())
            .collect();
        let m = OccurrenceMatrix::from_rows(rows).unwrap();
        let e = embed(&normalize_scale(&m).unwrap(), &m).unwrap();
        assert!((e.singular_values[0] - 1.0).abs() < 1e-9);
        // the first axis separates the two groups
        let first: Vec<f64> = (0..20).map(|i| e.z[(i, 0)]).collect();
        assert!(first[..10].iter().all(|&x| x * first[0] > 0.0));
        assert!(first[10..].iter().all(|&x| x * first[0] < 0.0));
    }
}
