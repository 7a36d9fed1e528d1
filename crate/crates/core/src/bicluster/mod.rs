//! Adaptive spectral co-clustering of the sample x feature occurrence matrix.
//!
//! The matrix is normalized, embedded with its leading non-trivial singular
//! vectors, and the stacked row/column points are clustered with a
//! variational Gaussian mixture that picks its own component count. Each
//! component becomes a bicluster of the samples and features it claims. When
//! no component survives the size filters, an HDBSCAN pass over the sample
//! points is used instead.

pub mod embed;
pub mod extract;
pub mod hdbscan;
pub mod normalize;
pub mod vgmm;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::feature_filter::FeatureOccurrence;

pub use embed::{embed, embedding_dim, SpectralEmbedding};
pub use extract::extract_biclusters;
pub use hdbscan::hdbscan_fallback;
pub use normalize::{normalize_bistochastic, normalize_scale, NormalizedMatrix};
pub use vgmm::{vgmm_fit, MixtureResult};

/// Binary occurrence matrix with empty rows and columns removed.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceMatrix {
    /// Sample id of every row.
    pub row_ids: Vec<usize>,
    /// Feature id of every column.
    pub col_ids: Vec<usize>,
    pub cells: DMatrix<f64>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    /// Sample ids with no surviving feature.
    pub dropped_rows: Vec<usize>,
    /// Feature ids present in no sample.
    pub dropped_cols: Vec<usize>,
}

impl OccurrenceMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    /// Builds from dense 0/1 rows; ids are the input positions.
    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Argument("ragged occurrence rows".into()));
        }
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Argument("occurrence cells must be 0 or 1".into()));
        }
        Self::from_fn(rows.len(), width, |i, j| rows[i][j] == 1)
    }

    fn from_fn(r: usize, c: usize, cell: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut row_hits = vec![0usize; r];
        let mut col_hits = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                if cell(i, j) {
                    row_hits[i] += 1;
                    col_hits[j] += 1;
                }
            }
        }
        let (row_ids, dropped_rows): (Vec<usize>, Vec<usize>) = (0..r).partition(|&i| row_hits[i] > 0);
        let (col_ids, dropped_cols): (Vec<usize>, Vec<usize>) = (0..c).partition(|&j| col_hits[j] > 0);
        if row_ids.len() < 2 || col_ids.len() < 2 {
            return Err(Error::InsufficientSignal(format!(
                "occurrence matrix is {}x{} after removing empty rows and columns",
                row_ids.len(),
                col_ids.len()
            )));
        }
        let cells = DMatrix::from_fn(row_ids.len(), col_ids.len(), |i, j| {
            if cell(row_ids[i], col_ids[j]) {
                1.0
            } else {
                0.0
            }
        });
        let row_sums = row_ids.iter().map(|&i| row_hits[i] as f64).collect();
        let col_sums = col_ids.iter().map(|&j| col_hits[j] as f64).collect();
        Ok(OccurrenceMatrix {
            row_ids,
            col_ids,
            cells,
            row_sums,
            col_sums,
            dropped_rows,
            dropped_cols,
        })
    }
}

/// `A[i][j] = 1` iff feature `j` occurs in sample `i`. Feature ids are
/// positions in `features`.
pub fn build_matrix(sample_count: usize, features: &[FeatureOccurrence]) -> Result<OccurrenceMatrix> {
    for (j, f) in features.iter().enumerate() {
        if f.file_set.ones().any(|s| s >= sample_count) {
            return Err(Error::Argument(format!(
                "feature {j} refers to a sample outside 0..{sample_count}"
            )));
        }
    }
    OccurrenceMatrix::from_fn(sample_count, features.len(), |i, j| features[j].file_set.contains(i))
}

/// Group of samples and features, by id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bicluster {
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
}

/// Bicluster over matrix positions rather than ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalBicluster {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Normalization {
    Scale,
    Bistochastic,
}

impl Normalization {
    pub const ALL: [Normalization; 2] = [Normalization::Scale, Normalization::Bistochastic];
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Scale => "scale",
            Normalization::Bistochastic => "bistochastic",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(Normalization::Scale),
            "bistochastic" => Ok(Normalization::Bistochastic),
            other => Err(Error::Argument(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Which stage produced the biclusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSource {
    Mixture,
    DensityFallback,
}

#[derive(Debug, Clone)]
pub struct BiclusterOutcome {
    pub biclusters: Vec<Bicluster>,
    pub source: ClusterSource,
    pub embedding_dim: usize,
    /// Component count of the mixture restart that was used.
    pub components: usize,
    pub normalization_converged: bool,
}

/// Full pipeline over a feature list; ids in the result are sample indices
/// and positions in `features`.
pub fn bicluster(
    sample_count: usize,
    features: &[FeatureOccurrence],
    normalization: Normalization,
    seed: u64,
) -> Result<Vec<Bicluster>> {
    let m = build_matrix(sample_count, features)?;
    Ok(bicluster_matrix(&m, normalization, seed)?.biclusters)
}

/// Full pipeline over an already built matrix.
pub fn bicluster_matrix(m: &OccurrenceMatrix, normalization: Normalization, seed: u64) -> Result<BiclusterOutcome> {
    let norm = match normalization {
        Normalization::Scale => normalize_scale(m)?,
        Normalization::Bistochastic => normalize_bistochastic(
            m,
            normalize::DEFAULT_SINKHORN_TOL,
            normalize::DEFAULT_SINKHORN_MAX_ITER,
        ),
    };
    if !norm.converged {
        log::debug!("bistochastic scaling stopped after {} iterations without converging", norm.iterations);
    }
    let emb = embed(&norm, m)?;
    let params = vgmm::VgmmParams::for_points(m.rows() + m.cols());
    let restarts = vgmm::vgmm_fit_restarts(&emb.z, &params, seed)?;

    let mut found = None;
    for mix in &restarts {
        let local = extract_biclusters(mix, m.rows(), m.cols());
        if !local.is_empty() {
            found = Some((local, mix.k_effective));
            break;
        }
    }
    let (local, source, components) = match found {
        Some((local, k)) => (local, ClusterSource::Mixture, k),
        None => (hdbscan_fallback(&emb.z, m), ClusterSource::DensityFallback, restarts[0].k_effective),
    };
    let mut biclusters: Vec<Bicluster> = local
        .into_iter()
        .map(|b| Bicluster {
            row_ids: b.rows.iter().map(|&i| m.row_ids[i]).collect(),
            col_ids: b.cols.iter().map(|&j| m.col_ids[j]).collect(),
        })
        .collect();
    biclusters.sort();
    biclusters.dedup();
    Ok(BiclusterOutcome {
        biclusters,
        source,
        embedding_dim: emb.dim,
        components,
        normalization_converged: norm.converged,
    })
}
