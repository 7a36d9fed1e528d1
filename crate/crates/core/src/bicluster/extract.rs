use super::vgmm::MixtureResult;
use super::LocalBicluster;

/// Size floors never exceed this many rows or columns.
pub const SIZE_FLOOR_CAP: usize = 5;

/// Turns mixture components into biclusters over local matrix indices.
///
/// Points `0..r` are rows and `r..r + c` columns. A point belongs to every
/// component whose responsibility strictly exceeds `1 / (k + 1)`.
pub fn extract_biclusters(mix: &MixtureResult, r: usize, c: usize) -> Vec<LocalBicluster> {
    let k = mix.k_effective;
    let cut = 1.0 / (k as f64 + 1.0);
    let resp = &mix.responsibilities;
    debug_assert_eq!(resp.nrows(), r + c);
    let members: Vec<LocalBicluster> = (0..k)
        .map(|comp| LocalBicluster {
            rows: (0..r).filter(|&i| resp[(i, comp)] > cut).collect(),
            cols: (0..c).filter(|&j| resp[(r + j, comp)] > cut).collect(),
        })
        .collect();
    filter_by_size(members)
}

/// Drops row-only / column-only groups, then anything below the adaptive
/// floors `min(5, largest row count)` and `min(5, largest column count)`.
pub fn filter_by_size(groups: Vec<LocalBicluster>) -> Vec<LocalBicluster> {
    let survivors: Vec<LocalBicluster> = groups
        .into_iter()
        .filter(|g| g.rows.len() > 1 && g.cols.len() > 1)
        .collect();
    let max_rows = survivors.iter().map(|g| g.rows.len()).max().unwrap_or(0);
    let max_cols = survivors.iter().map(|g| g.cols.len()).max().unwrap_or(0);
    let r_min = SIZE_FLOOR_CAP.min(max_rows);
    let c_min = SIZE_FLOOR_CAP.min(max_cols);
    survivors
        .into_iter()
        .filter(|g| g.rows.len() >= r_min && g.cols.len() >= c_min)
        .collect()
}
