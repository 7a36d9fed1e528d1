//! Density-based fallback: HDBSCAN over the sample rows of the embedding.

use nalgebra::DMatrix;

use super::{LocalBicluster, OccurrenceMatrix};

pub const MIN_CLUSTER_SIZE: usize = 2;

/// Flat HDBSCAN labels (`None` for noise) using excess-of-mass selection.
/// The root is never selected, so a single undivided group yields no
/// clusters.
pub fn hdbscan_labels(points: &DMatrix<f64>, min_cluster_size: usize) -> Vec<Option<usize>> {
    let n = points.nrows();
    if n < 2 {
        return vec![None; n];
    }
    let min_cluster_size = min_cluster_size.max(2);
    let dist = |a: usize, b: usize| (points.row(a) - points.row(b)).norm();

    // core distance: distance to the nearest other point
    let core: Vec<f64> = (0..n)
        .map(|a| (0..n).filter(|&b| b != a).map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
        .collect();
    let reach = |a: usize, b: usize| dist(a, b).max(core[a]).max(core[b]);

    // Prim over the mutual-reachability graph
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let w = reach(current, v);
            if w < best[v] {
                best[v] = w;
                parent[v] = current;
            }
            if best[v] < next_w || next == usize::MAX {
                next_w = best[v];
                next = v;
            }
        }
        in_tree[next] = true;
        edges.push((next_w, parent[next], next));
        current = next;
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    // single-linkage dendrogram; node ids >= n are merges
    let mut uf: Vec<usize> = (0..2 * n - 1).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut children = vec![(0usize, 0usize); n - 1];
    let mut height = vec![0.0f64; n - 1];
    let mut size = vec![1usize; 2 * n - 1];
    for (m, &(w, a, b)) in edges.iter().enumerate() {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        let node = n + m;
        uf[ra] = node;
        uf[rb] = node;
        children[m] = (ra, rb);
        height[m] = w;
        size[node] = size[ra] + size[rb];
    }
    let root = 2 * n - 2;

    // condense
    let lambda = |h: f64| 1.0 / h.max(1e-12);
    let mut clusters: Vec<Condensed> = vec![Condensed {
        parent: None,
        birth: 0.0,
        stability: 0.0,
        children: Vec::new(),
        points: Vec::new(),
    }];
    // (dendrogram node, condensed cluster it belongs to)
    let mut stack = vec![(root, 0usize)];
    while let Some((node, cl)) = stack.pop() {
        if node < n {
            // a lone leaf still inside its cluster leaves at the cluster's death
            clusters[cl].points.push((node, f64::INFINITY));
            continue;
        }
        let m = node - n;
        let (l, r) = children[m];
        let lam = lambda(height[m]);
        let big_l = size[l] >= min_cluster_size;
        let big_r = size[r] >= min_cluster_size;
        match (big_l, big_r) {
            (true, true) => {
                for child in [l, r] {
                    let id = clusters.len();
                    clusters.push(Condensed {
                        parent: Some(cl),
                        birth: lam,
                        stability: 0.0,
                        children: Vec::new(),
                        points: Vec::new(),
                    });
                    clusters[cl].children.push(id);
                    for leaf in leaves(child, n, &children) {
                        clusters[cl].points.push((leaf, lam));
                    }
                    stack.push((child, id));
                }
            }
            (true, false) | (false, true) => {
                let (keep, drop) = if big_l { (l, r) } else { (r, l) };
                for leaf in leaves(drop, n, &children) {
                    clusters[cl].points.push((leaf, lam));
                }
                stack.push((keep, cl));
            }
            (false, false) => {
                for leaf in leaves(node, n, &children) {
                    clusters[cl].points.push((leaf, lam));
                }
            }
        }
    }

    // infinite exits only come from single-point clusters, which the size
    // rule never creates
    for c in clusters.iter_mut() {
        let birth = c.birth;
        c.stability = c
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|p| p.1 - birth)
            .sum();
    }

    // excess of mass, children before parents
    let count = clusters.len();
    let mut selected = vec![false; count];
    let mut subtree = vec![0.0f64; count];
    for id in (1..count).rev() {
        let child_sum: f64 = clusters[id].children.iter().map(|&ch| subtree[ch]).sum();
        if clusters[id].children.is_empty() || clusters[id].stability >= child_sum {
            selected[id] = true;
            subtree[id] = clusters[id].stability;
        } else {
            subtree[id] = child_sum;
        }
    }
    // keep only the topmost selected cluster on every path
    for id in 1..count {
        let mut p = clusters[id].parent;
        while let Some(pid) = p {
            if pid != 0 && selected[pid] {
                selected[id] = false;
                break;
            }
            p = clusters[pid].parent;
        }
    }

    // every point of a cluster is recorded once, when it leaves it
    let mut labels = vec![None; n];
    let mut next_label = 0;
    for id in (1..count).filter(|&id| selected[id]) {
        for &(p, _) in &clusters[id].points {
            labels[p] = Some(next_label);
        }
        next_label += 1;
    }
    labels
}

struct Condensed {
    parent: Option<usize>,
    birth: f64,
    stability: f64,
    children: Vec<usize>,
    /// (point, lambda at which it left this cluster)
    points: Vec<(usize, f64)>,
}

fn leaves(node: usize, n: usize, children: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let (a, b) = children[x - n];
            stack.push(a);
            stack.push(b);
        }
    }
    out.sort_unstable();
    out
}

/// Clusters the first `m.rows()` embedding points and gives each cluster the
/// columns present in strictly more than half of its rows.
pub fn hdbscan_fallback(z: &DMatrix<f64>, m: &OccurrenceMatrix) -> Vec<LocalBicluster> {
    let r = m.rows();
    let rows = z.rows(0, r).into_owned();
    let labels = hdbscan_labels(&rows, MIN_CLUSTER_SIZE);
    let groups = labels.iter().filter_map(|l| *l).max().map_or(0, |x| x + 1);
    let mut out = Vec::new();
    for g in 0..groups {
        let members: Vec<usize> = (0..r).filter(|&i| labels[i] == Some(g)).collect();
        let cols: Vec<usize> = (0..m.cols())
            .filter(|&j| {
                let present = members.iter().filter(|&&i| m.cells[(i, j)] > 0.0).count();
                2 * present > members.len()
            })
            .collect();
        if members.len() >= 2 && cols.len() >= 2 {
            out.push(LocalBicluster { rows: members, cols });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(coords: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(coords.len(), 1, coords)
    }

    #[test]
    fn two_tight_groups() {
        let p = pts(&[0.0, 0.01, 0.02, 0.015, 5.0, 5.01, 5.02]);
        let labels = hdbscan_labels(&p, 2);
        assert!(labels.iter().all(|l| l.is_some()));
        assert_eq!(labels[0], labels[3]);
        assert_eq!(labels[4], labels[6]);
        assert_ne!(labels[0], labels[4]);
    }

    #[test]
    fn two_points_are_noise() {
        assert_eq!(hdbscan_labels(&pts(&[0.0, 1.0]), 2), vec![None, None]);
        assert_eq!(hdbscan_labels(&pts(&[0.0, 1.0, 2.0]), 2), vec![None, None, None]);
    }

    #[test]
    fn nested_structure_prefers_stable_split() {
        // three groups, two of them close together
        let p = pts(&[0.0, 0.001, 0.002, 0.1, 0.101, 0.102, 50.0, 50.001, 50.002]);
        let labels = hdbscan_labels(&p, 2);
        let distinct: std::collections::BTreeSet<_> = labels.iter().flatten().collect();
        assert!(distinct.len() >= 2);
        assert_ne!(labels[0], labels[6]);
    }

    fn matrix(rows: Vec<Vec<u8>>) -> OccurrenceMatrix {
        OccurrenceMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn fallback_assigns_majority_features() {
        // samples 0..3 share features 0..5, samples 3..6 share 5..10
        let rows: Vec<Vec<u8>> = (0..6)
            .map(|i| (0..10).map(|j| u8::from((i < 3) == (j < 5))).collect())
            .collect();
        let m = matrix(rows);
        let z = DMatrix::from_fn(16, 1, |i, _| if i < 3 { 0.0 + i as f64 * 1e-3 } else if i < 6 { 1.0 + i as f64 * 1e-3 } else { 0.5 });
        let mut out = hdbscan_fallback(&z, &m);
        out.sort_by(|a, b| a.rows.cmp(&b.rows));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].rows, vec![0, 1, 2]);
        assert_eq!(out[0].cols, (0..5).collect::<Vec<_>>());
        assert_eq!(out[1].rows, vec![3, 4, 5]);
        assert_eq!(out[1].cols, (5..10).collect::<Vec<_>>());
    }

    #[test]
    fn half_presence_is_excluded() {
        // cluster {0,1,2,3}: feature 2 in exactly two of four samples
        let rows = vec![
            vec![1, 1, 1, 0, 0, 0],
            vec![1, 1, 1, 0, 0, 0],
            vec![1, 1, 0, 0, 0, 0],
            vec![1, 1, 0, 0, 0, 0],
            vec![0, 0, 0, 1, 1, 1],
            vec![0, 0, 0, 1, 1, 1],
        ];
        let m = matrix(rows);
        let z = DMatrix::from_fn(12, 1, |i, _| if i < 4 { i as f64 * 1e-3 } else { 3.0 + i as f64 * 1e-3 });
        let mut out = hdbscan_fallback(&z, &m);
        out.sort_by(|a, b| a.rows.cmp(&b.rows));
        assert_eq!(out[0].rows, vec![0, 1, 2, 3]);
        assert_eq!(out[0].cols, vec![0, 1]);
    }

    #[test]
    fn all_noise_gives_nothing() {
        let m = matrix(vec![vec![1, 1], vec![1, 1]]);
        let z = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        assert!(hdbscan_fallback(&z, &m).is_empty());
    }
}
