//! Variational Bayesian Gaussian mixture with diagonal covariances.
//!
//! Per component and dimension the mean and precision share a Normal-Gamma
//! posterior; the weights have a symmetric Dirichlet prior. Components the
//! data does not support lose their weight and are pruned after fitting.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

pub const MAX_COMPONENTS: usize = 20;
pub const DEFAULT_RESTARTS: usize = 3;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-5;
const LLOYD_ITERS: usize = 25;

/// `min(20, floor(points / 2))`, at least 1.
pub fn default_k_max(points: usize) -> usize {
    (points / 2).clamp(1, MAX_COMPONENTS)
}

#[derive(Debug, Clone)]
pub struct VgmmParams {
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl VgmmParams {
    pub fn for_points(points: usize) -> Self {
        VgmmParams {
            k_max: default_k_max(points),
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureResult {
    pub k_effective: usize,
    /// `k_effective x d`, in the original coordinate system.
    pub means: DMatrix<f64>,
    /// Expected variances, `k_effective x d`.
    pub variances: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// `points x k_effective`, each row sums to one.
    pub responsibilities: DMatrix<f64>,
    pub lower_bound: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MixtureResult {
    fn single(n: usize, d: usize, mean: Vec<f64>) -> Self {
        MixtureResult {
            k_effective: 1,
            means: DMatrix::from_row_slice(1, d, &mean),
            variances: DMatrix::zeros(1, d),
            weights: vec![1.0],
            responsibilities: DMatrix::from_element(n, 1, 1.0),
            lower_bound: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    /// Index of the most responsible component for `point`.
    pub fn hard_label(&self, point: usize) -> usize {
        argmax(self.responsibilities.row(point).iter().copied())
    }
}

/// Best restart by evidence bound.
pub fn vgmm_fit(points: &DMatrix<f64>, k_max: usize, seed: u64) -> Result<MixtureResult> {
    let params = VgmmParams {
        k_max,
        ..VgmmParams::for_points(points.nrows())
    };
    let mut all = vgmm_fit_restarts(points, &params, seed)?;
    Ok(all.swap_remove(0))
}

/// Every restart, ordered by decreasing evidence bound (ties keep restart
/// order).
pub fn vgmm_fit_restarts(points: &DMatrix<f64>, params: &VgmmParams, seed: u64) -> Result<Vec<MixtureResult>> {
    let n = points.nrows();
    let d = points.ncols();
    if n < 2 || d == 0 {
        return Err(Error::Argument(format!("mixture needs >= 2 points in >= 1 dimension, got {n} x {d}")));
    }
    if params.k_max == 0 || params.restarts == 0 {
        return Err(Error::Argument("k_max and restarts must be positive".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("mixture input has non-finite coordinates".into()));
    }

    // Canonical point order makes the fit independent of input order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_rows(points, a, b));

    let mean: Vec<f64> = (0..d).map(|j| points.column(j).mean()).collect();
    let active: Vec<usize> = (0..d)
        .filter(|&j| {
            let var = points.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / n as f64;
            var > 1e-24 * (1.0 + mean[j] * mean[j])
        })
        .collect();
    if active.is_empty() {
        return Ok(vec![MixtureResult::single(n, d, mean)]);
    }

    let data: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| active.iter().map(|&j| points[(i, j)]).collect())
        .collect();
    let data_mean: Vec<f64> = active.iter().map(|&j| mean[j]).collect();
    let data_var: Vec<f64> = (0..active.len())
        .map(|a| data.iter().map(|x| (x[a] - data_mean[a]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let prior = Prior {
        alpha0: 1.0 / params.k_max as f64,
        beta0: 1.0,
        m0: data_mean,
        a0: 1.0,
        b0: data_var,
    };

    let mut fits = Vec::with_capacity(params.restarts);
    for restart in 0..params.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let fit = fit_once(&data, &prior, params, &mut rng);
        fits.push(fit.finish(&data, params.k_max, &order, &active, &mean));
    }
    fits.sort_by(|a, b| b.lower_bound.partial_cmp(&a.lower_bound).unwrap_or(Ordering::Equal));
    Ok(fits)
}

struct Prior {
    alpha0: f64,
    beta0: f64,
    m0: Vec<f64>,
    a0: f64,
    b0: Vec<f64>,
}

/// Variational posterior parameters for every component.
struct Posterior {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    m: Vec<Vec<f64>>,
    a: Vec<f64>,
    b: Vec<Vec<f64>>,
    // sufficient statistics from the last update
    nk: Vec<f64>,
    xbar: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

struct Fit {
    post: Posterior,
    resp: Vec<Vec<f64>>,
    bound: f64,
    iterations: usize,
    converged: bool,
}

fn fit_once(data: &[Vec<f64>], prior: &Prior, params: &VgmmParams, rng: &mut ChaCha8Rng) -> Fit {
    let labels = kmeans_labels(data, params.k_max, rng);
    let resp: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let mut row = vec![0.0; params.k_max];
            row[l] = 1.0;
            row
        })
        .collect();
    let mut fit = coordinate_ascent(data, resp, prior, params);
    let mut total_iterations = fit.iterations;
    // Coordinate ascent stalls when one cluster is shared by several
    // components; merging or deleting components escapes that when the bound
    // agrees. Every accepted move retires a component, so this terminates.
    while let Some(resp) = improving_move(data, &fit, prior, params.tol) {
        fit = coordinate_ascent(data, resp, prior, params);
        total_iterations += fit.iterations;
    }
    fit.iterations = total_iterations;
    fit
}

fn coordinate_ascent(data: &[Vec<f64>], mut resp: Vec<Vec<f64>>, prior: &Prior, params: &VgmmParams) -> Fit {
    let mut post = m_step(data, &resp, prior);
    let mut bound = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        resp = e_step(data, &post, None);
        post = m_step(data, &resp, prior);
        let next = lower_bound(data, &resp, &post, prior);
        if (next - bound).abs() < params.tol {
            bound = next;
            converged = true;
            break;
        }
        bound = next;
    }
    Fit {
        post,
        resp,
        bound,
        iterations,
        converged,
    }
}

/// Share of the data below which a component counts as retired.
const ACTIVE_MASS: f64 = 1e-3;

/// Best merge of two components or deletion of one, if it raises the bound.
fn improving_move(data: &[Vec<f64>], fit: &Fit, prior: &Prior, tol: f64) -> Option<Vec<Vec<f64>>> {
    let active: Vec<usize> = (0..fit.post.nk.len())
        .filter(|&c| fit.post.nk[c] > ACTIVE_MASS)
        .collect();
    if active.len() < 2 {
        return None;
    }
    let score = |resp: &Vec<Vec<f64>>| {
        let post = m_step(data, resp, prior);
        lower_bound(data, resp, &post, prior)
    };
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut consider = |resp: Vec<Vec<f64>>| {
        let b = score(&resp);
        if b > fit.bound + tol && best.as_ref().is_none_or(|(bb, _)| b > *bb) {
            best = Some((b, resp));
        }
    };
    for (x, &a) in active.iter().enumerate() {
        for &b in &active[x + 1..] {
            let mut resp = fit.resp.clone();
            for row in resp.iter_mut() {
                row[a] += row[b];
                row[b] = 0.0;
            }
            consider(resp);
        }
    }
    for &c in &active {
        let others: Vec<usize> = active.iter().copied().filter(|&o| o != c).collect();
        let partial = e_step(data, &fit.post, Some(&others));
        let resp = partial
            .into_iter()
            .map(|p| {
                let mut row = vec![0.0; fit.post.nk.len()];
                for (&o, v) in others.iter().zip(p) {
                    row[o] = v;
                }
                row
            })
            .collect();
        consider(resp);
    }
    best.map(|(_, resp)| resp)
}

impl Fit {
    fn finish(
        self,
        data: &[Vec<f64>],
        k_max: usize,
        order: &[usize],
        active: &[usize],
        mean: &[f64],
    ) -> MixtureResult {
        let d = mean.len();
        let k = self.post.alpha.len();
        let total_alpha: f64 = self.post.alpha.iter().sum();
        let mut hard = vec![0usize; k];
        for row in &self.resp {
            hard[argmax(row.iter().copied())] += 1;
        }
        let floor = 1.0 / (10.0 * k_max as f64);
        let mut keep: Vec<usize> = (0..k)
            .filter(|&c| self.post.alpha[c] / total_alpha >= floor && hard[c] > 0)
            .collect();
        if keep.is_empty() {
            // the heaviest component always survives
            keep.push(argmax(self.post.alpha.iter().copied()));
        }
        let resp = e_step(data, &self.post, Some(&keep));

        let n = data.len();
        let ke = keep.len();
        let mut responsibilities = DMatrix::zeros(n, ke);
        for (pos, &orig) in order.iter().enumerate() {
            for c in 0..ke {
                responsibilities[(orig, c)] = resp[pos][c];
            }
        }
        let kept_alpha: f64 = keep.iter().map(|&c| self.post.alpha[c]).sum();
        let weights = keep.iter().map(|&c| self.post.alpha[c] / kept_alpha).collect();
        // constant dimensions keep their value and zero variance
        let mut means = DMatrix::from_fn(ke, d, |_, j| mean[j]);
        let mut variances = DMatrix::zeros(ke, d);
        for (row, &c) in keep.iter().enumerate() {
            for (a, &j) in active.iter().enumerate() {
                means[(row, j)] = self.post.m[c][a];
                variances[(row, j)] = self.post.b[c][a] / self.post.a[c];
            }
        }
        MixtureResult {
            k_effective: ke,
            means,
            variances,
            weights,
            responsibilities,
            lower_bound: self.bound,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

fn m_step(data: &[Vec<f64>], resp: &[Vec<f64>], prior: &Prior) -> Posterior {
    let k = resp[0].len();
    let dim = data[0].len();
    let mut nk = vec![0.0; k];
    let mut xbar = vec![vec![0.0; dim]; k];
    for (x, r) in data.iter().zip(resp) {
        for c in 0..k {
            nk[c] += r[c];
            for a in 0..dim {
                xbar[c][a] += r[c] * x[a];
            }
        }
    }
    for c in 0..k {
        if nk[c] > 0.0 {
            xbar[c].iter_mut().for_each(|v| *v /= nk[c]);
        } else {
            xbar[c].clone_from(&prior.m0);
        }
    }
    let mut s = vec![vec![0.0; dim]; k];
    for (x, r) in data.iter().zip(resp) {
        for c in 0..k {
            for a in 0..dim {
                s[c][a] += r[c] * (x[a] - xbar[c][a]).powi(2);
            }
        }
    }
    for c in 0..k {
        if nk[c] > 0.0 {
            s[c].iter_mut().for_each(|v| *v /= nk[c]);
        }
    }

    let mut post = Posterior {
        alpha: vec![0.0; k],
        beta: vec![0.0; k],
        m: vec![vec![0.0; dim]; k],
        a: vec![0.0; k],
        b: vec![vec![0.0; dim]; k],
        nk,
        xbar,
        s,
    };
    for c in 0..k {
        let n = post.nk[c];
        post.alpha[c] = prior.alpha0 + n;
        post.beta[c] = prior.beta0 + n;
        post.a[c] = prior.a0 + 0.5 * n;
        for a in 0..dim {
            let diff = post.xbar[c][a] - prior.m0[a];
            post.m[c][a] = (prior.beta0 * prior.m0[a] + n * post.xbar[c][a]) / post.beta[c];
            post.b[c][a] = prior.b0[a] + 0.5 * (n * post.s[c][a] + prior.beta0 * n * diff * diff / post.beta[c]);
        }
    }
    post
}

/// Responsibilities over `subset` (or all components).
fn e_step(data: &[Vec<f64>], post: &Posterior, subset: Option<&[usize]>) -> Vec<Vec<f64>> {
    let all: Vec<usize>;
    let comps = match subset {
        Some(s) => s,
        None => {
            all = (0..post.alpha.len()).collect();
            &all
        }
    };
    let total_alpha: f64 = post.alpha.iter().sum();
    let psi_total = digamma(total_alpha);
    let dim = data[0].len();
    let per_comp: Vec<(f64, Vec<f64>)> = comps
        .iter()
        .map(|&c| {
            let psi_a = digamma(post.a[c]);
            let mut constant = digamma(post.alpha[c]) - psi_total;
            for a in 0..dim {
                constant += 0.5 * (psi_a - post.b[c][a].ln()) - 0.5 * (2.0 * PI).ln() - 0.5 / post.beta[c];
            }
            let prec: Vec<f64> = (0..dim).map(|a| post.a[c] / post.b[c][a]).collect();
            (constant, prec)
        })
        .collect();
    data.iter()
        .map(|x| {
            let logs: Vec<f64> = comps
                .iter()
                .zip(&per_comp)
                .map(|(&c, (constant, prec))| {
                    let quad: f64 = (0..dim).map(|a| prec[a] * (x[a] - post.m[c][a]).powi(2)).sum();
                    constant - 0.5 * quad
                })
                .collect();
            softmax(&logs)
        })
        .collect()
}

fn lower_bound(data: &[Vec<f64>], resp: &[Vec<f64>], post: &Posterior, prior: &Prior) -> f64 {
    let k = post.alpha.len();
    let dim = data[0].len();
    let total_alpha: f64 = post.alpha.iter().sum();
    let psi_total = digamma(total_alpha);
    let e_ln_pi: Vec<f64> = post.alpha.iter().map(|&al| digamma(al) - psi_total).collect();
    let ln_2pi = (2.0 * PI).ln();

    let mut bound = 0.0;
    for c in 0..k {
        let psi_a = digamma(post.a[c]);
        for a in 0..dim {
            let e_ln_lambda = psi_a - post.b[c][a].ln();
            let e_lambda = post.a[c] / post.b[c][a];
            // expected log likelihood of the assigned data
            bound += 0.5
                * post.nk[c]
                * (e_ln_lambda
                    - 1.0 / post.beta[c]
                    - e_lambda * (post.s[c][a] + (post.xbar[c][a] - post.m[c][a]).powi(2))
                    - ln_2pi);
            // prior minus posterior for the mean given precision
            bound += 0.5 * (prior.beta0 / post.beta[c]).ln()
                - 0.5 * prior.beta0 * (1.0 / post.beta[c] + e_lambda * (post.m[c][a] - prior.m0[a]).powi(2))
                + 0.5;
            // prior minus posterior for the precision
            bound += prior.a0 * prior.b0[a].ln() - ln_gamma(prior.a0) + (prior.a0 - 1.0) * e_ln_lambda
                - prior.b0[a] * e_lambda;
            bound += post.a[c] - post.b[c][a].ln() + ln_gamma(post.a[c]) + (1.0 - post.a[c]) * psi_a;
        }
    }
    // assignments
    for r in resp {
        for c in 0..k {
            if r[c] > 0.0 {
                bound += r[c] * (e_ln_pi[c] - r[c].ln());
            }
        }
    }
    // weights
    bound += ln_gamma(prior.alpha0 * k as f64) - k as f64 * ln_gamma(prior.alpha0);
    bound += (prior.alpha0 - 1.0) * e_ln_pi.iter().sum::<f64>();
    bound -= ln_gamma(total_alpha) - post.alpha.iter().map(|&al| ln_gamma(al)).sum::<f64>();
    bound -= post.alpha.iter().zip(&e_ln_pi).map(|(&al, &e)| (al - 1.0) * e).sum::<f64>();
    bound
}

/// k-means++ seeding followed by Lloyd iterations; empty clusters are removed
/// and labels compacted. Fewer than `k` labels come back when the data has
/// fewer distinct points.
fn kmeans_labels(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let mut centers: Vec<Vec<f64>> = vec![data[rng.gen_range(0..n)].clone()];
    let mut nearest: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in nearest.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if nearest[pick] <= 0.0 {
            // floating point walked past the end; take the farthest point
            pick = argmax(nearest.iter().copied());
        }
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..LLOYD_ITERS {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let best = argmin(centers.iter().map(|c| sq_dist(x, c)));
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let dim = data[0].len();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for a in 0..dim {
                sums[l][a] += x[a];
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                for a in 0..dim {
                    center[a] = sums[c][a] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut remap = vec![usize::MAX; centers.len()];
    let mut next = 0;
    for l in labels.iter_mut() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    labels
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softmax(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    argmax(values.map(|v| -v))
}

/// Lexicographic comparison on coordinates rounded to a fine grid, so points
/// that differ only by round-off compare equal and fall back to exact values.
fn cmp_rows(m: &DMatrix<f64>, a: usize, b: usize) -> Ordering {
    const GRID: f64 = 1e-7;
    for j in 0..m.ncols() {
        let (x, y) = ((m[(a, j)] / GRID).round(), (m[(b, j)] / GRID).round());
        match x.partial_cmp(&y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}
