//! Nonparametric estimands, scalar k-means, the cluster recovery metric and
//! outcome orthogonalization.
//!
//! Variances use the population (divide-by-n) convention throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Tabular, TrialDataset};
use crate::error::{Error, Result};
use crate::rng::derive;

/// `mean(y | t = 1) - mean(y | t = 0)`.
pub fn diff_in_means_ate(y: &[f64], t: &[u8]) -> Result<f64> {
    if y.len() != t.len() {
        return Err(Error::shape("diff_in_means_ate", "treatments", y.len(), t.len()));
    }
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (v, ti) in y.iter().zip(t) {
        if *ti == 1 {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if n0 == 0 {
        return Err(Error::EmptyArm("control"));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

pub fn dataset_ate(ds: &TrialDataset) -> Result<f64> {
    diff_in_means_ate(&ds.y, &ds.t)
}

/// Standard error of the difference in means, population variances per arm.
pub fn diff_in_means_se(y: &[f64], t: &[u8]) -> Result<f64> {
    diff_in_means_ate(y, t)?;
    let arm = |want: u8| -> Vec<f64> { y.iter().zip(t).filter(|(_, ti)| **ti == want).map(|(v, _)| *v).collect() };
    let (y1, y0) = (arm(1), arm(0));
    let v1 = crate::stats::population_var(&y1) / y1.len() as f64;
    let v0 = crate::stats::population_var(&y0) / y0.len() as f64;
    Ok((v1 + v0).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenters {
    /// Sorted ascending.
    pub centers: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

const KMEANS_RESTARTS: u64 = 10;

/// Largest input for which the exact dynamic-programming solution is added
/// to the candidate starts.
const EXACT_SEED_MAX_N: usize = 4096;

/// Scalar k-means: k-means++ starts (10 restarts) plus the exact 1-D optimum
/// as an extra start, each refined by Lloyd iterations; the lowest inertia
/// wins. Centers come back sorted and points go to the nearest center, ties
/// to the lower index.
pub fn kmeans(points: &[f64], k: usize, seed: u64, max_iter: usize) -> Result<ClusterCenters> {
    if k == 0 {
        return Err(Error::invalid("kmeans: K must be at least 1"));
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans", index: i });
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::TooFewPoints { k, distinct });
    }
    let mut starts: Vec<Vec<f64>> = (0..KMEANS_RESTARTS).map(|r| plus_plus_init(points, k, &mut derive(seed, &[r]))).collect();
    if points.len() <= EXACT_SEED_MAX_N {
        starts.push(exact_1d(points, k));
    }
    let mut best: Option<ClusterCenters> = None;
    for start in starts {
        let fit = lloyd(points, start, max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let mut best = best.expect("at least one start");
    best.centers.sort_by(f64::total_cmp);
    let (labels, inertia) = assign(points, &best.centers);
    best.labels = labels;
    best.inertia = inertia;
    Ok(best)
}

fn count_distinct(points: &[f64]) -> usize {
    let mut s = points.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

fn plus_plus_init(points: &[f64], k: usize, rng: &mut crate::rng::Stream) -> Vec<f64> {
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = points.len() - 1;
        if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|d| *d > 0.0).expect("positive mass");
            }
        }
        let c = points[pick];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - c).powi(2));
        }
    }
    centers
}

fn assign(points: &[f64], centers: &[f64]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut bd = (p - centers[0]).powi(2);
            for (j, c) in centers.iter().enumerate().skip(1) {
                let d = (p - c).powi(2);
                if d < bd {
                    best = j;
                    bd = d;
                }
            }
            inertia += bd;
            best
        })
        .collect();
    (labels, inertia)
}

fn lloyd(points: &[f64], mut centers: Vec<f64>, max_iter: usize) -> ClusterCenters {
    let (mut labels, mut inertia) = assign(points, &centers);
    for _ in 0..max_iter {
        let k = centers.len();
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (p, l) in points.iter().zip(&labels) {
            sum[*l] += p;
            cnt[*l] += 1;
        }
        for j in 0..k {
            // Empty clusters keep their previous center.
            if cnt[j] > 0 {
                centers[j] = sum[j] / cnt[j] as f64;
            }
        }
        let (next, next_inertia) = assign(points, &centers);
        inertia = next_inertia;
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterCenters { centers, labels, inertia }
}

/// Globally optimal 1-D partition into `k` contiguous runs of the sorted
/// points (O(k n^2) dynamic program); returns the run means.
fn exact_1d(points: &[f64], k: usize) -> Vec<f64> {
    let mut s = points.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut p1 = vec![0.0; n + 1];
    let mut p2 = vec![0.0; n + 1];
    for (i, v) in s.iter().enumerate() {
        p1[i + 1] = p1[i] + v;
        p2[i + 1] = p2[i] + v * v;
    }
    // Cost of the run s[a..b].
    let cost = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let sum = p1[b] - p1[a];
        (p2[b] - p2[a] - sum * sum / m).max(0.0)
    };
    let inf = f64::INFINITY;
    let mut dp = vec![vec![inf; n + 1]; k + 1];
    let mut arg = vec![vec![0usize; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for m in 1..=k {
        for b in m..=n {
            for a in (m - 1)..b {
                let v = dp[m - 1][a] + cost(a, b);
                if v < dp[m][b] {
                    dp[m][b] = v;
                    arg[m][b] = a;
                }
            }
        }
    }
    let mut centers = Vec::with_capacity(k);
    let mut b = n;
    for m in (1..=k).rev() {
        let a = arg[m][b];
        centers.push((p1[b] - p1[a]) / (b - a) as f64);
        b = a;
    }
    centers.reverse();
    centers
}

/// Post-hoc clusters of predicted effects: k-means on `tau_hats`, each
/// cluster summarized by its mean prediction.
pub fn prediction_cluster_cate(tau_hats: &[f64], k: usize, seed: u64) -> Result<ClusterCenters> {
    if tau_hats.len() < k {
        return Err(Error::TooFewPoints { k, distinct: tau_hats.len() });
    }
    kmeans(tau_hats, k, seed, 300)
}

/// `1 - sum_z min_z' (est_z - oracle_z')^2 / sum_z'' (oracle_z'' - mean)^2`,
/// each estimated center matched to its nearest oracle center (possibly
/// several to the same one). Not clamped.
pub fn cluster_recovery_r2(est: &[f64], oracle: &[f64]) -> Result<f64> {
    let denom = recovery_denominator(est, oracle)?;
    let num: f64 = est.iter().map(|e| oracle.iter().map(|o| (e - o).powi(2)).fold(f64::INFINITY, f64::min)).sum();
    Ok(1.0 - num / denom)
}

/// One-to-one variant: the matching minimizing total squared error over all
/// permutations. Sensitivity analysis only.
pub fn cluster_recovery_r2_bijective(est: &[f64], oracle: &[f64]) -> Result<f64> {
    let denom = recovery_denominator(est, oracle)?;
    if est.len() != oracle.len() {
        return Err(Error::shape("cluster_recovery_r2_bijective", "center count", oracle.len(), est.len()));
    }
    if est.len() > 9 {
        return Err(Error::invalid("cluster_recovery_r2_bijective: at most 9 clusters"));
    }
    let mut perm: Vec<usize> = (0..est.len()).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let s: f64 = p.iter().enumerate().map(|(i, j)| (est[i] - oracle[*j]).powi(2)).sum();
        best = best.min(s);
    });
    Ok(1.0 - best / denom)
}

fn permute(p: &mut [usize], at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == p.len() {
        visit(p);
        return;
    }
    for i in at..p.len() {
        p.swap(at, i);
        permute(p, at + 1, visit);
        p.swap(at, i);
    }
}

fn recovery_denominator(est: &[f64], oracle: &[f64]) -> Result<f64> {
    if oracle.len() < 2 {
        return Err(Error::invalid("cluster_recovery_r2: needs K >= 2 oracle centers"));
    }
    if est.is_empty() {
        return Err(Error::invalid("cluster_recovery_r2: no estimated centers"));
    }
    let m = crate::stats::mean(oracle);
    let denom: f64 = oracle.iter().map(|o| (o - m).powi(2)).sum();
    if denom <= 0.0 {
        return Err(Error::ZeroVariance("oracle centers"));
    }
    Ok(denom)
}

/// Closed-form per-cluster effect summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffect {
    /// `tau(z) = mu_{tau,z}`.
    pub tau: f64,
    /// `sigma_{0,z}^2 + sigma_{1,z}^2 + sigma_{tau,z}^2`, the variance of a
    /// unit's `Y(1) - Y(0)` given the cluster.
    pub var: f64,
}

pub fn cluster_effect_summary(mu_tau: &[f64], sigma_tau: &[f64], sigma0: &[f64], sigma1: &[f64]) -> Result<Vec<ClusterEffect>> {
    let k = mu_tau.len();
    for (name, v) in [("sigma_tau", sigma_tau), ("sigma0", sigma0), ("sigma1", sigma1)] {
        if v.len() != k {
            return Err(Error::shape("cluster_effect_summary", name, k, v.len()));
        }
    }
    Ok((0..k)
        .map(|z| ClusterEffect {
            tau: mu_tau[z],
            var: sigma0[z].powi(2) + sigma1[z].powi(2) + sigma_tau[z].powi(2),
        })
        .collect())
}

/// Which regressors enter the orthogonalizing design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub intercept: bool,
    pub treatment: bool,
    /// Tabular main effects, by column name.
    pub columns: Vec<String>,
    /// Tabular columns interacted with the treatment.
    pub interactions: Vec<String>,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            intercept: true,
            treatment: true,
            columns: Vec::new(),
            interactions: Vec::new(),
        }
    }
}

impl CovariateSpec {
    /// Every tabular column as a main effect and a treatment interaction.
    pub fn full(tab: &Tabular) -> Self {
        Self {
            columns: tab.names.clone(),
            interactions: tab.names.clone(),
            ..Self::default()
        }
    }
}

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orthogonalized {
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Design matrix, column-major, with column names.
pub fn design_matrix(t: &[u8], tabular: Option<&Tabular>, spec: &CovariateSpec) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let n = t.len();
    let lookup = |name: &str| -> Result<Vec<f64>> {
        let tab = tabular.ok_or_else(|| Error::invalid(format!("orthogonalize: column {name:?} requested but no tabular data")))?;
        let j = tab
            .names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("orthogonalize: unknown tabular column {name:?}")))?;
        Ok(tab.column(j))
    };
    let tf: Vec<f64> = t.iter().map(|v| f64::from(*v)).collect();
    let mut names = Vec::new();
    let mut cols = Vec::new();
    if spec.intercept {
        names.push("intercept".to_string());
        cols.push(vec![1.0; n]);
    }
    if spec.treatment {
        names.push("t".to_string());
        cols.push(tf.clone());
    }
    for c in &spec.columns {
        names.push(c.clone());
        cols.push(lookup(c)?);
    }
    for c in &spec.interactions {
        names.push(format!("t:{c}"));
        cols.push(lookup(c)?.iter().zip(&tf).map(|(x, t)| x * t).collect());
    }
    if cols.is_empty() {
        return Err(Error::invalid("orthogonalize: empty design"));
    }
    Ok((names, cols))
}

/// OLS of `y` on the design from `spec`; returns residuals `Y^perp` and the
/// coefficients. With `ridge = Some(lambda)` the normal equations get
/// `lambda * I` added instead of failing on collinear columns.
pub fn orthogonalize_outcomes(y: &[f64], t: &[u8], tabular: Option<&Tabular>, spec: &CovariateSpec, ridge: Option<f64>) -> Result<Orthogonalized> {
    let n = y.len();
    if t.len() != n {
        return Err(Error::shape("orthogonalize", "treatments", n, t.len()));
    }
    let (names, cols) = design_matrix(t, tabular, spec)?;
    let p = cols.len();
    let (mut a, mut b) = (cols.clone(), y.to_vec());
    if let Some(lambda) = ridge {
        if lambda <= 0.0 {
            return Err(Error::invalid("orthogonalize: ridge must be positive"));
        }
        let s = lambda.sqrt();
        for (j, col) in a.iter_mut().enumerate() {
            col.extend((0..p).map(|i| if i == j { s } else { 0.0 }));
        }
        b.extend(std::iter::repeat_n(0.0, p));
    } else if n < p {
        return Err(Error::RankDeficient(names));
    }
    let coefficients = least_squares(a, &b).map_err(|bad| Error::RankDeficient(bad.into_iter().map(|j| names[j].clone()).collect()))?;
    let residuals = (0..n)
        .map(|i| y[i] - cols.iter().zip(&coefficients).map(|(c, beta)| c[i] * beta).sum::<f64>())
        .collect();
    Ok(Orthogonalized {
        columns: names,
        coefficients,
        residuals,
    })
}

/// Replaces `y` with its residuals.
pub fn orthogonalize(ds: &TrialDataset, spec: &CovariateSpec, ridge: Option<f64>) -> Result<(TrialDataset, Orthogonalized)> {
    let fit = orthogonalize_outcomes(&ds.y, &ds.t, ds.tabular.as_ref(), spec, ridge)?;
    let mut out = ds.clone();
    out.y = fit.residuals.clone();
    Ok((out, fit))
}

/// Least squares through a modified Gram-Schmidt QR with one
/// reorthogonalization pass. `Err` carries the indices of columns that are
/// (numerically) in the span of earlier ones.
fn least_squares(mut q: Vec<Vec<f64>>, y: &[f64]) -> std::result::Result<Vec<f64>, Vec<usize>> {
    let p = q.len();
    let mut r = vec![vec![0.0; p]; p];
    let mut bad = Vec::new();
    for j in 0..p {
        let norm0 = dot(&q[j], &q[j]).sqrt();
        for _pass in 0..2 {
            for i in 0..j {
                if r[i][i] == 0.0 {
                    continue;
                }
                let c = dot(&q[i], &q[j]);
                r[i][j] += c;
                let (qi, qj) = split_pair(&mut q, i, j);
                for (a, b) in qj.iter_mut().zip(qi.iter()) {
                    *a -= c * b;
                }
            }
        }
        let norm = dot(&q[j], &q[j]).sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            bad.push(j);
            continue;
        }
        r[j][j] = norm;
        for v in q[j].iter_mut() {
            *v /= norm;
        }
    }
    if !bad.is_empty() {
        return Err(bad);
    }
    let qty: Vec<f64> = q.iter().map(|qj| dot(qj, y)).collect();
    let mut beta = vec![0.0; p];
    for j in (0..p).rev() {
        let s: f64 = (j + 1..p).map(|k| r[j][k] * beta[k]).sum();
        beta[j] = (qty[j] - s) / r[j][j];
    }
    Ok(beta)
}

fn split_pair(q: &mut [Vec<f64>], i: usize, j: usize) -> (&[f64], &mut [f64]) {
    debug_assert!(i < j);
    let (lo, hi) = q.split_at_mut(j);
    (&lo[i], &mut hi[0])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
