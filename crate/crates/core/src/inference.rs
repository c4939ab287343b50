//! Test-time clustering of embeddings: K-means, residual-curve model
//! selection, and partition-agreement metrics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::math;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("cannot form {k} clusters from {n} points")]
    TooManyClusters { k: usize, n: usize },
    #[error("need at least {needed} values of K, got {got}")]
    CurveTooShort { needed: usize, got: usize },
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `K x d`
    pub centers: Matrix,
    /// `Σ_m Σ_{i∈C_m} ‖z_i − μ_m‖²`
    pub residual: f64,
    pub iterations: usize,
    /// Residual after every centre update of the winning restart.
    pub trace: Vec<f64>,
}

/// Best-of-`restarts` Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(z: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<ClusterResult, InferenceError> {
    kmeans_with(
        z,
        k,
        &KMeansConfig {
            restarts,
            ..KMeansConfig::default()
        },
        seed,
    )
}

pub fn kmeans_with(z: &Matrix, k: usize, config: &KMeansConfig, seed: u64) -> Result<ClusterResult, InferenceError> {
    let n = z.rows();
    if k == 0 {
        return Err(InferenceError::InvalidArgument("K must be >= 1"));
    }
    if k > n {
        return Err(InferenceError::TooManyClusters { k, n });
    }
    if config.restarts == 0 {
        return Err(InferenceError::InvalidArgument("restarts must be >= 1"));
    }
    let mut rng = seed::rng(seed);
    let mut best: Option<ClusterResult> = None;
    for _ in 0..config.restarts {
        let centers = kmeans_pp(z, k, &mut rng);
        let run = lloyd(z, centers, config.max_iter);
        if best.as_ref().map_or(true, |b| run.residual < b.residual) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_pp(z: &Matrix, k: usize, rng: &mut seed::Rng) -> Matrix {
    let n = z.rows();
    let mut centers = Matrix::zeros(k, z.cols());
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.row_mut(0).copy_from_slice(z.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| linalg::sq_dist(z.row(i), z.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // all remaining mass is zero: take the first unused point
            chosen.iter().position(|&u| !u).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.row_mut(c).copy_from_slice(z.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(linalg::sq_dist(z.row(i), z.row(pick)));
        }
    }
    centers
}

fn nearest(row: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.row_iter().enumerate() {
        let d = linalg::sq_dist(row, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(z: &Matrix, mut centers: Matrix, max_iter: usize) -> ClusterResult {
    let n = z.rows();
    let k = centers.rows();
    let d = z.cols();
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (c, dist) = nearest(z.row(i), &centers);
            dists[i] = dist;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed && iterations > 0 {
            break;
        }
        iterations += 1;

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // repair empty clusters with the point farthest from its centre
        for c in 0..k {
            if counts[c] != 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                if dists[i] > 0.0 {
                    counts[assignments[i]] -= 1;
                    assignments[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                }
            }
        }

        let mut sums = Matrix::zeros(k, d);
        for (i, &a) in assignments.iter().enumerate() {
            linalg::axpy(1.0, z.row(i), sums.row_mut(a));
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        trace.push(residual_of(z, &assignments, &centers));
    }

    let residual = residual_of(z, &assignments, &centers);
    ClusterResult {
        assignments,
        centers,
        residual,
        iterations,
        trace,
    }
}

fn residual_of(z: &Matrix, assignments: &[usize], centers: &Matrix) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| linalg::sq_dist(z.row(i), centers.row(a)))
        .sum()
}

/// K-means residuals `r(K)` for `K` in `k_min..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCurve {
    pub k_min: usize,
    pub values: Vec<f64>,
}

impl ResidualCurve {
    pub fn k_max(&self) -> usize {
        self.k_min + self.values.len().saturating_sub(1)
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        k.checked_sub(self.k_min).and_then(|i| self.values.get(i).copied())
    }
}

pub fn residual_curve(
    z: &Matrix,
    k_min: usize,
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<ResidualCurve, InferenceError> {
    if k_min == 0 || k_min > k_max {
        return Err(InferenceError::InvalidArgument("need 1 <= k_min <= k_max"));
    }
    let values = (k_min..=k_max)
        .map(|k| kmeans(z, k, restarts, seed::derive(seed, k as u64)).map(|r| r.residual))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResidualCurve { k_min, values })
}

/// Elbow by the largest discrete second difference
/// `r(K−1) + r(K+1) − 2 r(K)` over interior `K`; ties go to the smaller `K`.
pub fn select_k_sod(curve: &ResidualCurve) -> Result<usize, InferenceError> {
    let r = &curve.values;
    if r.len() < 3 {
        return Err(InferenceError::CurveTooShort {
            needed: 3,
            got: r.len(),
        });
    }
    let mut best = (1, f64::NEG_INFINITY);
    for i in 1..r.len() - 1 {
        let sod = r[i - 1] + r[i + 1] - 2.0 * r[i];
        if sod > best.1 {
            best = (i, sod);
        }
    }
    Ok(curve.k_min + best.0)
}

/// Mean silhouette coefficient of a partition under Euclidean distance.
///
/// Points in singleton clusters score 0, as do points with `a = b = 0`.
pub fn silhouette(z: &Matrix, assignments: &[usize]) -> f64 {
    let n = z.rows();
    if n == 0 {
        return 0.0;
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = assignments[i];
        if counts[own] <= 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += math::sqrt(linalg::sq_dist(z.row(i), z.row(j)));
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSelection {
    pub k: usize,
    /// Mean silhouette for each `K` in `k_min..=k_max`.
    pub scores: Vec<f64>,
}

/// `K` in `k_min..=k_max` maximizing the mean silhouette (ties to smaller `K`).
pub fn select_k_silhouette(
    z: &Matrix,
    k_min: usize,
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<SilhouetteSelection, InferenceError> {
    if k_min < 2 {
        return Err(InferenceError::InvalidArgument("silhouette needs k_min >= 2"));
    }
    if k_max < k_min {
        return Err(InferenceError::CurveTooShort { needed: 1, got: 0 });
    }
    let mut scores = Vec::with_capacity(k_max - k_min + 1);
    let mut best = (k_min, f64::NEG_INFINITY);
    for k in k_min..=k_max {
        let res = kmeans(z, k, restarts, seed::derive(seed, k as u64))?;
        let s = silhouette(z, &res.assignments);
        if s > best.1 {
            best = (k, s);
        }
        scores.push(s);
    }
    Ok(SilhouetteSelection { k: best.0, scores })
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns the column assigned to each row.
pub fn optimal_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; p[j] = row matched to column j
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Dense relabelling of arbitrary labels in sorted order.
fn compact<T: Ord + Copy>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        map.entry(l).or_insert(0usize);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

/// Correct matches under the best one-to-one relabelling of predictions.
/// `None` predictions never match.
fn best_matches(pred: &[Option<usize>], truth: &[usize]) -> usize {
    let present: Vec<usize> = pred.iter().flatten().copied().collect();
    let (pred_ids, kp) = compact(&present);
    let (truth_ids, kt) = compact(truth);
    let size = kp.max(kt);
    if size == 0 {
        return 0;
    }
    let mut counts = vec![vec![0i64; size]; size];
    let mut it = pred_ids.into_iter();
    for (p, &t) in pred.iter().zip(&truth_ids) {
        if p.is_some() {
            let pi = it.next().expect("one id per assigned point");
            counts[pi][t] += 1;
        }
    }
    let cost: Vec<Vec<i64>> = counts.iter().map(|r| r.iter().map(|&c| -c).collect()).collect();
    let assign = optimal_assignment(&cost);
    assign.iter().enumerate().map(|(r, &c)| counts[r][c] as usize).sum()
}

/// Misclassification fraction under the best one-to-one mapping of predicted
/// to true labels.
pub fn error_rate(pred: &[usize], truth: &[usize]) -> Result<f64, InferenceError> {
    let pred: Vec<Option<usize>> = pred.iter().copied().map(Some).collect();
    error_rate_partial(&pred, truth)
}

/// [`error_rate`] where unassigned (`None`) predictions always count as errors.
pub fn error_rate_partial(pred: &[Option<usize>], truth: &[usize]) -> Result<f64, InferenceError> {
    if pred.len() != truth.len() {
        return Err(InferenceError::LengthMismatch(pred.len(), truth.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let correct = best_matches(pred, truth);
    Ok((truth.len() - correct) as f64 / truth.len() as f64)
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * math::ln(p)
        })
        .sum()
}

/// Normalized mutual information `I / sqrt(H(pred) H(truth))`.
///
/// Two single-cluster partitions score 1; a single-cluster partition against
/// a non-trivial one scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64, InferenceError> {
    if pred.len() != truth.len() {
        return Err(InferenceError::LengthMismatch(pred.len(), truth.len()));
    }
    let n = pred.len();
    if n == 0 {
        return Ok(1.0);
    }
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut joint = vec![0usize; kp * kt];
    let mut cp = vec![0usize; kp];
    let mut ct = vec![0usize; kt];
    for (&a, &b) in p.iter().zip(&t) {
        joint[a * kt + b] += 1;
        cp[a] += 1;
        ct[b] += 1;
    }
    let nf = n as f64;
    let hp = entropy(&cp, nf);
    let ht = entropy(&ct, nf);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for a in 0..kp {
        for b in 0..kt {
            let c = joint[a * kt + b];
            if c > 0 {
                let pab = c as f64 / nf;
                mi += pab * math::ln(pab * nf * nf / (cp[a] as f64 * ct[b] as f64));
            }
        }
    }
    Ok((mi / math::sqrt(hp * ht)).clamp(0.0, 1.0))
}

/// How the number of clusters is chosen at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KMode {
    #[serde(rename = "ground_truth")]
    GroundTruthK,
    #[serde(rename = "sod")]
    EstimateSod,
    #[serde(rename = "silhouette")]
    EstimateSilhouette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub kmeans: KMeansConfig,
    /// Inclusive `K` range scanned by the residual curve.
    pub sod_range: (usize, usize),
    pub silhouette_range: (usize, usize),
    /// Compute the curve and both estimates even when `K` is known.
    pub model_selection: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            sod_range: (1, 8),
            silhouette_range: (2, 8),
            model_selection: true,
            seed: 0,
        }
    }
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub k_true: usize,
    pub k_est_sod: Option<usize>,
    pub k_est_silh: Option<usize>,
    pub k_used: usize,
    pub error_rate: f64,
    pub nmi: f64,
    /// `r(K)` over the SOD range, when model selection ran.
    pub residuals: Vec<f64>,
    pub assignments: Vec<usize>,
}

/// Clusters one embedding and scores it against `labels`.
pub fn evaluate_embedding(
    sample_id: &str,
    z: &Matrix,
    labels: &[usize],
    k_true: usize,
    mode: KMode,
    config: &InferenceConfig,
) -> Result<SampleMetrics, InferenceError> {
    let n = z.rows();
    let sample_seed = seed::derive(config.seed, sample_stream(sample_id));
    let want_selection = config.model_selection || mode != KMode::GroundTruthK;

    let (mut k_est_sod, mut k_est_silh, mut residuals) = (None, None, Vec::new());
    if want_selection {
        let (lo, hi) = config.sod_range;
        let hi = hi.min(n);
        if lo >= 1 && hi >= lo {
            let curve = residual_curve(z, lo, hi, config.kmeans.restarts, sample_seed)?;
            k_est_sod = select_k_sod(&curve).ok();
            residuals = curve.values;
        }
        let (lo, hi) = config.silhouette_range;
        let hi = hi.min(n.saturating_sub(1));
        if lo >= 2 && hi >= lo {
            k_est_silh = Some(select_k_silhouette(z, lo, hi, config.kmeans.restarts, sample_seed)?.k);
        }
    }

    let k_used = match mode {
        KMode::GroundTruthK => k_true,
        KMode::EstimateSod => k_est_sod.ok_or(InferenceError::CurveTooShort { needed: 3, got: residuals.len() })?,
        KMode::EstimateSilhouette => k_est_silh.ok_or(InferenceError::CurveTooShort { needed: 1, got: 0 })?,
    }
    .clamp(1, n.max(1));
    let clustering = kmeans_with(z, k_used, &config.kmeans, seed::derive(sample_seed, 0xC1u64))?;
    Ok(SampleMetrics {
        sample_id: String::from(sample_id),
        k_true,
        k_est_sod,
        k_est_silh,
        k_used,
        error_rate: error_rate(&clustering.assignments, labels)?,
        nmi: nmi(&clustering.assignments, labels)?,
        residuals,
        assignments: clustering.assignments,
    })
}

/// Aggregate over per-sample metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub samples: usize,
    pub mean_error: f64,
    pub median_error: f64,
    pub mean_nmi: f64,
    /// Fraction of samples whose SOD estimate equals the true `K`.
    pub sod_correct: f64,
    pub silhouette_correct: f64,
}

/// Per-sample rows plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<SampleMetrics>,
    pub summary: MetricsSummary,
}

pub fn summarize(rows: &[SampleMetrics]) -> MetricsSummary {
    let n = rows.len();
    if n == 0 {
        return MetricsSummary {
            samples: 0,
            mean_error: 0.0,
            median_error: 0.0,
            mean_nmi: 0.0,
            sod_correct: 0.0,
            silhouette_correct: 0.0,
        };
    }
    let nf = n as f64;
    let mut errs: Vec<f64> = rows.iter().map(|r| r.error_rate).collect();
    errs.sort_by(f64::total_cmp);
    let median_error = if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    };
    MetricsSummary {
        samples: n,
        mean_error: rows.iter().map(|r| r.error_rate).sum::<f64>() / nf,
        median_error,
        mean_nmi: rows.iter().map(|r| r.nmi).sum::<f64>() / nf,
        sod_correct: rows.iter().filter(|r| r.k_est_sod == Some(r.k_true)).count() as f64 / nf,
        silhouette_correct: rows.iter().filter(|r| r.k_est_silh == Some(r.k_true)).count() as f64 / nf,
    }
}

/// Stable 64-bit hash of a sample id, used to key per-sample seeds.
pub(crate) fn sample_stream(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
