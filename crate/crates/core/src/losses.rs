//! Clustering losses on an embedding `Z` (`N x d`) with ground-truth labels.
//!
//! All gradients are with respect to `Z`; chaining through the row
//! normalization and the network is [`crate::net::EmbedNet::backward`]'s job.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("cluster {0} has no points")]
    EmptyCluster(usize),
    #[error("loss needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("{labels} labels for {points} embedding rows")]
    LengthMismatch { labels: usize, points: usize },
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l2")]
    L2Regression,
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "mimi")]
    Mimi,
    #[serde(rename = "maxinter")]
    MaxInterOnly,
    #[serde(rename = "minintra")]
    MinIntraOnly,
    #[serde(rename = "skmeans")]
    SupervisedKMeans,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::L2Regression,
        LossKind::CrossEntropy,
        LossKind::Mimi,
        LossKind::MaxInterOnly,
        LossKind::MinIntraOnly,
        LossKind::SupervisedKMeans,
    ];

    /// Short name used on the command line and in files.
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L2Regression => "l2",
            LossKind::CrossEntropy => "ce",
            LossKind::Mimi => "mimi",
            LossKind::MaxInterOnly => "maxinter",
            LossKind::MinIntraOnly => "minintra",
            LossKind::SupervisedKMeans => "skmeans",
        }
    }

    /// Whether the loss is built on cluster means and so needs `K >= 2`.
    pub fn needs_two_clusters(self) -> bool {
        matches!(self, LossKind::Mimi | LossKind::MaxInterOnly)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| alloc::format!("unknown loss '{s}' (expected l2, ce, mimi, maxinter, minintra or skmeans)"))
    }
}

/// A loss choice with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Loss {
    pub kind: LossKind,
    /// Weight on the intra-cluster term.
    pub alpha: f64,
    /// Floor added inside both logarithms.
    pub eps: f64,
}

impl Default for Loss {
    fn default() -> Self {
        Self {
            kind: LossKind::Mimi,
            alpha: 1.0,
            eps: 1e-8,
        }
    }
}

impl Loss {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidParameter("alpha must be > 0"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(LossError::InvalidParameter("eps must be > 0"));
        }
        Ok(())
    }

    pub fn evaluate(&self, z: &Matrix, labels: &[usize]) -> Result<LossOutput, LossError> {
        loss_variant(self, z, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// ∂value/∂Z, same shape as `Z`.
    pub grad: Matrix,
}

fn check_lengths(z: &Matrix, labels: &[usize]) -> Result<(), LossError> {
    if z.rows() != labels.len() {
        return Err(LossError::LengthMismatch {
            labels: labels.len(),
            points: z.rows(),
        });
    }
    Ok(())
}

/// `K_ij = 1` iff `labels[i] == labels[j]` (the one-hot Gram matrix `YᵀY`).
pub fn affinity_ideal(labels: &[usize]) -> Matrix {
    let n = labels.len();
    let mut k = Matrix::zeros(n, n);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == lj {
                k.set(i, j, 1.0);
            }
        }
    }
    k
}

/// `‖YᵀY − ZᵀZ‖_F²` over all ordered pairs.
pub fn loss_l2regression(z: &Matrix, labels: &[usize]) -> Result<LossOutput, LossError> {
    check_lengths(z, labels)?;
    let n = z.rows();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, z.cols());
    for i in 0..n {
        let zi = z.row(i);
        for j in 0..n {
            let zj = z.row(j);
            let target = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            let r = target - linalg::dot(zi, zj);
            value += r * r;
            // each pair appears twice in the symmetric sum
            linalg::axpy(-4.0 * r, zj, grad.row_mut(i));
        }
    }
    Ok(LossOutput { value, grad })
}

/// `Σ_ij H(y_ij, σ(z_iᵀz_j))` over all ordered pairs, diagonal included.
pub fn loss_crossentropy(z: &Matrix, labels: &[usize]) -> Result<LossOutput, LossError> {
    check_lengths(z, labels)?;
    let n = z.rows();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, z.cols());
    for i in 0..n {
        let zi = z.row(i);
        for j in 0..n {
            let zj = z.row(j);
            let g = linalg::dot(zi, zj);
            let same = labels[i] == labels[j];
            // -ln σ(g) = softplus(-g), -ln(1 - σ(g)) = softplus(g)
            value += if same { math::softplus(-g) } else { math::softplus(g) };
            let dg = math::sigmoid(g) - if same { 1.0 } else { 0.0 };
            linalg::axpy(2.0 * dg, zj, grad.row_mut(i));
        }
    }
    Ok(LossOutput { value, grad })
}

/// Per-cluster means and scatters plus the extremal indices the
/// max-inter/min-intra family differentiates through.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    /// `K x d`
    pub means: Matrix,
    /// `s_l = Σ_{i∈C_l} ‖z_i − μ_l‖²`
    pub scatters: Vec<f64>,
    pub members: Vec<Vec<usize>>,
    /// Lexicographically first pair `(m, n)`, `m < n`, minimizing `‖μ_m − μ_n‖²`.
    /// `None` when `K < 2`.
    pub closest_pair: Option<(usize, usize)>,
    pub min_mean_sq_dist: f64,
    /// Lowest-index cluster with the largest scatter.
    pub widest: usize,
    pub max_scatter: f64,
}

impl ClusterStats {
    pub fn k(&self) -> usize {
        self.scatters.len()
    }
}

/// Cluster statistics with `K = max(label) + 1`.
pub fn cluster_stats(z: &Matrix, labels: &[usize]) -> Result<ClusterStats, LossError> {
    check_lengths(z, labels)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = z.cols();
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(LossError::EmptyCluster(empty));
    }
    let mut means = Matrix::zeros(k, d);
    for (l, idx) in members.iter().enumerate() {
        let mu = means.row_mut(l);
        for &i in idx {
            linalg::axpy(1.0, z.row(i), mu);
        }
        let inv = 1.0 / idx.len() as f64;
        mu.iter_mut().for_each(|v| *v *= inv);
    }
    let scatters: Vec<f64> = members
        .iter()
        .enumerate()
        .map(|(l, idx)| idx.iter().map(|&i| linalg::sq_dist(z.row(i), means.row(l))).sum())
        .collect();

    let mut closest_pair = None;
    let mut min_mean_sq_dist = f64::INFINITY;
    for m in 0..k {
        for n in (m + 1)..k {
            let dist = linalg::sq_dist(means.row(m), means.row(n));
            if dist < min_mean_sq_dist {
                min_mean_sq_dist = dist;
                closest_pair = Some((m, n));
            }
        }
    }
    let mut widest = 0;
    let mut max_scatter = f64::NEG_INFINITY;
    for (l, &s) in scatters.iter().enumerate() {
        if s > max_scatter {
            max_scatter = s;
            widest = l;
        }
    }
    Ok(ClusterStats {
        means,
        scatters,
        members,
        closest_pair,
        min_mean_sq_dist,
        widest,
        max_scatter,
    })
}

/// `-ln(min ‖μ_m − μ_n‖² + eps)` and its gradient.
fn inter_term(stats: &ClusterStats, eps: f64, grad: &mut Matrix) -> Result<f64, LossError> {
    let (m, n) = stats.closest_pair.ok_or(LossError::TooFewClusters(stats.k()))?;
    let denom = stats.min_mean_sq_dist + eps;
    let diff: Vec<f64> = stats
        .means
        .row(m)
        .iter()
        .zip(stats.means.row(n))
        .map(|(a, b)| a - b)
        .collect();
    // ∂D/∂z_i = ±2(μ_m − μ_n)/|C|
    let cm = -2.0 / (stats.members[m].len() as f64 * denom);
    for &i in &stats.members[m] {
        linalg::axpy(cm, &diff, grad.row_mut(i));
    }
    let cn = 2.0 / (stats.members[n].len() as f64 * denom);
    for &i in &stats.members[n] {
        linalg::axpy(cn, &diff, grad.row_mut(i));
    }
    Ok(-math::ln(denom))
}

/// `alpha · ln(max s_l + eps)` and its gradient.
fn intra_term(z: &Matrix, stats: &ClusterStats, alpha: f64, eps: f64, grad: &mut Matrix) -> f64 {
    let l = stats.widest;
    let denom = stats.max_scatter + eps;
    let c = 2.0 * alpha / denom;
    let mu = stats.means.row(l);
    for &i in &stats.members[l] {
        let zi = z.row(i);
        for (g, (a, b)) in grad.row_mut(i).iter_mut().zip(zi.iter().zip(mu)) {
            *g += c * (a - b);
        }
    }
    alpha * math::ln(denom)
}

/// Max-inter/min-intra loss:
/// `-ln(min_{m≠n} ‖μ_m − μ_n‖² + eps) + alpha · ln(max_l s_l + eps)`.
///
/// The gradient flows only through the extremal pair and the extremal
/// cluster; ties resolve to the lowest indices.
pub fn loss_mimi(z: &Matrix, labels: &[usize], alpha: f64, eps: f64) -> Result<LossOutput, LossError> {
    let stats = cluster_stats(z, labels)?;
    if stats.k() < 2 {
        return Err(LossError::TooFewClusters(stats.k()));
    }
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let inter = inter_term(&stats, eps, &mut grad)?;
    let intra = intra_term(z, &stats, alpha, eps, &mut grad);
    Ok(LossOutput {
        value: inter + intra,
        grad,
    })
}

/// Dispatches to the loss selected by `loss.kind`.
///
/// `MaxInterOnly` and `MinIntraOnly` are the two terms of the MIMI loss
/// (so they add up to it exactly); `SupervisedKMeans` is `Σ_l s_l` with the
/// ground-truth assignment held fixed.
pub fn loss_variant(loss: &Loss, z: &Matrix, labels: &[usize]) -> Result<LossOutput, LossError> {
    loss.validate()?;
    match loss.kind {
        LossKind::L2Regression => loss_l2regression(z, labels),
        LossKind::CrossEntropy => loss_crossentropy(z, labels),
        LossKind::Mimi => loss_mimi(z, labels, loss.alpha, loss.eps),
        LossKind::MaxInterOnly => {
            let stats = cluster_stats(z, labels)?;
            let mut grad = Matrix::zeros(z.rows(), z.cols());
            let value = inter_term(&stats, loss.eps, &mut grad)?;
            Ok(LossOutput { value, grad })
        }
        LossKind::MinIntraOnly => {
            let stats = cluster_stats(z, labels)?;
            let mut grad = Matrix::zeros(z.rows(), z.cols());
            let value = intra_term(z, &stats, loss.alpha, loss.eps, &mut grad);
            Ok(LossOutput { value, grad })
        }
        LossKind::SupervisedKMeans => {
            let stats = cluster_stats(z, labels)?;
            let mut grad = Matrix::zeros(z.rows(), z.cols());
            for (l, idx) in stats.members.iter().enumerate() {
                let mu = stats.means.row(l);
                for &i in idx {
                    for (g, (a, b)) in grad.row_mut(i).iter_mut().zip(z.row(i).iter().zip(mu)) {
                        *g = 2.0 * (a - b);
                    }
                }
            }
            Ok(LossOutput {
                value: stats.scatters.iter().sum(),
                grad,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn two_clusters() -> (Matrix, Vec<usize>) {
        (
            Matrix::from_rows(&[[0.8, 0.6], [0.6, 0.8], [-0.8, -0.6], [-0.6, -0.8]]),
            vec![0, 0, 1, 1],
        )
    }

    fn random_unit(n: usize, d: usize, seed_: u64) -> Matrix {
        let mut rng = seed::rng(seed_);
        let mut m = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        for i in 0..n {
            let nrm = linalg::norm(m.row(i));
            m.row_mut(i).iter_mut().for_each(|v| *v /= nrm);
        }
        m
    }

    fn fd_check(loss: &Loss, z: &Matrix, labels: &[usize], tol: f64) {
        let out = loss.evaluate(z, labels).unwrap();
        let h = 1e-5;
        let mut zp = z.clone();
        for k in 0..z.as_slice().len() {
            let orig = zp.as_slice()[k];
            zp.as_mut_slice()[k] = orig + h;
            let lp = loss.evaluate(&zp, labels).unwrap().value;
            zp.as_mut_slice()[k] = orig - h;
            let lm = loss.evaluate(&zp, labels).unwrap().value;
            zp.as_mut_slice()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = out.grad.as_slice()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= tol, "{:?} entry {k}: analytic {a} vs fd {fd}", loss.kind);
        }
    }

    #[test]
    fn affinity_examples() {
        let k = affinity_ideal(&[0, 0, 1]);
        assert_eq!(k, Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        let k = affinity_ideal(&[0, 1, 2]);
        assert_eq!(k, Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        let k = affinity_ideal(&[3, 3]);
        assert!(k.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn l2_examples() {
        // clusters collapsed onto basis vectors reproduce the affinity exactly
        let z = Matrix::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(loss_l2regression(&z, &[0, 0, 1, 2]).unwrap().value, 0.0);
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(loss_l2regression(&z, &[0, 0]).unwrap().value, 2.0);
    }

    #[test]
    fn ce_examples() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = loss_crossentropy(&z, &[0, 0]).unwrap();
        // off-diagonal pairs contribute ln 2 each, diagonal pairs softplus(-1)
        let expected = 2.0 * core::f64::consts::LN_2 + 2.0 * math::softplus(-1.0);
        assert!((out.value - expected).abs() < 1e-12);

        // pulling same-label points together lowers the loss
        let mut prev = f64::INFINITY;
        for step in 0..=5 {
            let t = step as f64 * 0.15;
            let a = [math::cos(t), math::sin(t)];
            let b = [math::cos(1.5 - t), math::sin(1.5 - t)];
            let z = Matrix::from_rows(&[a, b]);
            let v = loss_crossentropy(&z, &[0, 0]).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn cluster_stats_hand_example() {
        let (z, labels) = two_clusters();
        let s = cluster_stats(&z, &labels).unwrap();
        assert!((s.means.get(0, 0) - 0.7).abs() < 1e-15 && (s.means.get(0, 1) - 0.7).abs() < 1e-15);
        assert!((s.means.get(1, 0) + 0.7).abs() < 1e-15);
        assert!((s.scatters[0] - 0.04).abs() < 1e-15 && (s.scatters[1] - 0.04).abs() < 1e-15);
        assert_eq!(s.closest_pair, Some((0, 1)));
        assert_eq!(s.widest, 0);

        let single = cluster_stats(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 1]).unwrap();
        assert_eq!(single.scatters, vec![0.0, 0.0]);

        assert_eq!(
            cluster_stats(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 2]).unwrap_err(),
            LossError::EmptyCluster(1)
        );
    }

    #[test]
    fn cluster_stats_relabel() {
        let (z, _) = two_clusters();
        let a = cluster_stats(&z, &[0, 0, 1, 1]).unwrap();
        let b = cluster_stats(&z, &[1, 1, 0, 0]).unwrap();
        assert_eq!(a.means.row(0), b.means.row(1));
        assert_eq!(a.scatters[0], b.scatters[1]);
        assert_eq!(a.min_mean_sq_dist, b.min_mean_sq_dist);
    }

    #[test]
    fn mimi_examples() {
        let (z, labels) = two_clusters();
        let v = loss_mimi(&z, &labels, 1.0, 0.0).unwrap().value;
        let expected = -math::ln(3.92) + math::ln(0.04);
        assert!((v - expected).abs() < 1e-12);
        assert!((v + 4.585).abs() < 1e-3);

        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let v = loss_mimi(&z, &[0, 1], 1.0, 1e-6).unwrap().value;
        assert!((v - (-math::ln(2.0 + 1e-6) + math::ln(1e-6))).abs() < 1e-12);

        assert_eq!(
            loss_mimi(&z, &[0, 0], 1.0, 1e-8).unwrap_err(),
            LossError::TooFewClusters(1)
        );
    }

    #[test]
    fn variants_add_up_and_collapse() {
        let z = random_unit(12, 4, 3);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mimi = loss_variant(&Loss::new(LossKind::Mimi), &z, &labels).unwrap().value;
        let inter = loss_variant(&Loss::new(LossKind::MaxInterOnly), &z, &labels).unwrap().value;
        let intra = loss_variant(&Loss::new(LossKind::MinIntraOnly), &z, &labels).unwrap().value;
        assert_eq!(inter + intra, mimi);

        let collapsed = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let v = loss_variant(&Loss::new(LossKind::SupervisedKMeans), &collapsed, &[0, 0, 1])
            .unwrap()
            .value;
        assert_eq!(v, 0.0);
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        for trial in 0..10u64 {
            let z = random_unit(10, 3, 100 + trial);
            let labels: Vec<usize> = (0..10).map(|i| (i * 7 + trial as usize) % 2).collect();
            for kind in [LossKind::L2Regression, LossKind::CrossEntropy] {
                fd_check(&Loss::new(kind), &z, &labels, 1e-6);
            }
            for kind in [
                LossKind::Mimi,
                LossKind::MaxInterOnly,
                LossKind::MinIntraOnly,
                LossKind::SupervisedKMeans,
            ] {
                fd_check(&Loss::new(kind), &z, &labels, 1e-4);
            }
        }
    }

    #[test]
    fn mimi_decreases_when_means_separate() {
        // same shape, second cluster shifted further away
        let near = Matrix::from_rows(&[[0.0, 0.1], [0.0, -0.1], [1.0, 0.1], [1.0, -0.1]]);
        let far = Matrix::from_rows(&[[0.0, 0.1], [0.0, -0.1], [2.0, 0.1], [2.0, -0.1]]);
        let l = [0, 0, 1, 1];
        let a = loss_mimi(&near, &l, 1.0, 1e-8).unwrap().value;
        let b = loss_mimi(&far, &l, 1.0, 1e-8).unwrap().value;
        assert!(b < a);
    }

    #[test]
    fn loss_parsing_and_validation() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("bogus".parse::<LossKind>().is_err());
        let bad = Loss {
            alpha: 0.0,
            ..Loss::default()
        };
        assert!(bad.validate().is_err());
        assert!(matches!(
            loss_l2regression(&Matrix::zeros(2, 2), &[0]),
            Err(LossError::LengthMismatch { .. })
        ));
    }
}
