//! Point-wise embedding network.
//!
//! Every block applies one shared linear map to each point, standardizes each
//! channel across the points of the sample (context normalization), adds a
//! per-channel shift and applies ReLU. Blocks whose input and output widths
//! agree carry an identity skip. A final linear projection maps to the
//! embedding dimension and each row is L2-normalized.
//!
//! Because every operation is either per-point or a symmetric reduction over
//! points, the network is permutation equivariant.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::math;
use crate::seed;

/// Added to the per-channel variance before the square root.
pub const CONTEXT_NORM_EPS: f64 = 1e-8;

/// Floor on the pre-normalization row norm.
const ROW_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("context normalization needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("invalid network configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            width: 128,
            depth: 12,
            embed_dim: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::InvalidConfig("input_dim must be >= 1"));
        }
        if self.width == 0 {
            return Err(NetError::InvalidConfig("width must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(NetError::InvalidConfig("embed_dim must be >= 1"));
        }
        Ok(())
    }
}

/// `out = W x (+ b)` with `W` stored `out_dim x in_dim` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, gain: f64, rng: &mut seed::Rng) -> Self {
        let std = math::sqrt(gain / in_dim as f64);
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    /// Applies the weights to every row of `x` (`n x in_dim`), without bias.
    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.out_dim];
        for (xi, oi) in x.chunks_exact(self.in_dim).zip(out.chunks_exact_mut(self.out_dim)) {
            for (o, w) in oi.iter_mut().zip(self.weight.chunks_exact(self.in_dim)) {
                *o = linalg::dot(w, xi);
            }
        }
        out
    }

    /// Accumulates `dW += gᵀ x` and returns `g W` (gradient w.r.t. `x`).
    fn backward(&self, x: &[f64], g: &[f64], dw: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        for ((xi, gi), dxi) in x
            .chunks_exact(self.in_dim)
            .zip(g.chunks_exact(self.out_dim))
            .zip(dx.chunks_exact_mut(self.in_dim))
        {
            for ((&go, w), dw_row) in gi
                .iter()
                .zip(self.weight.chunks_exact(self.in_dim))
                .zip(dw.chunks_exact_mut(self.in_dim))
            {
                if go == 0.0 {
                    continue;
                }
                linalg::axpy(go, xi, dw_row);
                linalg::axpy(go, w, dxi);
            }
        }
        dx
    }
}

/// One context-normalized block. `linear.bias` is the per-channel shift
/// applied after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: Linear,
}

impl Block {
    fn residual(&self) -> bool {
        self.linear.in_dim == self.linear.out_dim
    }
}

/// N x d matrix whose rows have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Matrix);

impl Embedding {
    /// Wraps `m` after checking every row norm is 1 within 1e-9.
    pub fn new(m: Matrix) -> Option<Self> {
        let ok = m.row_iter().all(|r| (linalg::norm(r) - 1.0).abs() <= 1e-9);
        ok.then_some(Self(m))
    }

    /// Normalizes every row of `m`.
    pub fn normalize(mut m: Matrix) -> Self {
        let d = m.cols();
        for r in m.as_mut_slice().chunks_exact_mut(d.max(1)) {
            let n = linalg::norm(r).max(ROW_NORM_FLOOR);
            r.iter_mut().for_each(|v| *v /= n);
        }
        Self(m)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

impl core::ops::Deref for Embedding {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    normed: Vec<f64>,
    inv_std: Vec<f64>,
    active: Vec<bool>,
}

/// Activations kept by [`EmbedNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    n: usize,
    blocks: Vec<BlockCache>,
    head_input: Vec<f64>,
    row_norms: Vec<f64>,
    output: Embedding,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Embedding {
        &self.output
    }

    pub fn into_embedding(self) -> Embedding {
        self.output
    }

    /// Which ReLUs fired, block by block. Two parameter settings with the
    /// same pattern lie in one smooth piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.active.iter().copied()).collect()
    }
}

/// Gradients in the same tensor order as [`EmbedNet::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &EmbedNet) -> Self {
        Self {
            tensors: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.tensors.iter().map(Vec::as_slice).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedNet {
    pub config: NetConfig,
    pub blocks: Vec<Block>,
    pub out_proj: Linear,
    pub seed: u64,
    /// Bumped on every mutable parameter access; caches record it.
    #[serde(skip)]
    version: u64,
}

impl PartialEq for EmbedNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.blocks == other.blocks
            && self.out_proj == other.out_proj
            && self.seed == other.seed
    }
}

impl EmbedNet {
    /// Fresh network with fan-in scaled Gaussian weights and zero shifts.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut blocks = Vec::with_capacity(config.depth);
        let mut in_dim = config.input_dim;
        for _ in 0..config.depth {
            blocks.push(Block {
                linear: Linear::init(in_dim, config.width, 2.0, &mut rng),
            });
            in_dim = config.width;
        }
        let out_proj = Linear::init(in_dim, config.embed_dim, 1.0, &mut rng);
        Ok(Self {
            config,
            blocks,
            out_proj,
            seed,
            version: 0,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors: per block weight then shift, then projection
    /// weight and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push(b.linear.weight.as_slice());
            out.push(b.linear.bias.as_slice());
        }
        out.push(self.out_proj.weight.as_slice());
        out.push(self.out_proj.bias.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = self.version.wrapping_add(1);
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(b.linear.weight.as_mut_slice());
            out.push(b.linear.bias.as_mut_slice());
        }
        out.push(self.out_proj.weight.as_mut_slice());
        out.push(self.out_proj.bias.as_mut_slice());
        out
    }

    /// Embeds the rows of `points` (`N x input_dim`).
    pub fn forward(&self, points: &Matrix) -> Result<ForwardCache, NetError> {
        let n = points.rows();
        if points.cols() != self.config.input_dim {
            return Err(NetError::DimensionMismatch {
                expected: self.config.input_dim,
                got: points.cols(),
            });
        }
        if n < 2 {
            return Err(NetError::TooFewPoints(n));
        }
        if points.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteInput);
        }

        let mut h = points.as_slice().to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let lin = &block.linear;
            let w = lin.out_dim;
            let mut u = lin.apply(&h, n);
            let inv_std = context_normalize(&mut u, n, w);
            let normed = u;
            let mut active = vec![false; n * w];
            let mut next = if block.residual() { h.clone() } else { vec![0.0; n * w] };
            for i in 0..n {
                for c in 0..w {
                    let a = normed[i * w + c] + lin.bias[c];
                    if a > 0.0 {
                        active[i * w + c] = true;
                        next[i * w + c] += a;
                    }
                }
            }
            caches.push(BlockCache {
                input: h,
                normed,
                inv_std,
                active,
            });
            h = next;
        }

        let d = self.config.embed_dim;
        let mut y = self.out_proj.apply(&h, n);
        let mut row_norms = Vec::with_capacity(n);
        for row in y.chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(&self.out_proj.bias) {
                *v += b;
            }
            let nrm = linalg::norm(row).max(ROW_NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= nrm);
            row_norms.push(nrm);
        }

        Ok(ForwardCache {
            version: self.version,
            n,
            blocks: caches,
            head_input: h,
            row_norms,
            output: Embedding(Matrix::from_vec(n, d, y)),
        })
    }

    /// Convenience wrapper returning only the embedding.
    pub fn embed(&self, points: &Matrix) -> Result<Embedding, NetError> {
        self.forward(points).map(ForwardCache::into_embedding)
    }

    /// Back-propagates `grad_z` (∂L/∂Z, `N x embed_dim`) to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_z: &Matrix) -> Result<ParamGrads, NetError> {
        if cache.version != self.version || cache.blocks.len() != self.blocks.len() {
            return Err(NetError::StaleCache);
        }
        let n = cache.n;
        let d = self.config.embed_dim;
        if grad_z.rows() != n || grad_z.cols() != d {
            return Err(NetError::DimensionMismatch {
                expected: n * d,
                got: grad_z.rows() * grad_z.cols(),
            });
        }

        let mut grads = ParamGrads::zeros_like(self);
        let nt = grads.tensors.len();

        // row normalization: dy = (dz - z (z·dz)) / ||y||
        let z = cache.output.as_slice();
        let mut dy = vec![0.0; n * d];
        for i in 0..n {
            let zi = &z[i * d..(i + 1) * d];
            let gi = &grad_z.row(i);
            let proj = linalg::dot(zi, gi);
            let inv = 1.0 / cache.row_norms[i];
            for c in 0..d {
                dy[i * d + c] = (gi[c] - zi[c] * proj) * inv;
            }
        }
        {
            let db = &mut grads.tensors[nt - 1];
            for row in dy.chunks_exact(d) {
                linalg::axpy(1.0, row, db);
            }
        }
        let mut dh = self.out_proj.backward(&cache.head_input, &dy, &mut grads.tensors[nt - 2]);

        for (bi, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let lin = &block.linear;
            let w = lin.out_dim;
            // ReLU and shift
            let mut da = vec![0.0; n * w];
            for (k, (&g, &on)) in dh.iter().zip(&bc.active).enumerate() {
                if on {
                    da[k] = g;
                }
            }
            {
                let dshift = &mut grads.tensors[2 * bi + 1];
                for row in da.chunks_exact(w) {
                    linalg::axpy(1.0, row, dshift);
                }
            }
            let du = context_normalize_backward(&da, &bc.normed, &bc.inv_std, n, w);
            let mut dx = lin.backward(&bc.input, &du, &mut grads.tensors[2 * bi]);
            if block.residual() {
                linalg::axpy(1.0, &dh, &mut dx);
            }
            dh = dx;
        }
        Ok(grads)
    }
}

/// Standardizes each column of `u` (`n x w`) in place; returns `1/σ̂` per
/// column.
fn context_normalize(u: &mut [f64], n: usize, w: usize) -> Vec<f64> {
    let mut mean = vec![0.0; w];
    for row in u.chunks_exact(w) {
        linalg::axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; w];
    for row in u.chunks_exact(w) {
        for c in 0..w {
            let t = row[c] - mean[c];
            var[c] += t * t;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / math::sqrt(v / n as f64 + CONTEXT_NORM_EPS))
        .collect();
    for row in u.chunks_exact_mut(w) {
        for c in 0..w {
            row[c] = (row[c] - mean[c]) * inv_std[c];
        }
    }
    inv_std
}

/// `du = s (g − mean(g) − x̂ · mean(g x̂))` per column.
fn context_normalize_backward(g: &[f64], normed: &[f64], inv_std: &[f64], n: usize, w: usize) -> Vec<f64> {
    let mut mean_g = vec![0.0; w];
    let mut mean_gx = vec![0.0; w];
    for (gr, xr) in g.chunks_exact(w).zip(normed.chunks_exact(w)) {
        for c in 0..w {
            mean_g[c] += gr[c];
            mean_gx[c] += gr[c] * xr[c];
        }
    }
    let inv_n = 1.0 / n as f64;
    mean_g.iter_mut().for_each(|v| *v *= inv_n);
    mean_gx.iter_mut().for_each(|v| *v *= inv_n);
    let mut du = vec![0.0; g.len()];
    for ((gr, xr), dr) in g.chunks_exact(w).zip(normed.chunks_exact(w)).zip(du.chunks_exact_mut(w)) {
        for c in 0..w {
            dr[c] = inv_std[c] * (gr[c] - mean_g[c] - xr[c] * mean_gx[c]);
        }
    }
    du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn small(depth: usize) -> EmbedNet {
        EmbedNet::init(
            NetConfig {
                input_dim: 2,
                width: 8,
                depth,
                embed_dim: 3,
            },
            17,
        )
        .unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn outputs_are_unit_norm() {
        let net = small(3);
        let z = net.embed(&random_points(25, 1)).unwrap();
        for r in z.row_iter() {
            assert!((linalg::norm(r) - 1.0).abs() < 1e-9);
        }
        assert!(Embedding::new(z.as_matrix().clone()).is_some());
    }

    #[test]
    fn identical_points_get_identical_embeddings() {
        let net = small(2);
        let x = Matrix::from_rows(&[[0.3, -0.7], [0.3, -0.7]]);
        let z = net.embed(&x).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn depth_zero_is_a_projection() {
        let net = small(0);
        assert!(net.blocks.is_empty());
        let z = net.embed(&random_points(5, 2)).unwrap();
        assert_eq!(z.dim(), 3);
    }

    #[test]
    fn default_config_constructs() {
        let net = EmbedNet::init(NetConfig::default(), 0).unwrap();
        assert_eq!(net.blocks.len(), 12);
        assert_eq!(net.embed_dim(), 5);
        let z = net.embed(&random_points(10, 3)).unwrap();
        assert_eq!((z.len(), z.dim()), (10, 5));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(2), small(2));
        let other = EmbedNet::init(small(2).config, 18).unwrap();
        assert_ne!(small(2), other);
    }

    #[test]
    fn input_validation() {
        let net = small(1);
        assert_eq!(
            net.forward(&Matrix::zeros(4, 3)).unwrap_err(),
            NetError::DimensionMismatch { expected: 2, got: 3 }
        );
        assert_eq!(net.forward(&Matrix::zeros(1, 2)).unwrap_err(), NetError::TooFewPoints(1));
        let mut bad = Matrix::zeros(3, 2);
        bad.set(0, 0, f64::NAN);
        assert_eq!(net.forward(&bad).unwrap_err(), NetError::NonFiniteInput);
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_linearity_holds() {
        let net = small(2);
        let x = random_points(10, 4);
        let cache = net.forward(&x).unwrap();
        let zero = net.backward(&cache, &Matrix::zeros(10, 3)).unwrap();
        assert!(zero.tensors.iter().flatten().all(|&v| v == 0.0));

        let mut rng = seed::rng(5);
        let g = Matrix::from_vec(10, 3, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut g2 = g.clone();
        g2.scale(2.0);
        let a = net.backward(&cache, &g).unwrap();
        let b = net.backward(&cache, &g2).unwrap();
        for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
            for (va, vb) in ta.iter().zip(tb) {
                assert!((2.0 * va - vb).abs() <= 1e-12 * vb.abs().max(1.0));
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = small(1);
        let cache = net.forward(&random_points(4, 6)).unwrap();
        net.tensors_mut()[0][0] += 0.1;
        assert_eq!(
            net.backward(&cache, &Matrix::zeros(4, 3)).unwrap_err(),
            NetError::StaleCache
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = small(2);
        let x = random_points(10, 8);
        let mut rng = seed::rng(9);
        let g = Matrix::from_vec(10, 3, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
        // L = <g, Z>
        let loss = |net: &EmbedNet| linalg::dot(net.embed(&x).unwrap().as_slice(), g.as_slice());
        let cache = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &g).unwrap();
        let h = 1e-5;
        for t in 0..analytic.tensors.len() {
            for k in 0..analytic.tensors[t].len() {
                let orig = net.tensors()[t][k];
                net.tensors_mut()[t][k] = orig + h;
                let lp = loss(&net);
                net.tensors_mut()[t][k] = orig - h;
                let lm = loss(&net);
                net.tensors_mut()[t][k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = analytic.tensors[t][k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "tensor {t} entry {k}: {a} vs {fd}");
            }
        }
    }
}
