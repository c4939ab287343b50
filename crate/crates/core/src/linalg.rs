//! Small dense linear algebra: a row-major matrix plus the handful of
//! factorizations the conic solvers need.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps `data` as a `rows x cols` matrix. Panics on a length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * C);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols: C,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Returns a copy with rows reordered so that row `i` of the result is
    /// row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(perm.len(), self.cols);
        for (dst, &src) in perm.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for r in self.row_iter() {
            for a in 0..n {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                let dst = &mut out.data[a * n..(a + 1) * n];
                for (d, &rb) in dst.iter_mut().zip(r) {
                    *d += ra * rb;
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // four independent partial sums let the compiler pipeline the loop
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching unit eigenvectors
/// as the rows of the second value.
pub fn symmetric_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(m.rows, m.cols, "symmetric_eigen needs a square matrix");
    let n = m.rows;
    let mut a = m.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = a.get(i, j) * a.get(i, j);
                total += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = math::copysign(1.0, theta) / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(dst, k, v.get(k, src));
        }
    }
    (values, vectors)
}

/// Determinant by LU with partial pivoting. Consumes its scratch copy.
pub fn determinant(m: &Matrix) -> f64 {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = math::abs(a.get(col, col));
        for r in (col + 1)..n {
            let v = math::abs(a.get(r, col));
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                let t = a.get(col, k);
                a.set(col, k, a.get(piv, k));
                a.set(piv, k, t);
            }
            det = -det;
        }
        let d = a.get(col, col);
        det *= d;
        for r in (col + 1)..n {
            let f = a.get(r, col) / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                let v = a.get(r, k) - f * a.get(col, k);
                a.set(r, k, v);
            }
        }
    }
    det
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot falls below `tol` relative to the largest entry.
pub fn solve(m: &Matrix, b: &[f64], tol: f64) -> Option<Vec<f64>> {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let scale = m.data.iter().fold(0.0_f64, |acc, v| acc.max(math::abs(*v)));
    if scale == 0.0 {
        return None;
    }
    let mut a = m.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if math::abs(a.get(r, col)) > math::abs(a.get(piv, col)) {
                piv = r;
            }
        }
        if math::abs(a.get(piv, col)) <= tol * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                let t = a.get(col, k);
                a.set(col, k, a.get(piv, k));
                a.set(piv, k, t);
            }
            x.swap(col, piv);
        }
        let d = a.get(col, col);
        for r in (col + 1)..n {
            let f = a.get(r, col) / d;
            for k in col..n {
                let v = a.get(r, k) - f * a.get(col, k);
                a.set(r, k, v);
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for k in (col + 1)..n {
            s -= a.get(col, k) * x[k];
        }
        x[col] = s / a.get(col, col);
    }
    Some(x)
}

/// Inverse of a 3x3 matrix, `None` if singular relative to `tol`.
pub fn inverse3(m: &[[f64; 3]; 3], tol: f64) -> Option<[[f64; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let scale = m.iter().flatten().fold(0.0_f64, |acc, v| acc.max(math::abs(*v)));
    if scale == 0.0 || math::abs(det) <= tol * scale * scale * scale {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [
            c00 * inv_det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det,
        ],
        [
            c01 * inv_det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det,
        ],
        [
            c02 * inv_det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det,
        ],
    ])
}

pub fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

#[inline]
pub fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Real eigenpairs of a general 3x3 matrix.
///
/// Eigenvalues come from the characteristic cubic; each eigenvector is the
/// largest cross product of two rows of `m - λI`. Complex pairs are skipped.
pub fn real_eigen3(m: &[[f64; 3]; 3]) -> Vec<(f64, [f64; 3])> {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let minors = m[0][0] * m[1][1] - m[0][1] * m[1][0] + m[0][0] * m[2][2] - m[0][2] * m[2][0]
        + m[1][1] * m[2][2]
        - m[1][2] * m[2][1];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    // λ³ - tr λ² + minors λ - det = 0
    let roots = cubic_real_roots(-tr, minors, -det);
    let mut out = Vec::with_capacity(roots.len());
    for lambda in roots {
        let r0 = [m[0][0] - lambda, m[0][1], m[0][2]];
        let r1 = [m[1][0], m[1][1] - lambda, m[1][2]];
        let r2 = [m[2][0], m[2][1], m[2][2] - lambda];
        let cands = [cross3(&r0, &r1), cross3(&r0, &r2), cross3(&r1, &r2)];
        let best = cands
            .iter()
            .max_by(|a, b| norm(&a[..]).total_cmp(&norm(&b[..])))
            .copied()
            .unwrap_or([0.0; 3]);
        let n = norm(&best);
        if n > 0.0 {
            out.push((lambda, [best[0] / n, best[1] / n, best[2] / n]));
        }
    }
    out
}

/// Real roots of `x³ + a x² + b x + c`, polished by Newton steps.
fn cubic_real_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let q = (a * a - 3.0 * b) / 9.0;
    let r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0;
    let mut roots = Vec::with_capacity(3);
    if r * r < q * q * q {
        let theta = math::acos((r / math::sqrt(q * q * q)).clamp(-1.0, 1.0));
        let sq = -2.0 * math::sqrt(q);
        for k in 0..3 {
            roots.push(sq * math::cos((theta + 2.0 * core::f64::consts::PI * k as f64) / 3.0) - a / 3.0);
        }
    } else {
        let big_a = -math::copysign(1.0, r) * math::cbrt(math::abs(r) + math::sqrt(r * r - q * q * q));
        let big_b = if big_a != 0.0 { q / big_a } else { 0.0 };
        roots.push(big_a + big_b - a / 3.0);
    }
    for x in roots.iter_mut() {
        for _ in 0..3 {
            let f = ((*x + a) * *x + b) * *x + c;
            let df = (3.0 * *x + 2.0 * a) * *x + b;
            if df == 0.0 {
                break;
            }
            let step = f / df;
            if !step.is_finite() {
                break;
            }
            *x -= step;
        }
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_diagonal_and_rotated_spectra() {
        let m = Matrix::from_rows(&[[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]);
        let (vals, vecs) = symmetric_eigen(&m);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vals[2] - 5.0).abs() < 1e-12);
        // m v = λ v
        for k in 0..3 {
            let v = vecs.row(k);
            for i in 0..3 {
                let mv: f64 = (0..3).map(|j| m.get(i, j) * v[j]).sum();
                assert!((mv - vals[k] * v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinant_and_solve_agree() {
        let m = Matrix::from_rows(&[[4.0, 1.0, 2.0], [1.0, 3.0, 0.5], [2.0, 0.5, 6.0]]);
        let det = determinant(&m);
        // cofactor expansion by hand
        let expected = 4.0 * (18.0 - 0.25) - 1.0 * (6.0 - 1.0) + 2.0 * (0.5 - 6.0);
        assert!((det - expected).abs() < 1e-12);
        let x = solve(&m, &[1.0, 2.0, 3.0], 1e-14).unwrap();
        for i in 0..3 {
            let lhs: f64 = (0..3).map(|j| m.get(i, j) * x[j]).sum();
            assert!((lhs - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
        let singular = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        assert!(solve(&singular, &[1.0, 1.0], 1e-12).is_none());
        assert_eq!(determinant(&singular), 0.0);
    }

    #[test]
    fn eigen3_handles_nonsymmetric_input() {
        let m = [[2.0, 1.0, 0.0], [0.0, 3.0, 1.0], [0.0, 0.0, -1.0]];
        let pairs = real_eigen3(&m);
        assert_eq!(pairs.len(), 3);
        for (lambda, v) in pairs {
            for i in 0..3 {
                let mv: f64 = (0..3).map(|j| m[i][j] * v[j]).sum();
                assert!((mv - lambda * v[i]).abs() < 1e-10, "λ={lambda}");
            }
        }
        // rotation block has a complex pair; only the real eigenvalue survives
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        let pairs = real_eigen3(&rot);
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn inverse3_roundtrip() {
        let m = [[3.0, 0.0, 2.0], [2.0, 0.0, -2.0], [0.0, 1.0, 1.0]];
        let inv = inverse3(&m, 1e-14).unwrap();
        let id = mul3(&m, &inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i][j] - e).abs() < 1e-12);
            }
        }
    }
}
