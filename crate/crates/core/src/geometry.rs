//! Conic curves `Ax² + Bxy + Cy² + Dx + Ey + F = 0`: sampling, residuals,
//! minimal solvers and least-squares fits.
//!
//! Every conic carries a unit-norm coefficient vector so algebraic residuals
//! are comparable across models. Least-squares fits run on centred and scaled
//! coordinates and map the result back.

use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::math;
use crate::seed::{self, Rng};

/// Tolerance on the structural zeros a conic kind implies.
pub const KIND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("conic has no real locus that can be sampled")]
    DegenerateModel,
    #[error("coincident points")]
    CoincidentPoints,
    #[error("collinear points")]
    CollinearPoints,
    #[error("points do not determine a unique conic")]
    DegenerateConfiguration,
    #[error("conic through the points is not an ellipse")]
    NotAnEllipse,
    #[error("design matrix is rank deficient")]
    SingularScatter,
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("invalid conic: {0}")]
    InvalidModel(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        math::hypot(self.x - other.x, self.y - other.y)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(p: [f64; 2]) -> Self {
        Self { x: p[0], y: p[1] }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConicKind {
    Line,
    Circle,
    Ellipse,
    GeneralConic,
}

impl ConicKind {
    /// Points in a minimal sample for this kind.
    pub fn minimal_sample_size(self) -> usize {
        match self {
            ConicKind::Line => 2,
            ConicKind::Circle => 3,
            ConicKind::Ellipse | ConicKind::GeneralConic => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConicKind::Line => "line",
            ConicKind::Circle => "circle",
            ConicKind::Ellipse => "ellipse",
            ConicKind::GeneralConic => "general_conic",
        }
    }
}

/// Axis-aligned sampling window for unbounded curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Default for BoundingBox {
    fn default() -> Self {
        Self::square(2.0)
    }
}

impl BoundingBox {
    /// `[-half, half]²`
    pub const fn square(half: f64) -> Self {
        Self {
            min_x: -half,
            max_x: half,
            min_y: -half,
            max_y: half,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.min_x.is_finite()
            && self.max_x.is_finite()
            && self.min_y.is_finite()
            && self.max_y.is_finite()
            && self.min_x < self.max_x
            && self.min_y < self.max_y
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }
}

/// Geometric form of a real ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParams {
    pub center: Point2,
    /// Semi-axis along the direction `angle`.
    pub semi_a: f64,
    /// Semi-axis perpendicular to `angle`.
    pub semi_b: f64,
    pub angle: f64,
}

impl EllipseParams {
    pub fn semi_major(&self) -> f64 {
        self.semi_a.max(self.semi_b)
    }

    pub fn semi_minor(&self) -> f64 {
        self.semi_a.min(self.semi_b)
    }

    pub fn point_at(&self, t: f64) -> Point2 {
        let (s, c) = (math::sin(self.angle), math::cos(self.angle));
        let u = self.semi_a * math::cos(t);
        let v = self.semi_b * math::sin(t);
        Point2::new(self.center.x + u * c - v * s, self.center.y + u * s + v * c)
    }
}

/// A conic with unit-norm coefficients `(A, B, C, D, E, F)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConicModel {
    pub kind: ConicKind,
    pub coeffs: [f64; 6],
}

impl ConicModel {
    /// Normalizes `coeffs` to unit norm and checks the kind's structure.
    pub fn new(kind: ConicKind, coeffs: [f64; 6]) -> Result<Self, GeometryError> {
        let n = linalg::norm(&coeffs);
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::InvalidModel("zero or non-finite coefficients"));
        }
        let mut c = coeffs;
        c.iter_mut().for_each(|v| *v /= n);
        let model = Self { kind, coeffs: c };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let [a, b, c, ..] = self.coeffs;
        match self.kind {
            ConicKind::Line => {
                if a.abs() > KIND_TOL || b.abs() > KIND_TOL || c.abs() > KIND_TOL {
                    return Err(GeometryError::InvalidModel("line with quadratic terms"));
                }
            }
            ConicKind::Circle => {
                if (a - c).abs() > KIND_TOL || b.abs() > KIND_TOL || a.abs() <= KIND_TOL {
                    return Err(GeometryError::InvalidModel("circle needs A = C != 0, B = 0"));
                }
            }
            ConicKind::Ellipse => {
                if self.discriminant() >= 0.0 {
                    return Err(GeometryError::InvalidModel("ellipse needs B^2 - 4AC < 0"));
                }
            }
            ConicKind::GeneralConic => {}
        }
        Ok(())
    }

    /// The line `a x + b y + c = 0`.
    pub fn line(a: f64, b: f64, c: f64) -> Result<Self, GeometryError> {
        if a == 0.0 && b == 0.0 {
            return Err(GeometryError::InvalidModel("line normal is zero"));
        }
        Self::new(ConicKind::Line, [0.0, 0.0, 0.0, a, b, c])
    }

    pub fn circle(center: Point2, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidModel("radius must be positive"));
        }
        let (cx, cy) = (center.x, center.y);
        Self::new(
            ConicKind::Circle,
            [1.0, 0.0, 1.0, -2.0 * cx, -2.0 * cy, cx * cx + cy * cy - radius * radius],
        )
    }

    pub fn ellipse(params: &EllipseParams) -> Result<Self, GeometryError> {
        let EllipseParams {
            center,
            semi_a,
            semi_b,
            angle,
        } = *params;
        if !(semi_a > 0.0 && semi_b > 0.0) {
            return Err(GeometryError::InvalidModel("semi-axes must be positive"));
        }
        let (s, c) = (math::sin(angle), math::cos(angle));
        let (a2, b2) = (semi_a * semi_a, semi_b * semi_b);
        let a = a2 * s * s + b2 * c * c;
        let b = 2.0 * (b2 - a2) * s * c;
        let cc = a2 * c * c + b2 * s * s;
        let (h, k) = (center.x, center.y);
        let d = -2.0 * a * h - b * k;
        let e = -b * h - 2.0 * cc * k;
        let f = a * h * h + b * h * k + cc * k * k - a2 * b2;
        Self::new(ConicKind::Ellipse, [a, b, cc, d, e, f])
    }

    /// `B² − 4AC`
    pub fn discriminant(&self) -> f64 {
        let [a, b, c, ..] = self.coeffs;
        b * b - 4.0 * a * c
    }

    /// Signed conic polynomial at `p`.
    pub fn evaluate(&self, p: &Point2) -> f64 {
        let [a, b, c, d, e, f] = self.coeffs;
        let (x, y) = (p.x, p.y);
        a * x * x + b * x * y + c * y * y + d * x + e * y + f
    }

    /// `|Ax² + Bxy + Cy² + Dx + Ey + F|` under unit-norm coefficients.
    pub fn residual(&self, p: &Point2) -> f64 {
        math::abs(self.evaluate(p))
    }

    pub fn negated(&self) -> Self {
        let mut c = self.coeffs;
        c.iter_mut().for_each(|v| *v = -*v);
        Self {
            kind: self.kind,
            coeffs: c,
        }
    }

    /// Euclidean distance between coefficient vectors after sign alignment.
    pub fn coeff_distance(&self, other: &ConicModel) -> f64 {
        let mut plus = 0.0;
        let mut minus = 0.0;
        for (a, b) in self.coeffs.iter().zip(&other.coeffs) {
            plus += (a - b) * (a - b);
            minus += (a + b) * (a + b);
        }
        math::sqrt(plus.min(minus))
    }

    fn is_linear(&self) -> bool {
        let [a, b, c, d, e, _] = self.coeffs;
        a.abs() <= KIND_TOL && b.abs() <= KIND_TOL && c.abs() <= KIND_TOL && (d != 0.0 || e != 0.0)
    }

    /// Centre, semi-axes and orientation, or `None` if the conic is not a
    /// real ellipse.
    pub fn ellipse_params(&self) -> Option<EllipseParams> {
        let [a, b, c, d, e, f] = self.coeffs;
        let disc = b * b - 4.0 * a * c;
        if !(disc < 0.0) {
            return None;
        }
        // gradient zero at the centre: [2A B; B 2C] [h k]ᵀ = -[D E]ᵀ
        let det = 4.0 * a * c - b * b;
        let h = (b * e - 2.0 * c * d) / det;
        let k = (b * d - 2.0 * a * e) / det;
        let f0 = a * h * h + b * h * k + c * k * k + d * h + e * k + f;
        // quadratic form [[A, B/2], [B/2, C]]
        let angle = 0.5 * math::atan2(b, a - c);
        let (s, co) = (math::sin(angle), math::cos(angle));
        let lam_u = a * co * co + b * s * co + c * s * s;
        let lam_v = a * s * s - b * s * co + c * co * co;
        let ra = -f0 / lam_u;
        let rb = -f0 / lam_v;
        if !(ra > 0.0 && rb > 0.0 && ra.is_finite() && rb.is_finite()) {
            return None;
        }
        Some(EllipseParams {
            center: Point2::new(h, k),
            semi_a: math::sqrt(ra),
            semi_b: math::sqrt(rb),
            angle,
        })
    }
}

/// Absolute algebraic residual of `p` against `model`.
pub fn algebraic_residual(model: &ConicModel, p: &Point2) -> f64 {
    model.residual(p)
}

/// Samples `n` points on `model` inside the default `[-2, 2]²` window for
/// lines, each perturbed by isotropic Gaussian noise.
pub fn sample_curve(
    model: &ConicModel,
    n: usize,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<Vec<Point2>, GeometryError> {
    let mut rng = seed::rng(rng_seed);
    sample_curve_with(model, n, noise_sigma, &BoundingBox::default(), &mut rng)
}

/// Like [`sample_curve`], drawing from a caller-supplied generator.
///
/// Ellipses and circles are sampled uniformly in eccentric angle; lines
/// uniformly along their clip against `window`.
pub fn sample_curve_with(
    model: &ConicModel,
    n: usize,
    noise_sigma: f64,
    window: &BoundingBox,
    rng: &mut Rng,
) -> Result<Vec<Point2>, GeometryError> {
    if n == 0 {
        return Err(GeometryError::InvalidArgument("n must be at least 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(GeometryError::InvalidArgument("noise sigma must be >= 0"));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|_| GeometryError::InvalidArgument("noise sigma"))?;

    let clean: Vec<Point2> = if model.kind == ConicKind::Line || model.is_linear() {
        let [_, _, _, d, e, f] = model.coeffs;
        let (t0, t1, origin, dir) = clip_line(d, e, f, window).ok_or(GeometryError::DegenerateModel)?;
        (0..n)
            .map(|_| {
                let t = rng.random_range(t0..=t1);
                Point2::new(origin.x + t * dir.x, origin.y + t * dir.y)
            })
            .collect()
    } else {
        let params = model.ellipse_params().ok_or(GeometryError::DegenerateModel)?;
        (0..n)
            .map(|_| params.point_at(rng.random_range(0.0..2.0 * PI)))
            .collect()
    };

    Ok(clean
        .into_iter()
        .map(|p| {
            if noise_sigma == 0.0 {
                p
            } else {
                Point2::new(p.x + noise.sample(rng), p.y + noise.sample(rng))
            }
        })
        .collect())
}

/// Clips `d x + e y + f = 0` to `window` (Liang–Barsky). Returns the
/// parameter interval, the foot point from the origin and the unit direction.
fn clip_line(d: f64, e: f64, f: f64, window: &BoundingBox) -> Option<(f64, f64, Point2, Point2)> {
    let nn = d * d + e * e;
    if nn == 0.0 {
        return None;
    }
    let origin = Point2::new(-f * d / nn, -f * e / nn);
    let len = math::sqrt(nn);
    let dir = Point2::new(-e / len, d / len);
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let edges = [
        (dir.x, window.min_x - origin.x, window.max_x - origin.x),
        (dir.y, window.min_y - origin.y, window.max_y - origin.y),
    ];
    for (dv, lo, hi) in edges {
        if dv.abs() < 1e-15 {
            if lo > 0.0 || hi < 0.0 {
                return None;
            }
        } else {
            let (a, b) = (lo / dv, hi / dv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
    }
    if t1 - t0 > 1e-12 {
        Some((t0, t1, origin, dir))
    } else {
        None
    }
}

pub fn fit_line_minimal(p1: &Point2, p2: &Point2) -> Result<ConicModel, GeometryError> {
    let (dx, dy) = (p2.x - p1.x, p2.y - p1.y);
    if dx == 0.0 && dy == 0.0 {
        return Err(GeometryError::CoincidentPoints);
    }
    // normal (-dy, dx)
    ConicModel::line(-dy, dx, dy * p1.x - dx * p1.y)
}

pub fn fit_circle_minimal(p1: &Point2, p2: &Point2, p3: &Point2) -> Result<ConicModel, GeometryError> {
    let (bx, by) = (p2.x - p1.x, p2.y - p1.y);
    let (cx, cy) = (p3.x - p1.x, p3.y - p1.y);
    let d = 2.0 * (bx * cy - by * cx);
    let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
    if scale == 0.0 || d.abs() <= 1e-12 * scale {
        return Err(GeometryError::CollinearPoints);
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    let center = Point2::new(p1.x + ux, p1.y + uy);
    ConicModel::circle(center, math::hypot(ux, uy))
}

/// Similarity that centres points on their mean and scales the mean
/// distance to √2.
#[derive(Debug, Clone, Copy)]
struct Normalizer {
    cx: f64,
    cy: f64,
    s: f64,
}

impl Normalizer {
    fn fit(points: &[Point2]) -> Self {
        let n = points.len() as f64;
        let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
        let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
        let mean_dist = points.iter().map(|p| math::hypot(p.x - cx, p.y - cy)).sum::<f64>() / n;
        let s = if mean_dist > 0.0 { SQRT_2 / mean_dist } else { 1.0 };
        Self { cx, cy, s }
    }

    fn apply(&self, p: &Point2) -> Point2 {
        Point2::new(self.s * (p.x - self.cx), self.s * (p.y - self.cy))
    }

    /// Maps coefficients of a conic in normalized coordinates back to the
    /// original frame.
    fn denormalize(&self, q: &[f64; 6]) -> [f64; 6] {
        let [a, b, c, d, e, f] = *q;
        let (s, s2, cx, cy) = (self.s, self.s * self.s, self.cx, self.cy);
        [
            a * s2,
            b * s2,
            c * s2,
            -2.0 * a * s2 * cx - b * s2 * cy + d * s,
            -b * s2 * cx - 2.0 * c * s2 * cy + e * s,
            a * s2 * cx * cx + b * s2 * cx * cy + c * s2 * cy * cy - d * s * cx - e * s * cy + f,
        ]
    }
}

fn design_row(p: &Point2) -> [f64; 6] {
    [p.x * p.x, p.x * p.y, p.y * p.y, p.x, p.y, 1.0]
}

/// Null vector of the 5x6 design matrix through five points, via signed
/// 5x5 minors.
fn conic_through_five(points: &[Point2; 5]) -> Result<[f64; 6], GeometryError> {
    let norm = Normalizer::fit(points);
    let rows: Vec<[f64; 6]> = points.iter().map(|p| design_row(&norm.apply(p))).collect();
    let mut v = [0.0; 6];
    for (skip, out) in v.iter_mut().enumerate() {
        let mut m = Matrix::zeros(5, 5);
        for (i, row) in rows.iter().enumerate() {
            let mut c = 0;
            for (j, &val) in row.iter().enumerate() {
                if j != skip {
                    m.set(i, c, val);
                    c += 1;
                }
            }
        }
        let sign = if skip % 2 == 0 { 1.0 } else { -1.0 };
        *out = sign * linalg::determinant(&m);
    }
    if linalg::norm(&v) < 1e-10 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    Ok(norm.denormalize(&v))
}

/// Ellipse through five points.
pub fn fit_ellipse_minimal(points: &[Point2; 5]) -> Result<ConicModel, GeometryError> {
    let coeffs = conic_through_five(points)?;
    let model = ConicModel::new(ConicKind::GeneralConic, coeffs)?;
    if model.discriminant() >= 0.0 || model.ellipse_params().is_none() {
        return Err(GeometryError::NotAnEllipse);
    }
    Ok(ConicModel {
        kind: ConicKind::Ellipse,
        coeffs: model.coeffs,
    })
}

/// Any conic through five points (kind `GeneralConic`).
pub fn fit_conic_minimal(points: &[Point2; 5]) -> Result<ConicModel, GeometryError> {
    ConicModel::new(ConicKind::GeneralConic, conic_through_five(points)?)
}

/// Total least-squares line.
pub fn fit_line_ls(points: &[Point2]) -> Result<ConicModel, GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::InsufficientPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - cx, p.y - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx + syy == 0.0 {
        return Err(GeometryError::CoincidentPoints);
    }
    let cov = Matrix::from_rows(&[[sxx, sxy], [sxy, syy]]);
    let (_, vecs) = linalg::symmetric_eigen(&cov);
    let nrm = vecs.row(0);
    ConicModel::line(nrm[0], nrm[1], -(nrm[0] * cx + nrm[1] * cy))
}

/// Algebraic circle fit minimizing `Σ (x² + y² + Dx + Ey + F)²`.
pub fn fit_circle_ls(points: &[Point2]) -> Result<ConicModel, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::InsufficientPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let norm = Normalizer::fit(points);
    let mut ata = Matrix::zeros(3, 3);
    let mut atb = [0.0; 3];
    for p in points {
        let q = norm.apply(p);
        let row = [q.x, q.y, 1.0];
        let rhs = -(q.x * q.x + q.y * q.y);
        for i in 0..3 {
            atb[i] += row[i] * rhs;
            for j in 0..3 {
                ata.set(i, j, ata.get(i, j) + row[i] * row[j]);
            }
        }
    }
    let sol = linalg::solve(&ata, &atb, 1e-12).ok_or(GeometryError::CollinearPoints)?;
    let coeffs = norm.denormalize(&[1.0, 0.0, 1.0, sol[0], sol[1], sol[2]]);
    let model = ConicModel::new(ConicKind::GeneralConic, coeffs)?;
    // force exact circle structure after the round trip
    let [a, _, c, d, e, f] = model.coeffs;
    let m = 0.5 * (a + c);
    let circle = ConicModel::new(ConicKind::Circle, [m, 0.0, m, d, e, f])?;
    if circle.ellipse_params().is_none() {
        return Err(GeometryError::DegenerateModel);
    }
    Ok(circle)
}

/// Ellipse-specific direct least squares: minimizes the algebraic error
/// subject to `4AC − B² = 1`, solved in the reduced 3x3 form.
pub fn fit_ellipse_direct(points: &[Point2]) -> Result<ConicModel, GeometryError> {
    if points.len() < 6 {
        return Err(GeometryError::InsufficientPoints {
            needed: 6,
            got: points.len(),
        });
    }
    let norm = Normalizer::fit(points);
    let mut s1 = [[0.0; 3]; 3];
    let mut s2 = [[0.0; 3]; 3];
    let mut s3 = [[0.0; 3]; 3];
    for p in points {
        let q = norm.apply(p);
        let quad = [q.x * q.x, q.x * q.y, q.y * q.y];
        let lin = [q.x, q.y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                s1[i][j] += quad[i] * quad[j];
                s2[i][j] += quad[i] * lin[j];
                s3[i][j] += lin[i] * lin[j];
            }
        }
    }
    let s3_inv = linalg::inverse3(&s3, 1e-12).ok_or(GeometryError::SingularScatter)?;
    // T = -S3⁻¹ S2ᵀ
    let mut t = linalg::mul3(&s3_inv, &linalg::transpose3(&s2));
    t.iter_mut().flatten().for_each(|v| *v = -*v);
    let s2t = linalg::mul3(&s2, &t);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = s1[i][j] + s2t[i][j];
        }
    }
    // premultiply by the inverse of the constraint block [[0,0,2],[0,-1,0],[2,0,0]]
    let reduced = [
        [m[2][0] / 2.0, m[2][1] / 2.0, m[2][2] / 2.0],
        [-m[1][0], -m[1][1], -m[1][2]],
        [m[0][0] / 2.0, m[0][1] / 2.0, m[0][2] / 2.0],
    ];

    let mut best: Option<([f64; 6], f64)> = None;
    for (_, a1) in linalg::real_eigen3(&reduced) {
        let constraint = 4.0 * a1[0] * a1[2] - a1[1] * a1[1];
        if constraint <= 0.0 {
            continue;
        }
        let a2: [f64; 3] = core::array::from_fn(|i| (0..3).map(|k| t[i][k] * a1[k]).sum());
        let q = [a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]];
        // algebraic cost aᵀ M a / (4AC − B²) ranks candidates
        let ma: [f64; 3] = core::array::from_fn(|i| (0..3).map(|k| m[i][k] * a1[k]).sum());
        let cost = linalg::dot(&a1, &ma) / constraint;
        if best.map_or(true, |(_, c)| cost < c) {
            best = Some((q, cost));
        }
    }
    let (q, _) = best.ok_or(GeometryError::NotAnEllipse)?;
    let coeffs = norm.denormalize(&q);
    let model = ConicModel::new(ConicKind::GeneralConic, coeffs)?;
    if model.discriminant() >= 0.0 {
        return Err(GeometryError::NotAnEllipse);
    }
    Ok(ConicModel {
        kind: ConicKind::Ellipse,
        coeffs: model.coeffs,
    })
}

/// Least-squares general conic: the unit null vector of the design matrix.
///
/// When the null space is not one-dimensional (points on a line, say) the
/// member with the smallest quadratic part is returned, so exact line data
/// yields `A, B, C ≈ 0`.
pub fn fit_conic_ls(points: &[Point2]) -> Result<ConicModel, GeometryError> {
    if points.len() < 5 {
        return Err(GeometryError::InsufficientPoints {
            needed: 5,
            got: points.len(),
        });
    }
    let norm = Normalizer::fit(points);
    let mut design = Matrix::zeros(points.len(), 6);
    for (i, p) in points.iter().enumerate() {
        design.row_mut(i).copy_from_slice(&design_row(&norm.apply(p)));
    }
    let scatter = design.gram();
    let (vals, vecs) = linalg::symmetric_eigen(&scatter);
    let top = vals[5].max(f64::MIN_POSITIVE);
    let null_dim = vals.iter().take_while(|&&v| v <= 1e-12 * top).count().max(1);
    // fewer than three independent directions cannot pin down even a line
    if 6 - null_dim < 3 {
        return Err(GeometryError::SingularScatter);
    }
    let q: [f64; 6] = if null_dim == 1 {
        core::array::from_fn(|k| vecs.get(0, k))
    } else {
        let mut quad = Matrix::zeros(null_dim, null_dim);
        for i in 0..null_dim {
            for j in 0..null_dim {
                let v: f64 = (0..3).map(|k| vecs.get(i, k) * vecs.get(j, k)).sum();
                quad.set(i, j, v);
            }
        }
        let (_, w) = linalg::symmetric_eigen(&quad);
        core::array::from_fn(|k| (0..null_dim).map(|i| w.get(0, i) * vecs.get(i, k)).sum())
    };
    ConicModel::new(ConicKind::GeneralConic, norm.denormalize(&q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn unit_circle() -> ConicModel {
        ConicModel::circle(Point2::new(0.0, 0.0), 1.0).unwrap()
    }

    fn ellipse_2_1() -> ConicModel {
        ConicModel::ellipse(&EllipseParams {
            center: Point2::new(0.0, 0.0),
            semi_a: 2.0,
            semi_b: 1.0,
            angle: 0.0,
        })
        .unwrap()
    }

    fn ellipse_points(n: usize) -> Vec<Point2> {
        (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                Point2::new(2.0 * math::cos(t), math::sin(t))
            })
            .collect()
    }

    #[test]
    fn unit_circle_samples_lie_on_curve() {
        let pts = sample_curve(&unit_circle(), 4, 0.0, 3).unwrap();
        assert_eq!(pts.len(), 4);
        for p in pts {
            assert!((p.x * p.x + p.y * p.y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn line_noise_matches_half_normal_mean() {
        let line = ConicModel::line(0.0, 1.0, 0.0).unwrap();
        let sigma = 0.05;
        let pts = sample_curve(&line, 100, sigma, 11).unwrap();
        let abs_y: Vec<f64> = pts.iter().map(|p| p.y.abs()).collect();
        let mean = abs_y.iter().sum::<f64>() / 100.0;
        let expected = sigma * math::sqrt(2.0 / PI);
        // sd of |y| for half-normal: sigma * sqrt(1 - 2/pi)
        let se = sigma * math::sqrt(1.0 - 2.0 / PI) / 10.0;
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected}");
        for p in &pts {
            assert!(p.x >= -2.0 && p.x <= 2.0);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let e = ellipse_2_1();
        let a = sample_curve(&e, 50, 0.05, 99).unwrap();
        let b = sample_curve(&e, 50, 0.05, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn imaginary_conic_cannot_be_sampled() {
        // x² + y² + 1 = 0
        let m = ConicModel::new(ConicKind::GeneralConic, [1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(sample_curve(&m, 3, 0.0, 0), Err(GeometryError::DegenerateModel));
        let far = ConicModel::line(1.0, 0.0, -10.0).unwrap();
        assert_eq!(sample_curve(&far, 3, 0.0, 0), Err(GeometryError::DegenerateModel));
    }

    #[test]
    fn noise_free_samples_have_tiny_residual() {
        let models = [
            unit_circle(),
            ellipse_2_1(),
            ConicModel::line(1.0, -2.0, 0.3).unwrap(),
            ConicModel::ellipse(&EllipseParams {
                center: Point2::new(0.4, -0.3),
                semi_a: 1.1,
                semi_b: 0.4,
                angle: 0.7,
            })
            .unwrap(),
        ];
        for m in &models {
            for p in sample_curve(m, 40, 0.0, 5).unwrap() {
                assert!(m.residual(&p) < 1e-9);
            }
        }
    }

    #[test]
    fn residual_examples() {
        assert!(unit_circle().residual(&Point2::new(1.0, 0.0)).abs() < 1e-15);
        let line = ConicModel::line(0.0, 1.0, 0.0).unwrap();
        assert!((line.residual(&Point2::new(3.0, 0.5)) - 0.5).abs() < 1e-15);
        // x²/4 + y² - 1 = 0 -> (1/4, 0, 1, 0, 0, -1) / ||.||
        let e = ellipse_2_1();
        let n = math::sqrt(1.0 / 16.0 + 1.0 + 1.0);
        assert!((e.residual(&Point2::new(0.0, 0.0)) - 1.0 / n).abs() < 1e-12);
        let p = Point2::new(0.3, 0.7);
        assert_eq!(e.residual(&p), e.negated().residual(&p));
    }

    #[test]
    fn minimal_line_examples() {
        let o = Point2::new(0.0, 0.0);
        let l = fit_line_minimal(&o, &Point2::new(1.0, 0.0)).unwrap();
        assert!(l.coeff_distance(&ConicModel::line(0.0, 1.0, 0.0).unwrap()) < 1e-12);
        let l = fit_line_minimal(&o, &Point2::new(0.0, 1.0)).unwrap();
        assert!(l.coeff_distance(&ConicModel::line(1.0, 0.0, 0.0).unwrap()) < 1e-12);
        let l = fit_line_minimal(&o, &Point2::new(1.0, 1.0)).unwrap();
        assert!(l.coeff_distance(&ConicModel::line(1.0, -1.0, 0.0).unwrap()) < 1e-12);
        assert_eq!(fit_line_minimal(&o, &o), Err(GeometryError::CoincidentPoints));
    }

    #[test]
    fn minimal_circle_examples() {
        let c = fit_circle_minimal(&Point2::new(1.0, 0.0), &Point2::new(0.0, 1.0), &Point2::new(-1.0, 0.0)).unwrap();
        let p = c.ellipse_params().unwrap();
        assert!(p.center.dist(&Point2::new(0.0, 0.0)) < 1e-12);
        assert!((p.semi_a - 1.0).abs() < 1e-12 && (p.semi_b - 1.0).abs() < 1e-12);

        let c = fit_circle_minimal(&Point2::new(2.0, 0.0), &Point2::new(0.0, 2.0), &Point2::new(-2.0, 0.0)).unwrap();
        assert!((c.ellipse_params().unwrap().semi_a - 2.0).abs() < 1e-12);

        let center = Point2::new(1.0, 1.0);
        let on = |t: f64| Point2::new(1.0 + 2.0 * math::cos(t), 1.0 + 2.0 * math::sin(t));
        let pts = [on(0.3), on(2.0), on(4.4)];
        let c = fit_circle_minimal(&pts[0], &pts[1], &pts[2]).unwrap();
        let p = c.ellipse_params().unwrap();
        assert!(p.center.dist(&center) < 1e-9);
        assert!((p.semi_a - 2.0).abs() < 1e-9);
        for q in &pts {
            assert!(c.residual(q) < 1e-9);
        }

        assert_eq!(
            fit_circle_minimal(&Point2::new(0.0, 0.0), &Point2::new(1.0, 1.0), &Point2::new(2.0, 2.0)),
            Err(GeometryError::CollinearPoints)
        );
    }

    #[test]
    fn minimal_ellipse_examples() {
        let on = |t: f64| Point2::new(2.0 * math::cos(t), math::sin(t));
        let pts = [on(0.1), on(1.2), on(2.5), on(3.9), on(5.3)];
        let e = fit_ellipse_minimal(&pts).unwrap();
        assert_eq!(e.kind, ConicKind::Ellipse);
        assert!(e.coeff_distance(&ellipse_2_1()) < 1e-9);
        for p in &pts {
            assert!(e.residual(p) < 1e-9);
        }

        let circ = |t: f64| Point2::new(0.5 + math::cos(t), -1.0 + math::sin(t));
        let pts = [circ(0.0), circ(1.0), circ(2.0), circ(3.0), circ(4.5)];
        let e = fit_ellipse_minimal(&pts).unwrap();
        let [a, b, c, ..] = e.coeffs;
        assert!((a - c).abs() < 1e-9 && b.abs() < 1e-9);

        let line: [Point2; 5] = core::array::from_fn(|i| Point2::new(i as f64, 2.0 * i as f64 + 1.0));
        assert_eq!(fit_ellipse_minimal(&line), Err(GeometryError::DegenerateConfiguration));

        // five points on the hyperbola xy = 1
        let hyp: [Point2; 5] = core::array::from_fn(|i| {
            let x = [0.5, 1.0, 2.0, -1.0, -3.0][i];
            Point2::new(x, 1.0 / x)
        });
        assert_eq!(fit_ellipse_minimal(&hyp), Err(GeometryError::NotAnEllipse));
    }

    #[test]
    fn direct_fit_recovers_exact_ellipse() {
        let pts = ellipse_points(50);
        let e = fit_ellipse_direct(&pts).unwrap();
        assert_eq!(e.kind, ConicKind::Ellipse);
        let max = pts.iter().map(|p| e.residual(p)).fold(0.0, f64::max);
        assert!(max < 1e-8, "max residual {max}");
        assert!((linalg::norm(&e.coeffs) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn direct_fit_rejects_collinear_points() {
        let pts: Vec<Point2> = (0..6).map(|i| Point2::new(i as f64, 0.5 * i as f64)).collect();
        let err = fit_ellipse_direct(&pts).unwrap_err();
        assert!(matches!(err, GeometryError::SingularScatter | GeometryError::NotAnEllipse));
        assert!(matches!(
            fit_ellipse_direct(&pts[..5]),
            Err(GeometryError::InsufficientPoints { needed: 6, got: 5 })
        ));
    }

    #[test]
    fn conic_ls_examples() {
        let circle: Vec<Point2> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.3;
                Point2::new(1.0 + 0.7 * math::cos(t), 0.5 * math::sin(t) * 1.4)
            })
            .collect();
        let c = fit_conic_ls(&circle).unwrap();
        assert_eq!(c.kind, ConicKind::GeneralConic);
        let [a, b, cc, ..] = c.coeffs;
        assert!((a - cc).abs() < 1e-9 && b.abs() < 1e-9);

        let line: Vec<Point2> = (0..10).map(|i| Point2::new(i as f64 * 0.2, 1.0 - 0.3 * i as f64)).collect();
        let l = fit_conic_ls(&line).unwrap();
        let [a, b, cc, ..] = l.coeffs;
        assert!(a.abs() < 1e-9 && b.abs() < 1e-9 && cc.abs() < 1e-9, "{:?}", l.coeffs);
        for p in &line {
            assert!(l.residual(p) < 1e-9);
        }

        let e = fit_conic_ls(&ellipse_points(30)).unwrap();
        assert!(e.discriminant() < 0.0);

        let same = vec![Point2::new(1.0, 1.0); 8];
        assert_eq!(fit_conic_ls(&same), Err(GeometryError::SingularScatter));
    }

    #[test]
    fn ls_line_and_circle() {
        let line: Vec<Point2> = (0..10).map(|i| Point2::new(i as f64, 3.0)).collect();
        let l = fit_line_ls(&line).unwrap();
        assert!(l.coeff_distance(&ConicModel::line(0.0, 1.0, -3.0).unwrap()) < 1e-12);
        let circ: Vec<Point2> = (0..10)
            .map(|i| {
                let t = i as f64;
                Point2::new(-1.0 + 0.5 * math::cos(t), 2.0 + 0.5 * math::sin(t))
            })
            .collect();
        let c = fit_circle_ls(&circ).unwrap();
        assert_eq!(c.kind, ConicKind::Circle);
        let p = c.ellipse_params().unwrap();
        assert!(p.center.dist(&Point2::new(-1.0, 2.0)) < 1e-9);
        assert!((p.semi_a - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ellipse_params_roundtrip() {
        let params = EllipseParams {
            center: Point2::new(-0.5, 0.25),
            semi_a: 1.3,
            semi_b: 0.6,
            angle: 0.4,
        };
        let m = ConicModel::ellipse(&params).unwrap();
        let back = m.ellipse_params().unwrap();
        assert!(back.center.dist(&params.center) < 1e-12);
        assert!((back.semi_major() - 1.3).abs() < 1e-12);
        assert!((back.semi_minor() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn kind_invariants_enforced() {
        assert!(ConicModel::new(ConicKind::Line, [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).is_err());
        assert!(ConicModel::new(ConicKind::Circle, [1.0, 0.0, 2.0, 0.0, 0.0, -1.0]).is_err());
        assert!(ConicModel::new(ConicKind::Ellipse, [1.0, 0.0, -1.0, 0.0, 0.0, -1.0]).is_err());
        assert!(ConicModel::new(ConicKind::GeneralConic, [0.0; 6]).is_err());
    }
}
