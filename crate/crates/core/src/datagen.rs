//! Synthetic multi-structure conic samples: the mixed LCE composition (one
//! line, two ellipses, one circle) and the single-type LCE-Unmixed one.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, BoundingBox, ConicKind, ConicModel, EllipseParams, GeometryError, Point2};
use crate::math;
use crate::seed::{self, Rng};

/// Minimum coefficient distance between two structures of one sample.
pub const MIN_STRUCTURE_SEPARATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatagenError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Composition {
    #[serde(rename = "lce", alias = "LCE")]
    Lce,
    #[serde(rename = "lce_unmixed", alias = "LCE_Unmixed")]
    LceUnmixed,
}

/// Provenance of one structure in a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMeta {
    pub kind: ConicKind,
    pub coeffs: [f64; 6],
}

impl From<&ConicModel> for StructureMeta {
    fn from(m: &ConicModel) -> Self {
        Self {
            kind: m.kind,
            coeffs: m.coeffs,
        }
    }
}

/// One labelled point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub points: Vec<Point2>,
    pub labels: Vec<usize>,
    pub meta: Vec<StructureMeta>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks label/point agreement, label range and that no cluster is empty.
    pub fn validate(&self) -> Result<(), String> {
        if self.labels.len() != self.points.len() {
            return Err(format!(
                "labels length {} does not match points length {}",
                self.labels.len(),
                self.points.len()
            ));
        }
        let mut seen = alloc::vec![false; self.k];
        for &l in &self.labels {
            if l >= self.k {
                return Err(format!("label {l} out of range for K={}", self.k));
            }
            seen[l] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(format!("cluster {empty} has no points"));
        }
        if self.points.iter().any(|p| !p.is_finite()) {
            return Err(String::from("non-finite coordinate"));
        }
        Ok(())
    }

    /// Points as a flat `N x 2` row-major buffer.
    pub fn coords(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }
}

/// Shape-size ranges used when placing structures. Not fixed by any
/// reference value; these are the generator's defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeRanges {
    pub circle_radius: (f64, f64),
    pub ellipse_semi_major: (f64, f64),
    /// Minor/major axis ratio.
    pub ellipse_axis_ratio: (f64, f64),
}

impl Default for ShapeRanges {
    fn default() -> Self {
        Self {
            circle_radius: (0.3, 1.0),
            ellipse_semi_major: (0.5, 1.3),
            ellipse_axis_ratio: (0.3, 0.8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub composition: Composition,
    /// Inclusive range of points drawn per structure.
    pub points_per_structure: (usize, usize),
    pub noise_sigma: f64,
    pub bounding_box: BoundingBox,
    pub shapes: ShapeRanges,
    /// Fraction of extra uniform-box points, labelled as cluster `K - 1`.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 8000,
            composition: Composition::Lce,
            points_per_structure: (50, 100),
            noise_sigma: 0.05,
            bounding_box: BoundingBox::default(),
            shapes: ShapeRanges::default(),
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidSpec(String::from(m)));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        let (lo, hi) = self.points_per_structure;
        if lo == 0 || lo > hi {
            return bad("points_per_structure must be a non-empty range of positive counts");
        }
        if !self.bounding_box.is_valid() {
            return bad("bounding_box must have min < max on both axes");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        let s = &self.shapes;
        for (name, (a, b)) in [
            ("circle_radius", s.circle_radius),
            ("ellipse_semi_major", s.ellipse_semi_major),
            ("ellipse_axis_ratio", s.ellipse_axis_ratio),
        ] {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return Err(DatagenError::InvalidSpec(format!("{name} must be a positive range")));
            }
        }
        if s.ellipse_axis_ratio.1 > 1.0 {
            return bad("ellipse_axis_ratio must not exceed 1");
        }
        Ok(())
    }
}

/// Draws one random structure of `kind` placed inside the window.
fn random_structure(kind: ConicKind, spec: &DatasetSpec, rng: &mut Rng) -> Result<ConicModel, DatagenError> {
    let bbox = &spec.bounding_box;
    let center_within = |rng: &mut Rng, extent: f64| {
        let span = |lo: f64, hi: f64, rng: &mut Rng| {
            let (a, b) = (lo + extent, hi - extent);
            if a < b {
                rng.random_range(a..b)
            } else {
                0.5 * (lo + hi)
            }
        };
        let x = span(bbox.min_x, bbox.max_x, rng);
        let y = span(bbox.min_y, bbox.max_y, rng);
        Point2::new(x, y)
    };
    let range = |rng: &mut Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };

    let model = match kind {
        ConicKind::Line => {
            // through a random interior point with a random direction
            let through = center_within(rng, 0.0);
            let theta = rng.random_range(0.0..PI);
            let (nx, ny) = (math::cos(theta), math::sin(theta));
            ConicModel::line(nx, ny, -(nx * through.x + ny * through.y))?
        }
        ConicKind::Circle => {
            let r = range(rng, spec.shapes.circle_radius);
            ConicModel::circle(center_within(rng, r), r)?
        }
        ConicKind::Ellipse | ConicKind::GeneralConic => {
            let major = range(rng, spec.shapes.ellipse_semi_major);
            let minor = major * range(rng, spec.shapes.ellipse_axis_ratio);
            ConicModel::ellipse(&EllipseParams {
                center: center_within(rng, major),
                semi_a: major,
                semi_b: minor,
                angle: rng.random_range(0.0..PI),
            })?
        }
    };
    Ok(model)
}

fn build_sample(id: String, kinds: &[ConicKind], spec: &DatasetSpec, rng: &mut Rng) -> Result<Sample, DatagenError> {
    let mut models: Vec<ConicModel> = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut attempts = 0;
        loop {
            let m = random_structure(kind, spec, rng)?;
            if models.iter().all(|o| o.coeff_distance(&m) >= MIN_STRUCTURE_SEPARATION) {
                models.push(m);
                break;
            }
            attempts += 1;
            if attempts > 100 {
                return Err(DatagenError::InvalidSpec(String::from(
                    "could not place distinct structures; widen the shape ranges",
                )));
            }
        }
    }

    let (lo, hi) = spec.points_per_structure;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (label, m) in models.iter().enumerate() {
        let n = rng.random_range(lo..=hi);
        let pts = geometry::sample_curve_with(m, n, spec.noise_sigma, &spec.bounding_box, rng)?;
        labels.extend(core::iter::repeat_n(label, pts.len()));
        points.extend(pts);
    }
    let mut k = models.len();
    if spec.outlier_fraction > 0.0 {
        let n_out = math::round((points.len() as f64) * spec.outlier_fraction) as usize;
        if n_out > 0 {
            let b = &spec.bounding_box;
            for _ in 0..n_out {
                points.push(Point2::new(
                    rng.random_range(b.min_x..=b.max_x),
                    rng.random_range(b.min_y..=b.max_y),
                ));
                labels.push(k);
            }
            k += 1;
        }
    }

    Ok(Sample {
        id,
        k,
        points,
        labels,
        meta: models.iter().map(StructureMeta::from).collect(),
    })
}

fn sample_rng(spec: &DatasetSpec, index: usize) -> Rng {
    seed::rng(spec.seed ^ index as u64)
}

/// Mixed-type samples: one line, two ellipses and one circle each.
pub fn generate_lce(spec: &DatasetSpec) -> Result<Vec<Sample>, DatagenError> {
    if spec.composition != Composition::Lce {
        return Err(DatagenError::InvalidSpec(String::from("composition must be LCE")));
    }
    spec.validate()?;
    const KINDS: [ConicKind; 4] = [ConicKind::Line, ConicKind::Ellipse, ConicKind::Ellipse, ConicKind::Circle];
    (0..spec.n_samples)
        .map(|i| {
            let mut rng = sample_rng(spec, i);
            build_sample(format!("lce-{i:05}"), &KINDS, spec, &mut rng)
        })
        .collect()
}

/// Single-type samples with 2 to 4 instances of one randomly chosen kind.
pub fn generate_lce_unmixed(spec: &DatasetSpec) -> Result<Vec<Sample>, DatagenError> {
    if spec.composition != Composition::LceUnmixed {
        return Err(DatagenError::InvalidSpec(String::from("composition must be LCE_Unmixed")));
    }
    spec.validate()?;
    const KINDS: [ConicKind; 3] = [ConicKind::Line, ConicKind::Circle, ConicKind::Ellipse];
    (0..spec.n_samples)
        .map(|i| {
            let mut rng = sample_rng(spec, i);
            let kind = *KINDS.choose(&mut rng).expect("non-empty");
            let count = rng.random_range(2..=4usize);
            let kinds = alloc::vec![kind; count];
            build_sample(format!("lceu-{i:05}"), &kinds, spec, &mut rng)
        })
        .collect()
}

/// Dispatches on `spec.composition`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>, DatagenError> {
    match spec.composition {
        Composition::Lce => generate_lce(spec),
        Composition::LceUnmixed => generate_lce_unmixed(spec),
    }
}
