//! Classical sequential RANSAC baselines.
//!
//! Fitting mixed line/circle/ellipse models round by round gives the
//! sequential baseline; allowing only general conics gives the high-order one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Sample;
use crate::geometry::{self, ConicKind, ConicModel, GeometryError, Point2};
use crate::inference::{self, Evaluation, InferenceError, SampleMetrics};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("{kind:?} needs at least {needed} points, got {got}")]
    InsufficientPoints { kind: ConicKind, needed: usize, got: usize },
    #[error("no {kind:?} model reached {min_inliers} inliers (best {best})")]
    NoModelFound { kind: ConicKind, best: usize, min_inliers: usize },
    #[error("invalid baseline configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("sample {id}: {source}")]
    Metrics { id: String, source: InferenceError },
}

/// Which model kinds each round may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeSchedule {
    /// Round `r` fits `kinds[r % len]`.
    Sequence(Vec<ConicKind>),
    /// Every round fits all kinds and keeps the one with most inliers,
    /// preferring the simpler kind on ties.
    BestOf(Vec<ConicKind>),
}

impl TypeSchedule {
    /// Mixed line/circle/ellipse rounds.
    pub fn sequential() -> Self {
        TypeSchedule::BestOf(vec![ConicKind::Line, ConicKind::Circle, ConicKind::Ellipse])
    }

    /// General conics only.
    pub fn high_order() -> Self {
        TypeSchedule::BestOf(vec![ConicKind::GeneralConic])
    }

    fn kinds(&self) -> &[ConicKind] {
        match self {
            TypeSchedule::Sequence(k) | TypeSchedule::BestOf(k) => k,
        }
    }

    fn round(&self, r: usize) -> Vec<ConicKind> {
        match self {
            TypeSchedule::Sequence(k) => vec![k[r % k.len()]],
            TypeSchedule::BestOf(k) => k.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// On the unit-norm algebraic residual.
    pub inlier_threshold: f64,
    pub iterations: usize,
    pub min_inliers: usize,
    pub max_structures: usize,
    /// Least-squares refit on the consensus set.
    pub refine: bool,
    pub type_order: TypeSchedule,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.02,
            iterations: 1000,
            min_inliers: 15,
            max_structures: 8,
            refine: true,
            type_order: TypeSchedule::sequential(),
        }
    }
}

impl RansacConfig {
    pub fn high_order() -> Self {
        Self {
            type_order: TypeSchedule::high_order(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(BaselineError::InvalidConfig("inlier_threshold must be > 0"));
        }
        if self.iterations == 0 {
            return Err(BaselineError::InvalidConfig("iterations must be >= 1"));
        }
        if self.min_inliers == 0 {
            return Err(BaselineError::InvalidConfig("min_inliers must be >= 1"));
        }
        if self.type_order.kinds().is_empty() {
            return Err(BaselineError::InvalidConfig("type_order must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub model: ConicModel,
    pub inliers: Vec<bool>,
    pub count: usize,
}

fn minimal_fit(kind: ConicKind, pts: &[Point2]) -> Result<ConicModel, GeometryError> {
    match kind {
        ConicKind::Line => geometry::fit_line_minimal(&pts[0], &pts[1]),
        ConicKind::Circle => geometry::fit_circle_minimal(&pts[0], &pts[1], &pts[2]),
        ConicKind::Ellipse => geometry::fit_ellipse_minimal(&[pts[0], pts[1], pts[2], pts[3], pts[4]]),
        ConicKind::GeneralConic => geometry::fit_conic_minimal(&[pts[0], pts[1], pts[2], pts[3], pts[4]]),
    }
}

fn ls_fit(kind: ConicKind, pts: &[Point2]) -> Result<ConicModel, GeometryError> {
    match kind {
        ConicKind::Line => geometry::fit_line_ls(pts),
        ConicKind::Circle => geometry::fit_circle_ls(pts),
        ConicKind::Ellipse => geometry::fit_ellipse_direct(pts),
        ConicKind::GeneralConic => geometry::fit_conic_ls(pts),
    }
}

fn consensus(model: &ConicModel, points: &[Point2], threshold: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = points.iter().map(|p| model.residual(p) <= threshold).collect();
    let count = mask.iter().filter(|&&b| b).count();
    (mask, count)
}

/// Best `kind` model by inlier count over `config.iterations` minimal samples.
pub fn ransac_fit_one(points: &[Point2], kind: ConicKind, config: &RansacConfig, seed: u64) -> Result<RansacFit, BaselineError> {
    config.validate()?;
    let m = kind.minimal_sample_size();
    if points.len() < m {
        return Err(BaselineError::InsufficientPoints {
            kind,
            needed: m,
            got: points.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut best: Option<RansacFit> = None;
    let mut buf = [Point2::default(); 5];
    for _ in 0..config.iterations {
        let idx = index::sample(&mut rng, points.len(), m);
        for (slot, i) in buf.iter_mut().zip(idx.iter()) {
            *slot = points[i];
        }
        let Ok(model) = minimal_fit(kind, &buf[..m]) else {
            continue;
        };
        if kind == ConicKind::Ellipse && model.discriminant() >= 0.0 {
            continue;
        }
        let (inliers, count) = consensus(&model, points, config.inlier_threshold);
        if best.as_ref().map_or(true, |b| count > b.count) {
            best = Some(RansacFit { model, inliers, count });
        }
    }

    let best_count = best.as_ref().map_or(0, |b| b.count);
    let mut best = match best {
        Some(b) if b.count >= config.min_inliers => b,
        _ => {
            return Err(BaselineError::NoModelFound {
                kind,
                best: best_count,
                min_inliers: config.min_inliers,
            })
        }
    };

    if config.refine {
        let support: Vec<Point2> = points
            .iter()
            .zip(&best.inliers)
            .filter(|(_, &b)| b)
            .map(|(p, _)| *p)
            .collect();
        if let Ok(model) = ls_fit(kind, &support) {
            let (inliers, count) = consensus(&model, points, config.inlier_threshold);
            if count >= best.count {
                best = RansacFit { model, inliers, count };
            }
        }
    }
    Ok(best)
}

/// Fits one structure per round and removes its inliers. Returns a structure
/// id per point, `None` where no structure claimed the point.
pub fn sequential_fit(points: &[Point2], config: &RansacConfig, seed: u64) -> Result<Vec<Option<usize>>, BaselineError> {
    config.validate()?;
    let mut out = vec![None; points.len()];
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    for round in 0..config.max_structures {
        let pts: Vec<Point2> = remaining.iter().map(|&i| points[i]).collect();
        let mut best: Option<(ConicKind, RansacFit)> = None;
        for (ki, kind) in config.type_order.round(round).into_iter().enumerate() {
            let s = seed::derive(seed, (round * 16 + ki) as u64);
            match ransac_fit_one(&pts, kind, config, s) {
                Ok(fit) => {
                    let better = match &best {
                        None => true,
                        Some((bk, b)) => fit.count > b.count || (fit.count == b.count && kind < *bk),
                    };
                    if better {
                        best = Some((kind, fit));
                    }
                }
                Err(BaselineError::NoModelFound { .. } | BaselineError::InsufficientPoints { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let Some((kind, fit)) = best else { break };
        log::debug!("round {round}: {kind:?} with {} inliers", fit.count);
        let mut kept = Vec::with_capacity(remaining.len() - fit.count);
        for (&i, &inl) in remaining.iter().zip(&fit.inliers) {
            if inl {
                out[i] = Some(round);
            } else {
                kept.push(i);
            }
        }
        remaining = kept;
    }
    Ok(out)
}

/// Scores [`sequential_fit`] on every sample. Unassigned points count as
/// errors and, for NMI, form one extra cluster.
pub fn baseline_eval(dataset: &[Sample], config: &RansacConfig, seed: u64) -> Result<Evaluation, BaselineError> {
    config.validate()?;
    let mut rows = Vec::with_capacity(dataset.len());
    for s in dataset {
        let wrap = |source| BaselineError::Metrics {
            id: s.id.clone(),
            source,
        };
        let assign = sequential_fit(&s.points, config, seed::derive(seed, inference::sample_stream(&s.id)))?;
        let found = assign.iter().flatten().max().map_or(0, |m| m + 1);
        let dense: Vec<usize> = assign.iter().map(|a| a.unwrap_or(found)).collect();
        rows.push(SampleMetrics {
            sample_id: s.id.clone(),
            k_true: s.k,
            k_est_sod: None,
            k_est_silh: None,
            k_used: found,
            error_rate: inference::error_rate_partial(&assign, &s.labels).map_err(wrap)?,
            nmi: inference::nmi(&dense, &s.labels).map_err(wrap)?,
            residuals: Vec::new(),
            assignments: dense,
        });
    }
    let summary = inference::summarize(&rows);
    Ok(Evaluation { rows, summary })
}
