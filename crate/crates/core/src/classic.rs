//! Hand-crafted inverse sensor models with log-odds Bayesian accumulation.
//!
//! Each frame produces an increment grid: the detection cell gets
//! `logit(p_hit)`, line-of-sight cells before it `logit(p_miss)`, everything
//! else 0 (unobserved, left unchanged). Increments are summed into a
//! [`LogOddsGrid`]; clamping to `±l_max` happens only when reading
//! probabilities out, so accumulation order never matters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize_angle, traverse_clipped_with, Category, Cell, Grid2, GridSpec, LabelGrid, Point2};
use crate::metrics::{confusion, iou_per_class, miou, ConfusionCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IsmKind {
    Delta,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsmConfig {
    pub kind: IsmKind,
    pub p_hit: f64,
    pub p_miss: f64,
    pub sigma_range: f64,
    pub sigma_azimuth: f64,
    pub l0: f64,
    pub l_max: f64,
    pub t_occ: f64,
    pub t_free: f64,
}

impl Default for IsmConfig {
    fn default() -> Self {
        Self {
            kind: IsmKind::Delta,
            p_hit: 0.7,
            p_miss: 0.4,
            sigma_range: 0.6,
            sigma_azimuth: 1.5f64.to_radians(),
            l0: 0.0,
            l_max: 8.0,
            t_occ: 0.65,
            t_free: 0.35,
        }
    }
}

impl IsmConfig {
    pub fn with_kind(kind: IsmKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_hit > 0.5 && self.p_hit < 1.0) {
            return Err(Error::Config(format!("p_hit must lie in (0.5, 1), got {}", self.p_hit)));
        }
        if !(self.p_miss > 0.0 && self.p_miss < 0.5) {
            return Err(Error::Config(format!("p_miss must lie in (0, 0.5), got {}", self.p_miss)));
        }
        if !(self.l_max > 0.0) {
            return Err(Error::Config("l_max must be positive".into()));
        }
        if !(0.0 <= self.t_free && self.t_free <= self.t_occ && self.t_occ <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= t_free <= t_occ <= 1, got ({}, {})",
                self.t_occ, self.t_free
            )));
        }
        if self.kind == IsmKind::Gaussian && !(self.sigma_range > 0.0 && self.sigma_azimuth > 0.0) {
            return Err(Error::Config("Gaussian ISM needs positive sigmas".into()));
        }
        Ok(())
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-frame log-odds evidence on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub spec: GridSpec,
    pub values: Grid2<f64>,
}

impl Increment {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: Grid2::for_spec(&spec, 0.0),
        }
    }
}

/// Cells holding a detection, flagged before any ray is cast so every ray
/// sees the same obstacles regardless of detection order.
fn detection_cells(spec: &GridSpec, detections: &[Point2]) -> Grid2<bool> {
    let mut d = Grid2::for_spec(spec, false);
    for &p in detections {
        if let Some(c) = spec.world_to_cell(p) {
            d.set(c, true);
        }
    }
    d
}

/// Walks towards `target`; marks cells free until a detection cell is met.
/// Returns the detection cell that stopped the walk, if any.
fn free_walk(spec: &GridSpec, origin: Point2, target: Point2, dets: &Grid2<bool>, free: &mut Grid2<bool>) -> Option<Cell> {
    let mut stop = None;
    traverse_clipped_with(spec, origin, target, |c| {
        if stop.is_some() {
            return;
        }
        if *dets.at(c) {
            stop = Some(c);
        } else {
            free.set(c, true);
        }
    });
    stop
}

pub fn delta_ism_update(spec: &GridSpec, sensor: Point2, detections: &[Point2], cfg: &IsmConfig) -> Increment {
    let dets = detection_cells(spec, detections);
    let mut free = Grid2::for_spec(spec, false);
    let mut occupied = Grid2::for_spec(spec, false);
    for &p in detections {
        let own = spec.world_to_cell(p);
        if let Some(hit) = free_walk(spec, sensor, p, &dets, &mut free) {
            if Some(hit) == own {
                occupied.set(hit, true);
            }
        }
    }
    let (l_hit, l_miss) = (logit(cfg.p_hit), logit(cfg.p_miss));
    let mut inc = Increment::zeros(*spec);
    for (i, v) in inc.values.data.iter_mut().enumerate() {
        if occupied.data[i] {
            *v = l_hit;
        } else if free.data[i] {
            *v = l_miss;
        }
    }
    inc
}

/// Delta model with the hit mass spread by a separable range/azimuth Gaussian
/// (truncated at 3 sigma, peak cell exactly `logit(p_hit)`). The free-space
/// walk stops 3 sigma_range short of the detection.
pub fn gaussian_ism_update(spec: &GridSpec, sensor: Point2, detections: &[Point2], cfg: &IsmConfig) -> Increment {
    let dets = detection_cells(spec, detections);
    let mut free = Grid2::for_spec(spec, false);
    let mut kernel = Grid2::for_spec(spec, 0.0f64);
    let l_hit = logit(cfg.p_hit);
    let (sr, sa) = (cfg.sigma_range, cfg.sigma_azimuth);
    for &p in detections {
        let rel = p.sub(sensor);
        let range = rel.norm();
        let own = spec.world_to_cell(p);
        // full walk decides whether this detection is shadowed by a nearer one
        let mut shadowed = false;
        let mut seen_own = false;
        traverse_clipped_with(spec, sensor, p, |c| {
            if seen_own || shadowed {
                return;
            }
            if Some(c) == own {
                seen_own = true;
            } else if *dets.at(c) {
                shadowed = true;
            }
        });
        let free_end = if range > 0.0 {
            sensor.add(rel.scale((range - 3.0 * sr).max(0.0) / range))
        } else {
            sensor
        };
        free_walk(spec, sensor, free_end, &dets, &mut free);
        if shadowed || !seen_own {
            continue;
        }
        let Some(own) = own else { continue };
        let bearing = rel.azimuth();
        let reach = 3.0 * sr + (range + 3.0 * sr) * (3.0 * sa).min(std::f64::consts::PI);
        let lo = spec.world_to_cell_clamped(Point2::new(p.x - reach, p.y - reach));
        let hi = spec.world_to_cell_clamped(Point2::new(p.x + reach, p.y + reach));
        let weight = |c: Cell| {
            let q = spec.cell_center(c).sub(sensor);
            let dr = q.norm() - range;
            let da = normalize_angle(q.azimuth() - bearing);
            let inside = dr.abs() <= 3.0 * sr && da.abs() <= 3.0 * sa;
            (inside || c == own).then(|| (-0.5 * (dr / sr).powi(2) - 0.5 * (da / sa).powi(2)).exp())
        };
        let mut support = Vec::new();
        for u in lo.u..=hi.u {
            for v in lo.v..=hi.v {
                let c = Cell::new(u, v);
                if let Some(w) = weight(c) {
                    support.push((c, w));
                }
            }
        }
        let peak = support.iter().map(|&(_, w)| w).fold(0.0f64, f64::max);
        for (c, w) in support {
            let value = if peak > 0.0 { l_hit * w / peak } else if c == own { l_hit } else { 0.0 };
            let slot = kernel.at_mut(c);
            *slot = slot.max(value);
        }
    }
    let l_miss = logit(cfg.p_miss);
    let mut inc = Increment::zeros(*spec);
    for (i, v) in inc.values.data.iter_mut().enumerate() {
        if kernel.data[i] > 0.0 {
            *v = kernel.data[i];
        } else if free.data[i] {
            *v = l_miss;
        }
    }
    inc
}

pub fn ism_update(spec: &GridSpec, sensor: Point2, detections: &[Point2], cfg: &IsmConfig) -> Increment {
    match cfg.kind {
        IsmKind::Delta => delta_ism_update(spec, sensor, detections, cfg),
        IsmKind::Gaussian => gaussian_ism_update(spec, sensor, detections, cfg),
    }
}

/// Fixed-point step of the accumulated evidence (2^-32 log-odds units).
const EVIDENCE_SCALE: f64 = 1.0 / 4_294_967_296.0;

/// Accumulated log-odds. Evidence is summed as fixed-point integers so the
/// result is bit-identical under any ordering of the frames; each cell reads
/// back as `l0 + evidence * 2^-32`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogOddsGrid {
    pub spec: GridSpec,
    pub evidence: Grid2<i64>,
    pub l0: f64,
}

impl LogOddsGrid {
    pub fn new(spec: GridSpec, l0: f64) -> Self {
        Self {
            spec,
            evidence: Grid2::for_spec(&spec, 0),
            l0,
        }
    }

    pub fn value(&self, c: Cell) -> f64 {
        self.l0 + *self.evidence.at(c) as f64 * EVIDENCE_SCALE
    }

    /// Unclamped log-odds of every cell.
    pub fn values(&self) -> Grid2<f64> {
        self.evidence.map(|&e| self.l0 + e as f64 * EVIDENCE_SCALE)
    }

    pub fn probabilities(&self, l_max: f64) -> Grid2<f64> {
        self.values().map(|&l| logodds_to_prob(l, l_max))
    }
}

/// `l += inc - l0` on every cell the increment observed.
pub fn bayes_update(acc: &mut LogOddsGrid, inc: &Increment) -> Result<()> {
    acc.spec.ensure_same(&inc.spec)?;
    let l0 = acc.l0;
    for (e, &d) in acc.evidence.data.iter_mut().zip(&inc.values.data) {
        if d != 0.0 {
            let step = ((d - l0) / EVIDENCE_SCALE).round();
            if !step.is_finite() || step.abs() >= i64::MAX as f64 {
                return Err(Error::NonFinite(format!("log-odds increment {d}")));
            }
            *e = e.saturating_add(step as i64);
        }
    }
    Ok(())
}

pub fn logodds_to_prob(l: f64, l_max: f64) -> f64 {
    let l = l.clamp(-l_max, l_max);
    1.0 / (1.0 + (-l).exp())
}

pub fn classify_grid(spec: &GridSpec, probs: &Grid2<f64>, t_occ: f64, t_free: f64) -> LabelGrid {
    let cells = probs
        .data
        .iter()
        .map(|&p| {
            if p >= t_occ {
                Category::Occupied
            } else if p <= t_free {
                Category::Free
            } else {
                Category::Unobserved
            }
        })
        .collect();
    LabelGrid::from_cells(*spec, cells).expect("probability grid matches spec")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_occ: f64,
    pub t_free: f64,
}

/// t_occ in {0.55, ..., 0.95} x t_free in {0.05, ..., 0.45}. The prior 0.5
/// always reads as Unobserved.
pub fn default_candidates() -> Vec<Thresholds> {
    let mut out = Vec::new();
    for i in 0..9 {
        for j in 0..9 {
            out.push(Thresholds {
                t_occ: 0.55 + 0.05 * i as f64,
                t_free: 0.05 + 0.05 * j as f64,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub thresholds: Thresholds,
    pub miou: f64,
}

/// Exhaustive sweep of threshold pairs, scored by pooled mIoU. Ties go to the
/// smaller t_occ, then the larger t_free.
pub fn tune_thresholds(
    spec: &GridSpec,
    probs: &[Grid2<f64>],
    gts: &[LabelGrid],
    candidates: &[Thresholds],
) -> Result<TuneResult> {
    if probs.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    if probs.len() != gts.len() {
        return Err(Error::Config(format!("{} predictions for {} labels", probs.len(), gts.len())));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("threshold candidates".into()));
    }
    if let Some(t) = candidates.iter().find(|t| t.t_free > t.t_occ) {
        return Err(Error::Config(format!("candidate {t:?} has t_free > t_occ")));
    }
    let mut best: Option<TuneResult> = None;
    for &t in candidates {
        let mut counts = ConfusionCounts::default();
        for (p, gt) in probs.iter().zip(gts) {
            counts += confusion(&classify_grid(spec, p, t.t_occ, t.t_free), gt)?;
        }
        let score = miou(&iou_per_class(&counts));
        let better = match best {
            None => true,
            Some(b) => {
                score > b.miou
                    || (score == b.miou
                        && (t.t_occ < b.thresholds.t_occ
                            || (t.t_occ == b.thresholds.t_occ && t.t_free > b.thresholds.t_free)))
            }
        };
        if better {
            best = Some(TuneResult { thresholds: t, miou: score });
        }
    }
    Ok(best.expect("at least one candidate"))
}
