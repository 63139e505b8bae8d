//! Ego-motion compensated radar aggregation and binary BEV rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, GridSpec, Point2, Pose2};

/// Radar frames carry at most this many clusters.
pub const MAX_CLUSTERS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl RadarPoint {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarFrame {
    pub timestamp: f64,
    pub sensor_id: String,
    pub points: Vec<RadarPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorKind {
    Radar,
    Lidar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMount {
    pub sensor_id: String,
    /// Sensor pose in the ego frame.
    pub mount_pose: Pose2,
    pub kind: SensorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub frames: usize,
    pub velocity_threshold: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            frames: 1,
            velocity_threshold: 0.5,
        }
    }
}

impl AggregationConfig {
    pub fn with_frames(frames: usize) -> Self {
        Self {
            frames,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("aggregation needs at least one frame".into()));
        }
        if !(self.velocity_threshold >= 0.0) {
            return Err(Error::Config("velocity threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// Keeps the points whose ground speed does not exceed `v_thresh`.
pub fn filter_dynamic(frame: &RadarFrame, v_thresh: f64) -> RadarFrame {
    RadarFrame {
        timestamp: frame.timestamp,
        sensor_id: frame.sensor_id.clone(),
        points: frame.points.iter().copied().filter(|p| p.speed() <= v_thresh).collect(),
    }
}

/// Warps `frames` (oldest first, last is the reference time) into the sensor
/// frame at the reference time and concatenates their static points.
pub fn aggregate_frames(
    frames: &[RadarFrame],
    ego_poses: &[Pose2],
    mount: &SensorMount,
    cfg: &AggregationConfig,
) -> Result<Vec<Point2>> {
    cfg.validate()?;
    if frames.len() != ego_poses.len() {
        return Err(Error::Config(format!(
            "{} frames but {} ego poses",
            frames.len(),
            ego_poses.len()
        )));
    }
    if frames.len() != cfg.frames {
        return Err(Error::Config(format!("expected {} frames, got {}", cfg.frames, frames.len())));
    }
    if let Some(f) = frames.iter().find(|f| f.sensor_id != mount.sensor_id) {
        return Err(Error::Config(format!(
            "frame from sensor {} aggregated with mount {}",
            f.sensor_id, mount.sensor_id
        )));
    }
    let reference = ego_poses[ego_poses.len() - 1].compose(&mount.mount_pose).inverse();
    let mut out = Vec::new();
    for (frame, ego) in frames.iter().zip(ego_poses) {
        let warp = reference.compose(&ego.compose(&mount.mount_pose));
        out.extend(
            frame
                .points
                .iter()
                .filter(|p| p.speed() <= cfg.velocity_threshold)
                .map(|p| warp.apply(p.position())),
        );
    }
    Ok(out)
}

/// One bit per cell, set when at least one point falls inside it.
pub fn rasterize_bev(points: &[Point2], spec: &GridSpec) -> BinaryGrid {
    let mut grid = BinaryGrid::for_spec(spec, false);
    for &p in points {
        if let Some(c) = spec.world_to_cell(p) {
            grid.set(c, true);
        }
    }
    grid
}

/// Non-overlapping windows `[0, k), [k, 2k), ...` over a sequence of length
/// `len`; a trailing partial window is dropped.
pub fn windows(len: usize, k: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let n = if k == 0 { 0 } else { len / k };
    (0..n).map(move |i| i * k..(i + 1) * k)
}
