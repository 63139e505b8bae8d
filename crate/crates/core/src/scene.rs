//! In-memory scene recordings: ego poses, sensor mounts and all frames.

use serde::{Deserialize, Serialize};

use crate::aggregate::{RadarFrame, SensorKind, SensorMount};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Point2, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn xy(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSweep {
    pub timestamp: f64,
    pub sensor_id: String,
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStep {
    pub timestamp: f64,
    pub ego: Pose2,
    /// One frame per radar mount, in mount order.
    pub radar: Vec<RadarFrame>,
    /// One sweep per lidar mount, in mount order.
    pub lidar: Vec<LidarSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub seed: u64,
    pub grid: GridSpec,
    pub mounts: Vec<SensorMount>,
    pub steps: Vec<TimeStep>,
}

impl SceneBundle {
    pub fn mounts_of(&self, kind: SensorKind) -> impl Iterator<Item = &SensorMount> {
        self.mounts.iter().filter(move |m| m.kind == kind)
    }

    pub fn radar_mounts(&self) -> Vec<&SensorMount> {
        self.mounts_of(SensorKind::Radar).collect()
    }

    pub fn lidar_mounts(&self) -> Vec<&SensorMount> {
        self.mounts_of(SensorKind::Lidar).collect()
    }

    pub fn ego_poses(&self) -> Vec<Pose2> {
        self.steps.iter().map(|s| s.ego).collect()
    }

    pub fn radar_frame_count(&self) -> usize {
        self.steps.iter().map(|s| s.radar.len()).sum()
    }

    /// Pose of radar `radar_idx` (index among radar mounts) in the global frame at step `t`.
    pub fn radar_pose(&self, radar_idx: usize, t: usize) -> Pose2 {
        self.steps[t].ego.compose(&self.radar_mounts()[radar_idx].mount_pose)
    }

    /// Checks the structural invariants the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let mut ids: Vec<&str> = self.mounts.iter().map(|m| m.sensor_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate sensor id in mounts".into()));
        }
        let radars: Vec<&str> = self.mounts_of(SensorKind::Radar).map(|m| m.sensor_id.as_str()).collect();
        let lidars: Vec<&str> = self.mounts_of(SensorKind::Lidar).map(|m| m.sensor_id.as_str()).collect();
        for (t, step) in self.steps.iter().enumerate() {
            let r: Vec<&str> = step.radar.iter().map(|f| f.sensor_id.as_str()).collect();
            let l: Vec<&str> = step.lidar.iter().map(|f| f.sensor_id.as_str()).collect();
            if r != radars || l != lidars {
                return Err(Error::Config(format!("step {t} frames do not follow mount order")));
            }
        }
        Ok(())
    }
}
