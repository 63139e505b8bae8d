//! Ground-truth label generation from aggregated lidar.
//!
//! Per scene: every lidar sweep goes to the global frame and a concave hull
//! is built over the projected cloud. Per radar frame: the cloud is binned in
//! the radar grid, thresholded by point count, cleaned morphologically
//! (dilation, hole filling, erosion), labelled by visibility from the radar,
//! and masked to Ignore outside the field of view and outside the hull.

mod hull;

pub use hull::{concave_hull, convex_hull, HullPolygon};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{visibility_label, BinaryGrid, Category, FieldOfView, Grid2, GridSpec, LabelGrid, Point2, Pose2};
use crate::par::Exec;
use crate::scene::{Point3, SceneBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub min_count: u32,
    pub z_min: f64,
    pub z_max: f64,
    pub morph_kernel: usize,
    pub alpha: f64,
    pub fov: FieldOfView,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            min_count: 2,
            z_min: 0.3,
            z_max: 2.5,
            morph_kernel: 3,
            alpha: 4.0,
            fov: FieldOfView::default(),
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::Config("z window must satisfy z_min < z_max".into()));
        }
        if self.morph_kernel % 2 == 0 {
            return Err(Error::Config(format!("morph kernel must be odd, got {}", self.morph_kernel)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Every lidar sweep of the scene in global coordinates.
pub fn aggregate_lidar(scene: &SceneBundle) -> Result<Vec<Point3>> {
    let mounts = scene.lidar_mounts();
    if mounts.is_empty() || scene.steps.iter().all(|s| s.lidar.is_empty()) {
        return Err(Error::Empty("scene has no lidar sweeps".into()));
    }
    let mut out = Vec::new();
    for step in &scene.steps {
        for (sweep, mount) in step.lidar.iter().zip(&mounts) {
            let pose = step.ego.compose(&mount.mount_pose);
            out.extend(sweep.points.iter().map(|p| {
                let q = pose.apply(p.xy());
                Point3::new(q.x, q.y, p.z)
            }));
        }
    }
    Ok(out)
}

/// Points inside the z window, binned in the grid of the sensor at `radar_pose`.
pub fn project_count_grid(points: &[Point3], radar_pose: &Pose2, spec: &GridSpec, z_window: (f64, f64)) -> Grid2<u32> {
    let mut counts = Grid2::for_spec(spec, 0u32);
    for p in points.iter().filter(|p| p.z >= z_window.0 && p.z <= z_window.1) {
        if let Some(c) = spec.world_to_cell(radar_pose.apply_inverse(p.xy())) {
            *counts.at_mut(c) += 1;
        }
    }
    counts
}

fn project_xy_counts(points: &[Point2], radar_pose: &Pose2, spec: &GridSpec) -> Grid2<u32> {
    let mut counts = Grid2::for_spec(spec, 0u32);
    for &p in points {
        if let Some(c) = spec.world_to_cell(radar_pose.apply_inverse(p)) {
            *counts.at_mut(c) += 1;
        }
    }
    counts
}

pub fn threshold_counts(counts: &Grid2<u32>, min_count: u32) -> BinaryGrid {
    counts.map(|&n| n >= min_count)
}

/// Square-window max (dilate) or min (erode); out-of-grid cells are skipped.
fn square_filter(mask: &BinaryGrid, kernel: usize, dilate: bool) -> BinaryGrid {
    let r = kernel / 2;
    let (h, w) = (mask.height, mask.width);
    let pick = |acc: bool, x: bool| if dilate { acc || x } else { acc && x };
    let mut rows = mask.clone();
    for u in 0..h {
        for v in 0..w {
            let (a, b) = (v.saturating_sub(r), (v + r).min(w - 1));
            rows.data[u * w + v] = (a..=b).map(|k| mask.data[u * w + k]).fold(!dilate, pick);
        }
    }
    let mut out = rows.clone();
    for u in 0..h {
        let (a, b) = (u.saturating_sub(r), (u + r).min(h - 1));
        for v in 0..w {
            out.data[u * w + v] = (a..=b).map(|k| rows.data[k * w + v]).fold(!dilate, pick);
        }
    }
    out
}

/// Background regions not 4-connected to the grid border become foreground.
pub fn fill_holes(mask: &BinaryGrid) -> BinaryGrid {
    let (h, w) = (mask.height, mask.width);
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for u in 0..h {
        for v in 0..w {
            let border = u == 0 || v == 0 || u + 1 == h || v + 1 == w;
            if border && !mask.data[u * w + v] {
                outside[u * w + v] = true;
                queue.push_back((u, v));
            }
        }
    }
    while let Some((u, v)) = queue.pop_front() {
        let mut visit = |uu: usize, vv: usize| {
            let i = uu * w + vv;
            if !mask.data[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((uu, vv));
            }
        };
        if u > 0 {
            visit(u - 1, v);
        }
        if u + 1 < h {
            visit(u + 1, v);
        }
        if v > 0 {
            visit(u, v - 1);
        }
        if v + 1 < w {
            visit(u, v + 1);
        }
    }
    Grid2 {
        height: h,
        width: w,
        data: outside.iter().map(|&o| !o).collect(),
    }
}

/// Dilation, hole filling, erosion, all with a `kernel` x `kernel` square.
pub fn morph_clean(mask: &BinaryGrid, kernel: usize) -> BinaryGrid {
    let dilated = square_filter(mask, kernel, true);
    let filled = fill_holes(&dilated);
    square_filter(&filled, kernel, false)
}

pub fn make_label_grid(mask: &BinaryGrid, spec: &GridSpec, fov: &FieldOfView) -> LabelGrid {
    visibility_label(spec, Point2::new(0.0, 0.0), mask, fov)
}

/// Cells whose centers fall outside the hull become Ignore.
pub fn apply_ignore_mask(grid: &LabelGrid, hull: &HullPolygon, radar_pose: &Pose2) -> LabelGrid {
    let mut out = grid.clone();
    for c in grid.spec.cells() {
        if !hull.contains(radar_pose.apply(grid.spec.cell_center(c))) {
            out.set(c, Category::Ignore);
        }
    }
    out
}

/// Scene-level state shared by every radar frame of one recording.
pub struct SceneLabeler<'a> {
    scene: &'a SceneBundle,
    cfg: LabelConfig,
    obstacle_points: Vec<Point2>,
    hull: HullPolygon,
}

impl<'a> SceneLabeler<'a> {
    pub fn new(scene: &'a SceneBundle, cfg: LabelConfig) -> Result<Self> {
        cfg.validate()?;
        let cloud = aggregate_lidar(scene)?;
        let flat: Vec<Point2> = cloud.iter().map(Point3::xy).collect();
        let hull = concave_hull(&flat, cfg.alpha)?;
        let obstacle_points = cloud
            .iter()
            .filter(|p| p.z >= cfg.z_min && p.z <= cfg.z_max)
            .map(Point3::xy)
            .collect();
        Ok(Self {
            scene,
            cfg,
            obstacle_points,
            hull,
        })
    }

    pub fn hull(&self) -> &HullPolygon {
        &self.hull
    }

    pub fn config(&self) -> &LabelConfig {
        &self.cfg
    }

    /// Cleaned obstacle mask in the grid of radar `radar_idx` at step `t`.
    pub fn obstacle_mask(&self, radar_idx: usize, t: usize) -> BinaryGrid {
        let pose = self.scene.radar_pose(radar_idx, t);
        let counts = project_xy_counts(&self.obstacle_points, &pose, &self.scene.grid);
        morph_clean(&threshold_counts(&counts, self.cfg.min_count), self.cfg.morph_kernel)
    }

    /// Visibility labels before hull masking.
    pub fn visibility(&self, radar_idx: usize, t: usize) -> LabelGrid {
        make_label_grid(&self.obstacle_mask(radar_idx, t), &self.scene.grid, &self.cfg.fov)
    }

    pub fn label(&self, radar_idx: usize, t: usize) -> LabelGrid {
        let pose = self.scene.radar_pose(radar_idx, t);
        apply_ignore_mask(&self.visibility(radar_idx, t), &self.hull, &pose)
    }

    /// Labels for every (radar, step) pair, radar-major.
    pub fn label_all(&self, exec: Exec) -> Vec<LabelGrid> {
        let n_radar = self.scene.radar_mounts().len();
        let n_steps = self.scene.steps.len();
        exec.map_range(n_radar * n_steps, |i| self.label(i / n_steps, i % n_steps))
    }
}

/// Cells farther than `r` (Chebyshev) from every set cell of `mask`.
pub fn far_from(mask: &BinaryGrid, r: usize) -> BinaryGrid {
    let near = square_filter(mask, 2 * r + 1, true);
    near.map(|&b| !b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryGrid {
        let h = rows.len();
        let w = rows[0].len();
        Grid2 {
            height: h,
            width: w,
            data: rows.iter().flat_map(|r| r.chars().map(|ch| ch == '#')).collect(),
        }
    }

    #[test]
    fn count_threshold() {
        let counts = Grid2 { height: 1, width: 3, data: vec![0, 1, 2] };
        assert_eq!(threshold_counts(&counts, 1).data, vec![false, true, true]);
        assert_eq!(threshold_counts(&counts, 2).data, vec![false, false, true]);
    }

    #[test]
    fn projection_filters_height() {
        let spec = GridSpec::sensor_centered(10, 10, 1.0);
        let pts = vec![Point3::new(2.5, 0.5, 1.0); 5];
        let c = project_count_grid(&pts, &Pose2::identity(), &spec, (0.3, 2.5));
        assert_eq!(*c.get(2, 5), 5);
        let low = [Point3::new(2.5, 0.5, 0.1)];
        assert!(project_count_grid(&low, &Pose2::identity(), &spec, (0.3, 2.5)).data.iter().all(|&n| n == 0));
        assert!(project_count_grid(&[], &Pose2::identity(), &spec, (0.3, 2.5)).data.iter().all(|&n| n == 0));
    }

    #[test]
    fn morphology_cases() {
        let empty = BinaryGrid::filled(5, 5, false);
        assert_eq!(morph_clean(&empty, 3), empty);

        let ring = mask_from(&[".....", ".###.", ".#.#.", ".###.", "....."]);
        let out = morph_clean(&ring, 1);
        assert!(*out.get(2, 2));

        let dot = mask_from(&[".....", ".....", "..#..", ".....", "....."]);
        assert_eq!(morph_clean(&dot, 3), dot);
    }

    #[test]
    fn morphology_keeps_lines_touching_the_border() {
        let line = mask_from(&[".....", ".....", "#####", ".....", "....."]);
        assert_eq!(morph_clean(&line, 3), line);
    }

    #[test]
    fn ignore_mask_extremes() {
        let spec = GridSpec::sensor_centered(6, 4, 1.0);
        let g = LabelGrid::filled(spec, Category::Free);
        let all = HullPolygon::rectangle(Point2::new(-100.0, -100.0), Point2::new(100.0, 100.0));
        assert_eq!(apply_ignore_mask(&g, &all, &Pose2::identity()), g);
        let none = HullPolygon::empty();
        assert_eq!(apply_ignore_mask(&g, &none, &Pose2::identity()).count(Category::Ignore), spec.len());
    }

    #[test]
    fn config_validation() {
        assert!(LabelConfig::default().validate().is_ok());
        assert!(LabelConfig { morph_kernel: 4, ..Default::default() }.validate().is_err());
        assert!(LabelConfig { min_count: 0, ..Default::default() }.validate().is_err());
        assert!(LabelConfig { z_min: 3.0, ..Default::default() }.validate().is_err());
    }
}
