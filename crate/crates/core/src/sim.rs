//! Seeded synthetic scenes: static 2-D worlds along a road, a wandering ego
//! trajectory, dense lidar sweeps and sparse, noisy radar clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::aggregate::{RadarFrame, RadarPoint, SensorKind, SensorMount, MAX_CLUSTERS};
use crate::error::{Error, Result};
use crate::grid::{normalize_angle, GridSpec, Point2, Pose2};
use crate::par::Exec;
use crate::scene::{LidarSweep, Point3, SceneBundle, TimeStep};

/// Deterministic generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive per-scene seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Obstacle {
    Rect { min: Point2, max: Point2 },
    Circle { center: Point2, radius: f64 },
}

impl Obstacle {
    pub fn bbox(&self) -> (Point2, Point2) {
        match *self {
            Obstacle::Rect { min, max } => (min, max),
            Obstacle::Circle { center, radius } => (
                Point2::new(center.x - radius, center.y - radius),
                Point2::new(center.x + radius, center.y + radius),
            ),
        }
    }

    /// Smallest `t >= 0` with `o + t * dir` on the obstacle (`dir` unit length).
    pub fn ray_hit(&self, o: Point2, dir: Point2) -> Option<f64> {
        match *self {
            Obstacle::Rect { min, max } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                for (o, d, lo, hi) in [(o.x, dir.x, min.x, max.x), (o.y, dir.y, min.y, max.y)] {
                    if d == 0.0 {
                        if o < lo || o > hi {
                            return None;
                        }
                    } else {
                        let (a, b) = ((lo - o) / d, (hi - o) / d);
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                (t0 <= t1).then_some(t0)
            }
            Obstacle::Circle { center, radius } => {
                let oc = o.sub(center);
                let b = oc.x * dir.x + oc.y * dir.y;
                let c = oc.x * oc.x + oc.y * oc.y - radius * radius;
                if c <= 0.0 {
                    return Some(0.0);
                }
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t >= 0.0).then_some(t)
            }
        }
    }

    /// Distance from `p` to the obstacle outline.
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        match *self {
            Obstacle::Rect { min, max } => {
                let dx = (min.x - p.x).max(p.x - max.x);
                let dy = (min.y - p.y).max(p.y - max.y);
                if dx <= 0.0 && dy <= 0.0 {
                    -(dx.max(dy))
                } else {
                    dx.max(0.0).hypot(dy.max(0.0))
                }
            }
            Obstacle::Circle { center, radius } => (p.sub(center).norm() - radius).abs(),
        }
    }

    /// Points along the outline, about `spacing` apart.
    pub fn surface_samples(&self, spacing: f64) -> Vec<Point2> {
        match *self {
            Obstacle::Rect { min, max } => {
                let corners = [min, Point2::new(max.x, min.y), max, Point2::new(min.x, max.y)];
                let mut out = Vec::new();
                for i in 0..4 {
                    let (a, b) = (corners[i], corners[(i + 1) % 4]);
                    let n = ((b.sub(a).norm() / spacing).ceil() as usize).max(1);
                    out.extend((0..n).map(|k| a.add(b.sub(a).scale(k as f64 / n as f64))));
                }
                out
            }
            Obstacle::Circle { center, radius } => {
                let n = ((std::f64::consts::TAU * radius / spacing).ceil() as usize).max(3);
                (0..n)
                    .map(|k| {
                        let a = std::f64::consts::TAU * k as f64 / n as f64;
                        Point2::new(center.x + radius * a.cos(), center.y + radius * a.sin())
                    })
                    .collect()
            }
        }
    }

    fn overlaps(&self, other: &Obstacle, margin: f64) -> bool {
        let (a0, a1) = self.bbox();
        let (b0, b1) = other.bbox();
        a0.x - margin < b1.x && b0.x - margin < a1.x && a0.y - margin < b1.y && b0.y - margin < a1.y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub obstacles: Vec<Obstacle>,
    pub bounds_min: Point2,
    pub bounds_max: Point2,
    /// The band `|y| < corridor_half_width` is kept free of obstacles.
    pub corridor_half_width: f64,
}

impl WorldMap {
    /// Distance to the first obstacle along a unit ray, if within `max_range`.
    pub fn cast(&self, o: Point2, dir: Point2, max_range: f64) -> Option<f64> {
        self.obstacles
            .iter()
            .filter_map(|ob| ob.ray_hit(o, dir))
            .filter(|&t| t <= max_range)
            .min_by(f64::total_cmp)
    }

    pub fn surface_samples(&self, spacing: f64) -> Vec<Point2> {
        self.obstacles.iter().flat_map(|o| o.surface_samples(spacing)).collect()
    }

    pub fn boundary_distance(&self, p: Point2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.boundary_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn in_bounds(&self, o: &Obstacle) -> bool {
        let (a, b) = o.bbox();
        a.x >= self.bounds_min.x && a.y >= self.bounds_min.y && b.x <= self.bounds_max.x && b.y <= self.bounds_max.y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n_obstacles: usize,
    /// Longitudinal extent of the world.
    pub x_range: (f64, f64),
    /// Obstacles stay within `|y| <= lateral_extent`.
    pub lateral_extent: f64,
    pub corridor_half_width: f64,
    pub rect_size: (f64, f64),
    pub circle_radius: (f64, f64),
    pub circle_fraction: f64,
    /// Placement attempts per obstacle before giving up.
    pub max_attempts: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_obstacles: 60,
            x_range: (-60.0, 180.0),
            lateral_extent: 30.0,
            corridor_half_width: 5.0,
            rect_size: (1.5, 8.0),
            circle_radius: (0.3, 1.2),
            circle_fraction: 0.3,
            max_attempts: 200,
        }
    }
}

/// Places non-overlapping obstacles on both sides of a straight corridor
/// along the x axis.
pub fn gen_world(seed: u64, params: &WorldParams) -> Result<WorldMap> {
    let p = params;
    let sizes_ok = p.rect_size.0 > 0.0 && p.rect_size.0 <= p.rect_size.1 && p.circle_radius.0 > 0.0 && p.circle_radius.0 <= p.circle_radius.1;
    if !sizes_ok || !(0.0..=1.0).contains(&p.circle_fraction) || p.x_range.0 >= p.x_range.1 {
        return Err(Error::Config(format!("invalid world parameters {p:?}")));
    }
    let world = WorldMap {
        obstacles: Vec::with_capacity(p.n_obstacles),
        bounds_min: Point2::new(p.x_range.0, -p.lateral_extent),
        bounds_max: Point2::new(p.x_range.1, p.lateral_extent),
        corridor_half_width: p.corridor_half_width,
    };
    let smallest = p.rect_size.0.min(2.0 * p.circle_radius.0);
    if p.n_obstacles > 0 && p.lateral_extent - p.corridor_half_width < smallest {
        return Err(Error::Infeasible(format!(
            "no room for obstacles between corridor {} and lateral extent {}",
            p.corridor_half_width, p.lateral_extent
        )));
    }
    let mut world = world;
    let mut rng = stream_rng(seed, 0);
    for i in 0..p.n_obstacles {
        let mut placed = false;
        for _ in 0..p.max_attempts.max(1) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let cx = rng.gen_range(p.x_range.0..p.x_range.1);
            let ob = if rng.gen_bool(p.circle_fraction) {
                let r = rng.gen_range(p.circle_radius.0..=p.circle_radius.1);
                let room = p.lateral_extent - p.corridor_half_width - 2.0 * r;
                if room < 0.0 {
                    continue;
                }
                let near = p.corridor_half_width + r + rng.gen_range(0.0..=room);
                Obstacle::Circle {
                    center: Point2::new(cx, side * near),
                    radius: r,
                }
            } else {
                let (w, d) = (
                    rng.gen_range(p.rect_size.0..=p.rect_size.1),
                    rng.gen_range(p.rect_size.0..=p.rect_size.1),
                );
                let room = p.lateral_extent - p.corridor_half_width - d;
                if room < 0.0 {
                    continue;
                }
                // bias toward the road edge so the corridor is lined
                let near = p.corridor_half_width + rng.gen_range(0.0..=room) * rng.gen::<f64>();
                let (y0, y1) = if side > 0.0 { (near, near + d) } else { (-near - d, -near) };
                let x0 = cx.clamp(p.x_range.0, p.x_range.1 - w);
                Obstacle::Rect {
                    min: Point2::new(x0, y0),
                    max: Point2::new(x0 + w, y1),
                }
            };
            if world.in_bounds(&ob) && !world.obstacles.iter().any(|o| o.overlaps(&ob, 0.5)) {
                world.obstacles.push(ob);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could only place {i} of {} obstacles outside the corridor",
                p.n_obstacles
            )));
        }
    }
    Ok(world)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub dt: f64,
    /// Bound on |yaw rate| (rad/s); per-step heading change is at most `max_yaw_rate * dt`.
    pub max_yaw_rate: f64,
    pub yaw_rate_noise: f64,
    /// Distance kept from the corridor edge.
    pub margin: f64,
    pub start: Point2,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_yaw_rate: 0.15,
            yaw_rate_noise: 0.05,
            margin: 2.0,
            start: Point2::new(0.0, 0.0),
        }
    }
}

/// Smooth lane wander along +x. Falls back to a straight line when a seeded
/// attempt leaves the corridor.
pub fn gen_trajectory(world: &WorldMap, seed: u64, steps: usize, speed: f64, params: &TrajectoryParams) -> Vec<Pose2> {
    let limit = (world.corridor_half_width - params.margin).max(0.0);
    for attempt in 0..8 {
        let mut rng = stream_rng(seed, 1 + attempt);
        let noise = Normal::new(0.0, params.yaw_rate_noise.max(0.0)).expect("finite std");
        let (mut x, mut y, mut yaw, mut rate) = (params.start.x, params.start.y, 0.0f64, 0.0f64);
        let mut poses = Vec::with_capacity(steps);
        let mut inside = true;
        for _ in 0..steps {
            poses.push(Pose2::new(x, y, yaw));
            if y.abs() > limit {
                inside = false;
                break;
            }
            rate = (0.9 * rate + noise.sample(&mut rng) - 0.05 * y - 0.5 * yaw).clamp(-params.max_yaw_rate, params.max_yaw_rate);
            yaw = normalize_angle(yaw + rate * params.dt);
            x += speed * params.dt * yaw.cos();
            y += speed * params.dt * yaw.sin();
        }
        if inside {
            return poses;
        }
    }
    (0..steps)
        .map(|t| Pose2::new(params.start.x + speed * params.dt * t as f64, params.start.y, 0.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSensorParams {
    pub angular_resolution: f64,
    pub max_range: f64,
    pub sigma_range: f64,
    pub z_height: f64,
    /// Ranges of ground returns (z = 0) emitted on rays that reach them.
    pub ground_ring_ranges: Vec<f64>,
    pub ground_angular_resolution: f64,
}

impl Default for LidarSensorParams {
    fn default() -> Self {
        Self {
            angular_resolution: 0.5f64.to_radians(),
            max_range: 70.0,
            sigma_range: 0.03,
            z_height: 1.0,
            ground_ring_ranges: Vec::new(),
            ground_angular_resolution: 2f64.to_radians(),
        }
    }
}

impl LidarSensorParams {
    /// Defaults plus ground rings every 2 m from 3 m to 31 m.
    pub fn with_ground_rings() -> Self {
        Self {
            ground_ring_ranges: (0..15).map(|i| 3.0 + 2.0 * i as f64).collect(),
            ..Self::default()
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, value: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        value + Normal::new(0.0, sigma).expect("positive std").sample(rng)
    } else {
        value
    }
}

/// One 360 degree sweep. Points are in the sensor frame.
pub fn sense_lidar(world: &WorldMap, ego: &Pose2, mount: &SensorMount, params: &LidarSensorParams, rng: &mut ChaCha8Rng) -> LidarSweep {
    let pose = ego.compose(&mount.mount_pose);
    let origin = pose.translation();
    let mut points = Vec::new();
    let n = (std::f64::consts::TAU / params.angular_resolution).round().max(1.0) as usize;
    for k in 0..n {
        let a = k as f64 * std::f64::consts::TAU / n as f64;
        let dir = pose.rotate(Point2::new(a.cos(), a.sin()));
        if let Some(r) = world.cast(origin, dir, params.max_range) {
            let r = noisy(rng, r, params.sigma_range);
            points.push(Point3::new(r * a.cos(), r * a.sin(), params.z_height));
        }
    }
    if !params.ground_ring_ranges.is_empty() {
        let m = (std::f64::consts::TAU / params.ground_angular_resolution).round().max(1.0) as usize;
        for k in 0..m {
            let a = k as f64 * std::f64::consts::TAU / m as f64;
            let dir = pose.rotate(Point2::new(a.cos(), a.sin()));
            let free = world.cast(origin, dir, params.max_range).unwrap_or(params.max_range);
            for &r in params.ground_ring_ranges.iter().filter(|&&r| r < free) {
                points.push(Point3::new(r * a.cos(), r * a.sin(), 0.0));
            }
        }
    }
    LidarSweep {
        timestamp: 0.0,
        sensor_id: mount.sensor_id.clone(),
        points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarSensorParams {
    pub fov_half_angle: f64,
    pub max_range: f64,
    /// Detection probability of each visible surface sample.
    pub detection_prob: f64,
    /// Spacing of the surface samples that may produce detections.
    pub surface_spacing: f64,
    pub sigma_range: f64,
    pub sigma_azimuth: f64,
    pub clutter_rate: f64,
    pub dynamic_clutter_rate: f64,
    /// Speed range of dynamic clutter.
    pub dynamic_speed: (f64, f64),
    pub max_clusters: usize,
}

impl Default for RadarSensorParams {
    fn default() -> Self {
        Self {
            fov_half_angle: 60f64.to_radians(),
            max_range: 90.0,
            detection_prob: 0.15,
            surface_spacing: 0.75,
            sigma_range: 0.5,
            sigma_azimuth: 1f64.to_radians(),
            clutter_rate: 2.0,
            dynamic_clutter_rate: 1.0,
            dynamic_speed: (1.5, 10.0),
            max_clusters: MAX_CLUSTERS,
        }
    }
}

impl RadarSensorParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.detection_prob)
            && self.surface_spacing > 0.0
            && self.sigma_range >= 0.0
            && self.sigma_azimuth >= 0.0
            && self.clutter_rate >= 0.0
            && self.dynamic_clutter_rate >= 0.0
            && self.dynamic_speed.0 > 1.0
            && self.dynamic_speed.0 <= self.dynamic_speed.1
            && self.max_clusters <= MAX_CLUSTERS;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid radar parameters {self:?}")))
        }
    }

    /// Every visible surface sample is detected exactly, with no clutter.
    pub fn noise_free(surface_spacing: f64) -> Self {
        Self {
            detection_prob: 1.0,
            surface_spacing,
            sigma_range: 0.0,
            sigma_azimuth: 0.0,
            clutter_rate: 0.0,
            dynamic_clutter_rate: 0.0,
            ..Self::default()
        }
    }
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    if rate > 0.0 {
        Poisson::new(rate).expect("positive rate").sample(rng) as usize
    } else {
        0
    }
}

/// Surface samples seen directly from `origin` (not hidden behind any obstacle).
pub fn visible_samples(world: &WorldMap, samples: &[Point2], origin: Point2, max_range: f64, in_fov: impl Fn(Point2) -> bool) -> Vec<Point2> {
    samples
        .iter()
        .copied()
        .filter(|&s| {
            let d = s.sub(origin).norm();
            if d == 0.0 || d > max_range || !in_fov(s) {
                return false;
            }
            let dir = s.sub(origin).scale(1.0 / d);
            world.cast(origin, dir, d + 1.0).map_or(true, |hit| hit >= d - 1e-7 * (1.0 + d))
        })
        .collect()
}

/// One radar frame in the sensor frame. `samples` are the world's surface
/// samples at `params.surface_spacing`.
pub fn sense_radar(
    world: &WorldMap,
    samples: &[Point2],
    ego: &Pose2,
    mount: &SensorMount,
    params: &RadarSensorParams,
    rng: &mut ChaCha8Rng,
) -> RadarFrame {
    let pose = ego.compose(&mount.mount_pose);
    let origin = pose.translation();
    let half = params.fov_half_angle;
    let visible = visible_samples(world, samples, origin, params.max_range, |s| pose.apply_inverse(s).azimuth().abs() <= half);
    let mut points = Vec::new();
    for s in visible {
        if !rng.gen_bool(params.detection_prob) {
            continue;
        }
        let local = pose.apply_inverse(s);
        let r = noisy(rng, local.norm(), params.sigma_range).max(0.0);
        let az = noisy(rng, local.azimuth(), params.sigma_azimuth);
        points.push(RadarPoint {
            x: r * az.cos(),
            y: r * az.sin(),
            vx: 0.0,
            vy: 0.0,
        });
    }
    let wedge = |rng: &mut ChaCha8Rng| {
        let r = params.max_range * rng.gen::<f64>().sqrt();
        let az = rng.gen_range(-half..=half);
        (r * az.cos(), r * az.sin())
    };
    for _ in 0..poisson(rng, params.clutter_rate) {
        let (x, y) = wedge(rng);
        points.push(RadarPoint { x, y, vx: 0.0, vy: 0.0 });
    }
    for _ in 0..poisson(rng, params.dynamic_clutter_rate) {
        let (x, y) = wedge(rng);
        let speed = rng.gen_range(params.dynamic_speed.0..=params.dynamic_speed.1);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        points.push(RadarPoint {
            x,
            y,
            vx: speed * heading.cos(),
            vy: speed * heading.sin(),
        });
    }
    points.sort_by(|a, b| a.position().norm().total_cmp(&b.position().norm()));
    points.truncate(params.max_clusters);
    RadarFrame {
        timestamp: 0.0,
        sensor_id: mount.sensor_id.clone(),
        points,
    }
}

/// Front radar, two rear-corner radars and a roof lidar.
pub fn default_mounts() -> Vec<SensorMount> {
    let radar = |id: &str, x: f64, y: f64, yaw_deg: f64| SensorMount {
        sensor_id: id.into(),
        mount_pose: Pose2::new(x, y, yaw_deg.to_radians()),
        kind: SensorKind::Radar,
    };
    vec![
        radar("radar_front", 3.5, 0.0, 0.0),
        radar("radar_rear_left", -0.5, 0.9, 135.0),
        radar("radar_rear_right", -0.5, -0.9, -135.0),
        SensorMount {
            sensor_id: "lidar_top".into(),
            mount_pose: Pose2::identity(),
            kind: SensorKind::Lidar,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub steps: usize,
    pub speed: f64,
    pub grid: GridSpec,
    pub world: WorldParams,
    pub trajectory: TrajectoryParams,
    pub radar: RadarSensorParams,
    pub lidar: LidarSensorParams,
    pub mounts: Vec<SensorMount>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            steps: 100,
            speed: 8.0,
            grid: GridSpec::paper_default(),
            world: WorldParams::default(),
            trajectory: TrajectoryParams::default(),
            radar: RadarSensorParams::default(),
            lidar: LidarSensorParams::with_ground_rings(),
            mounts: default_mounts(),
        }
    }
}

/// World and trajectory of scene `seed`, without sensing.
pub fn gen_layout(seed: u64, params: &SceneParams) -> Result<(WorldMap, Vec<Pose2>)> {
    let world = gen_world(seed, &params.world)?;
    let poses = gen_trajectory(&world, seed, params.steps, params.speed, &params.trajectory);
    Ok((world, poses))
}

/// Renders a scene for a given world and trajectory. Each (step, sensor)
/// pair draws from its own stream so steps are independent.
pub fn render_scene(seed: u64, world: &WorldMap, poses: &[Pose2], params: &SceneParams) -> SceneBundle {
    let samples = world.surface_samples(params.radar.surface_spacing);
    let n_mounts = params.mounts.len() as u64;
    let steps = poses
        .iter()
        .enumerate()
        .map(|(t, ego)| {
            let timestamp = t as f64 * params.trajectory.dt;
            let mut radar = Vec::new();
            let mut lidar = Vec::new();
            for (s, mount) in params.mounts.iter().enumerate() {
                let mut rng = stream_rng(seed, 1000 + t as u64 * n_mounts + s as u64);
                match mount.kind {
                    SensorKind::Radar => {
                        let mut f = sense_radar(world, &samples, ego, mount, &params.radar, &mut rng);
                        f.timestamp = timestamp;
                        radar.push(f);
                    }
                    SensorKind::Lidar => {
                        let mut l = sense_lidar(world, ego, mount, &params.lidar, &mut rng);
                        l.timestamp = timestamp;
                        lidar.push(l);
                    }
                }
            }
            TimeStep {
                timestamp,
                ego: *ego,
                radar,
                lidar,
            }
        })
        .collect();
    SceneBundle {
        seed,
        grid: params.grid,
        mounts: params.mounts.clone(),
        steps,
    }
}

pub fn gen_scene(seed: u64, params: &SceneParams) -> Result<SceneBundle> {
    if params.steps == 0 {
        return Err(Error::Config("a scene needs at least one step".into()));
    }
    params.grid.validate()?;
    params.radar.validate()?;
    if !(params.lidar.angular_resolution > 0.0) {
        return Err(Error::Config("lidar angular resolution must be positive".into()));
    }
    let (world, poses) = gen_layout(seed, params)?;
    let scene = render_scene(seed, &world, &poses, params);
    scene.validate()?;
    Ok(scene)
}

/// `n` scenes with seeds derived from `seed`, generated under `exec`.
pub fn gen_scenes(seed: u64, n: usize, params: &SceneParams, exec: Exec) -> Result<Vec<SceneBundle>> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| mix_seed(seed, i)).collect();
    exec.try_map(&seeds, |&s| gen_scene(s, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::filter_dynamic;

    #[test]
    fn rect_and_circle_ray_hits() {
        let r = Obstacle::Rect {
            min: Point2::new(2.0, -1.0),
            max: Point2::new(3.0, 1.0),
        };
        assert_eq!(r.ray_hit(Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)), Some(2.0));
        assert_eq!(r.ray_hit(Point2::new(0.0, 0.0), Point2::new(-1.0, 0.0)), None);
        assert_eq!(r.ray_hit(Point2::new(0.0, 2.0), Point2::new(1.0, 0.0)), None);
        let c = Obstacle::Circle {
            center: Point2::new(5.0, 0.0),
            radius: 1.0,
        };
        assert!((c.ray_hit(Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(c.ray_hit(Point2::new(0.0, 0.0), Point2::new(0.0, 1.0)), None);
    }

    #[test]
    fn empty_world_and_sweep() {
        let params = WorldParams {
            n_obstacles: 0,
            ..WorldParams::default()
        };
        let world = gen_world(3, &params).unwrap();
        assert!(world.obstacles.is_empty());
        let mount = &default_mounts()[3];
        let sweep = sense_lidar(&world, &Pose2::identity(), mount, &LidarSensorParams::default(), &mut stream_rng(1, 1));
        assert!(sweep.points.is_empty());
    }

    #[test]
    fn infeasible_world() {
        let params = WorldParams {
            lateral_extent: 5.5,
            corridor_half_width: 5.0,
            ..WorldParams::default()
        };
        assert!(matches!(gen_world(1, &params), Err(Error::Infeasible(_))));
        let crowded = WorldParams {
            n_obstacles: 10_000,
            max_attempts: 5,
            ..WorldParams::default()
        };
        assert!(matches!(gen_world(1, &crowded), Err(Error::Infeasible(_))));
    }

    #[test]
    fn trajectory_basics() {
        let world = gen_world(5, &WorldParams::default()).unwrap();
        let tp = TrajectoryParams::default();
        assert_eq!(gen_trajectory(&world, 1, 1, 8.0, &tp).len(), 1);
        let still = gen_trajectory(&world, 1, 20, 0.0, &tp);
        assert!(still.iter().all(|p| p.x == 0.0 && p.y == 0.0));
        let path = gen_trajectory(&world, 1, 200, 8.0, &tp);
        for w in path.windows(2) {
            let step = w[1].translation().sub(w[0].translation()).norm();
            assert!((step - 0.8).abs() < 1e-9);
            assert!(normalize_angle(w[1].yaw - w[0].yaw).abs() <= tp.max_yaw_rate * tp.dt + 1e-12);
            assert!(w[1].y.abs() < world.corridor_half_width);
        }
    }

    #[test]
    fn noise_free_radar_hits_surfaces() {
        let world = gen_world(9, &WorldParams::default()).unwrap();
        let params = RadarSensorParams::noise_free(0.5);
        let samples = world.surface_samples(params.surface_spacing);
        let mount = &default_mounts()[0];
        let ego = Pose2::new(10.0, 0.5, 0.1);
        let f = sense_radar(&world, &samples, &ego, mount, &params, &mut stream_rng(2, 2));
        assert!(!f.points.is_empty());
        let pose = ego.compose(&mount.mount_pose);
        for p in &f.points {
            assert!(world.boundary_distance(pose.apply(p.position())) < 1e-9);
        }
    }

    #[test]
    fn silent_radar_is_empty_and_dynamic_clutter_is_filtered() {
        let world = gen_world(9, &WorldParams::default()).unwrap();
        let mount = &default_mounts()[0];
        let silent = RadarSensorParams {
            detection_prob: 0.0,
            clutter_rate: 0.0,
            dynamic_clutter_rate: 0.0,
            ..RadarSensorParams::default()
        };
        let samples = world.surface_samples(silent.surface_spacing);
        let f = sense_radar(&world, &samples, &Pose2::identity(), mount, &silent, &mut stream_rng(1, 1));
        assert!(f.points.is_empty());

        let only_dynamic = RadarSensorParams {
            dynamic_clutter_rate: 5.0,
            ..silent
        };
        let mut total = 0;
        for s in 0..20 {
            let f = sense_radar(&world, &samples, &Pose2::identity(), mount, &only_dynamic, &mut stream_rng(s, 3));
            total += f.points.len();
            assert!(f.points.iter().all(|p| p.speed() > 1.0));
            assert!(filter_dynamic(&f, 0.5).points.is_empty());
        }
        assert!(total > 0);
    }
}
