//! Grid geometry, planar rigid transforms and cell ray traversal.
//!
//! The grid frame has x pointing forward from the sensor and y to the left.
//! Rows (`u`) run along x, columns (`v`) along y, storage is row-major.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    /// Bearing of the point seen from the origin, in (-pi, pi].
    pub fn azimuth(self) -> f64 {
        self.y.atan2(self.x)
    }
}

/// Cell index: `u` is the row (forward axis), `v` the column (lateral axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub u: usize,
    pub v: usize,
}

impl Cell {
    pub const fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub cell_x: f64,
    pub cell_y: f64,
    /// Grid-frame coordinate of the outer corner of cell (0, 0).
    pub origin: Point2,
}

impl GridSpec {
    /// 215 x 50 cells of 0.4 m: 0..86 m forward, -10..10 m lateral.
    pub fn paper_default() -> Self {
        Self::sensor_centered(215, 50, 0.4)
    }

    /// Square cells with the sensor at the middle of the near edge.
    pub fn sensor_centered(height: usize, width: usize, cell: f64) -> Self {
        Self {
            height,
            width,
            cell_x: cell,
            cell_y: cell,
            origin: Point2::new(0.0, -(width as f64) * cell / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.cell_x > 0.0 && self.cell_y > 0.0) || !self.cell_x.is_finite() || !self.cell_y.is_finite() {
            return Err(Error::Config("cell sizes must be finite and positive".into()));
        }
        if !self.origin.x.is_finite() || !self.origin.y.is_finite() {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent_x(&self) -> f64 {
        self.height as f64 * self.cell_x
    }

    pub fn extent_y(&self) -> f64 {
        self.width as f64 * self.cell_y
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.u * self.width + c.v
    }

    #[inline]
    pub fn cell_of_index(&self, i: usize) -> Cell {
        Cell::new(i / self.width, i % self.width)
    }

    /// Continuous grid-index coordinates (row, column) of a point.
    #[inline]
    fn to_index_space(&self, p: Point2) -> (f64, f64) {
        ((p.x - self.origin.x) / self.cell_x, (p.y - self.origin.y) / self.cell_y)
    }

    pub fn world_to_cell(&self, p: Point2) -> Option<Cell> {
        let (gx, gy) = self.to_index_space(p);
        let (u, v) = (gx.floor(), gy.floor());
        if u >= 0.0 && v >= 0.0 && u < self.height as f64 && v < self.width as f64 {
            Some(Cell::new(u as usize, v as usize))
        } else {
            None
        }
    }

    /// Cell containing the point after clamping it into the grid.
    pub fn world_to_cell_clamped(&self, p: Point2) -> Cell {
        let (gx, gy) = self.to_index_space(p);
        Cell::new(
            gx.floor().clamp(0.0, (self.height - 1) as f64) as usize,
            gy.floor().clamp(0.0, (self.width - 1) as f64) as usize,
        )
    }

    pub fn cell_center(&self, c: Cell) -> Point2 {
        Point2::new(
            self.origin.x + (c.u as f64 + 0.5) * self.cell_x,
            self.origin.y + (c.v as f64 + 0.5) * self.cell_y,
        )
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |u| (0..self.width).map(move |v| Cell::new(u, v)))
    }

    pub fn is_boundary(&self, c: Cell) -> bool {
        c.u == 0 || c.v == 0 || c.u + 1 == self.height || c.v + 1 == self.width
    }

    /// Cells on the outer ring, each listed once.
    pub fn boundary_cells(&self) -> Vec<Cell> {
        self.cells().filter(|&c| self.is_boundary(c)).collect()
    }

    pub fn same_geometry(&self, other: &GridSpec) -> bool {
        self == other
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Dense row-major H x W array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type BinaryGrid = Grid2<bool>;

impl<T: Clone> Grid2<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn for_spec(spec: &GridSpec, value: T) -> Self {
        Self::filled(spec.height, spec.width, value)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[u * self.width + v]
    }

    #[inline]
    pub fn at(&self, c: Cell) -> &T {
        self.get(c.u, c.v)
    }

    #[inline]
    pub fn set(&mut self, c: Cell, value: T) {
        self.data[c.u * self.width + c.v] = value;
    }

    #[inline]
    pub fn at_mut(&mut self, c: Cell) -> &mut T {
        &mut self.data[c.u * self.width + c.v]
    }

    /// Mirror along the lateral axis (column v maps to W-1-v).
    pub fn flip_lateral(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev().cloned());
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid2<U> {
        Grid2 {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn fits(&self, spec: &GridSpec) -> bool {
        self.height == spec.height && self.width == spec.width
    }
}

/// Occupancy category of one cell. The discriminants are the class indices
/// used by the network (Free=0, Occupied=1, Unobserved=2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Category {
    Free = 0,
    Occupied = 1,
    Unobserved = 2,
    Ignore = 3,
}

impl Category {
    pub const LIVE: [Category; 3] = [Category::Free, Category::Occupied, Category::Unobserved];

    pub fn class_index(self) -> Option<usize> {
        match self {
            Category::Ignore => None,
            c => Some(c as usize),
        }
    }

    pub fn from_class_index(i: usize) -> Category {
        match i {
            0 => Category::Free,
            1 => Category::Occupied,
            2 => Category::Unobserved,
            _ => Category::Ignore,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub spec: GridSpec,
    pub cells: Grid2<Category>,
}

impl LabelGrid {
    pub fn filled(spec: GridSpec, category: Category) -> Self {
        Self {
            spec,
            cells: Grid2::for_spec(&spec, category),
        }
    }

    pub fn from_cells(spec: GridSpec, cells: Vec<Category>) -> Result<Self> {
        if cells.len() != spec.len() {
            return Err(Error::Shape(format!("{} cells for a {}x{} grid", cells.len(), spec.height, spec.width)));
        }
        Ok(Self {
            spec,
            cells: Grid2 {
                height: spec.height,
                width: spec.width,
                data: cells,
            },
        })
    }

    pub fn get(&self, c: Cell) -> Category {
        *self.cells.at(c)
    }

    pub fn set(&mut self, c: Cell, category: Category) {
        self.cells.set(c, category);
    }

    pub fn count(&self, category: Category) -> usize {
        self.cells.data.iter().filter(|&&c| c == category).count()
    }

    pub fn flip_lateral(&self) -> Self {
        Self {
            spec: self.spec,
            cells: self.cells.flip_lateral(),
        }
    }
}

pub fn normalize_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

/// Planar rigid motion: rotation by `yaw` followed by translation `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn apply_inverse(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p.x - self.x, p.y - self.y);
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn rotate(&self, v: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn invert(a: &Pose2) -> Pose2 {
    a.inverse()
}

pub fn transform_points(pose: &Pose2, pts: &[Point2]) -> Vec<Point2> {
    pts.iter().map(|&p| pose.apply(p)).collect()
}

/// Clips the parametric segment `p0 + t (p1 - p0)`, t in [0, 1], to the box
/// [0, hx] x [0, hy]. Returns the surviving parameter interval.
fn clip_to_box(p0: (f64, f64), p1: (f64, f64), hx: f64, hy: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    for (p, q) in [
        (-d.0, p0.0),
        (d.0, hx - p0.0),
        (-d.1, p0.1),
        (d.1, hy - p0.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Supercover walk in unit index space from `g0` towards `g1`, restricted to
/// the box [0,h) x [0,w). `start` is the cell containing `g0`. On an exact
/// corner crossing the row step is taken first, keeping the chain 4-connected.
fn walk(h: usize, w: usize, g0: (f64, f64), g1: (f64, f64), start: (i64, i64), visit: &mut impl FnMut(Cell)) {
    let (dx, dy) = (g1.0 - g0.0, g1.1 - g0.1);
    let (mut u, mut v) = start;
    let end = (g1.0.floor() as i64, g1.1.floor() as i64);
    let step_u = if dx > 0.0 { 1 } else if dx < 0.0 { -1 } else { 0 };
    let step_v = if dy > 0.0 { 1 } else if dy < 0.0 { -1 } else { 0 };
    let boundary = |c: i64, g: f64, d: f64| {
        if d > 0.0 {
            ((c + 1) as f64 - g) / d
        } else if d < 0.0 {
            (c as f64 - g) / d
        } else {
            f64::INFINITY
        }
    };
    let mut t_u = boundary(u, g0.0, dx);
    let mut t_v = boundary(v, g0.1, dy);
    let du = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let dv = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    loop {
        visit(Cell::new(u as usize, v as usize));
        if (u, v) == end {
            break;
        }
        if t_u <= t_v {
            if t_u > 1.0 {
                break;
            }
            u += step_u;
            t_u += du;
        } else {
            if t_v > 1.0 {
                break;
            }
            v += step_v;
            t_v += dv;
        }
        if u < 0 || v < 0 || u >= h as i64 || v >= w as i64 {
            break;
        }
    }
}

/// Cells crossed by the segment, clipped to the grid, ordered from `a`.
/// Works for endpoints anywhere, including outside the grid.
pub fn traverse_clipped(spec: &GridSpec, a: Point2, b: Point2) -> Vec<Cell> {
    let mut out = Vec::new();
    traverse_clipped_with(spec, a, b, |c| out.push(c));
    out
}

pub fn traverse_clipped_with(spec: &GridSpec, a: Point2, b: Point2, mut visit: impl FnMut(Cell)) {
    let g0 = spec.to_index_space(a);
    let g1 = spec.to_index_space(b);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let Some((t0, _)) = clip_to_box(g0, g1, h, w) else {
        return;
    };
    let s = (g0.0 + t0 * (g1.0 - g0.0), g0.1 + t0 * (g1.1 - g0.1));
    let start = (
        (s.0.floor() as i64).clamp(0, spec.height as i64 - 1),
        (s.1.floor() as i64).clamp(0, spec.width as i64 - 1),
    );
    walk(spec.height, spec.width, s, g1, start, &mut visit);
}

/// Ordered supercover traversal from `origin` to `target`. Empty when the
/// origin lies outside the grid (points on the outer boundary count as inside).
pub fn traverse_ray(spec: &GridSpec, origin: Point2, target: Point2) -> Vec<Cell> {
    let (gx, gy) = spec.to_index_space(origin);
    let inside = gx >= 0.0 && gy >= 0.0 && gx <= spec.height as f64 && gy <= spec.width as f64;
    if !inside {
        return Vec::new();
    }
    traverse_clipped(spec, origin, target)
}

/// Angular / range window of a sensor looking along +x of its grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    pub half_angle: f64,
    pub max_range: f64,
}

impl Default for FieldOfView {
    fn default() -> Self {
        Self {
            half_angle: 60f64.to_radians(),
            max_range: 86.0,
        }
    }
}

impl FieldOfView {
    pub fn contains(&self, sensor: Point2, p: Point2) -> bool {
        let d = p.sub(sensor);
        d.azimuth().abs() <= self.half_angle && d.norm() <= self.max_range
    }
}

/// Labels every cell from the sensor's point of view given an occupancy mask.
///
/// One ray goes to the center of each boundary cell inside the field of view.
/// Along a ray: Free up to the first occupied run, Occupied for that run,
/// Unobserved after it. Conflicts resolve Occupied > Free > Unobserved.
/// Cells outside the field of view become Ignore; in-view cells touched by no
/// ray are Unobserved.
pub fn visibility_label(spec: &GridSpec, sensor: Point2, occupied: &BinaryGrid, fov: &FieldOfView) -> LabelGrid {
    assert!(occupied.fits(spec), "mask shape does not match grid spec");
    // 0 = untouched, 1 = unobserved, 2 = free, 3 = occupied
    let mut rank = vec![0u8; spec.len()];
    let mut ray = Vec::with_capacity(spec.height + spec.width);
    for target in spec.boundary_cells() {
        let center = spec.cell_center(target);
        if center.sub(sensor).azimuth().abs() > fov.half_angle {
            continue;
        }
        ray.clear();
        traverse_clipped_with(spec, sensor, center, |c| ray.push(c));
        mark_ray(spec, &ray, occupied, &mut rank);
    }
    let cells = spec
        .cells()
        .map(|c| {
            if !fov.contains(sensor, spec.cell_center(c)) {
                return Category::Ignore;
            }
            match rank[spec.index(c)] {
                3 => Category::Occupied,
                2 => Category::Free,
                _ => Category::Unobserved,
            }
        })
        .collect();
    LabelGrid::from_cells(*spec, cells).expect("cell count matches spec")
}

fn mark_ray(spec: &GridSpec, ray: &[Cell], occupied: &BinaryGrid, rank: &mut [u8]) {
    // phase 0: before the obstacle, 1: inside the first run, 2: behind it
    let mut phase = 0;
    for &c in ray {
        let occ = *occupied.at(c);
        phase = match (phase, occ) {
            (0, true) => 1,
            (1, false) => 2,
            (p, _) => p,
        };
        let r = match phase {
            0 => 2,
            1 => 3,
            _ => 1,
        };
        let slot = &mut rank[spec.index(c)];
        *slot = (*slot).max(r);
    }
}
