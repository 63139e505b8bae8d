//! Alpha-shape concave hull.
//!
//! The region is the union of Delaunay triangles with circumradius at most
//! `alpha`. Its boundary is kept as closed rings plus a banded edge index for
//! fast even-odd containment queries.

use delaunator::{triangulate, Point as DPoint, EMPTY};

use crate::error::{Error, Result};
use crate::grid::Point2;

#[derive(Debug, Clone, PartialEq)]
pub struct HullPolygon {
    pub rings: Vec<Vec<Point2>>,
    area: f64,
    index: EdgeIndex,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct EdgeIndex {
    y0: f64,
    band: f64,
    /// Edges as (a, b) endpoint pairs.
    edges: Vec<(Point2, Point2)>,
    bands: Vec<Vec<u32>>,
}

impl EdgeIndex {
    fn build(edges: Vec<(Point2, Point2)>) -> Self {
        if edges.is_empty() {
            return Self::default();
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (a, b) in &edges {
            lo = lo.min(a.y.min(b.y));
            hi = hi.max(a.y.max(b.y));
        }
        let n_bands = ((edges.len() as f64).sqrt().ceil() as usize).max(1);
        let band = ((hi - lo) / n_bands as f64).max(1e-9);
        let mut bands = vec![Vec::new(); n_bands];
        for (i, (a, b)) in edges.iter().enumerate() {
            let first = (((a.y.min(b.y) - lo) / band).floor() as usize).min(n_bands - 1);
            let last = (((a.y.max(b.y) - lo) / band).floor() as usize).min(n_bands - 1);
            for slot in &mut bands[first..=last] {
                slot.push(i as u32);
            }
        }
        Self { y0: lo, band, edges, bands }
    }

    fn candidates(&self, y: f64) -> &[u32] {
        if self.bands.is_empty() {
            return &[];
        }
        let k = (y - self.y0) / self.band;
        if k < 0.0 || k > self.bands.len() as f64 {
            return &[];
        }
        &self.bands[(k.floor() as usize).min(self.bands.len() - 1)]
    }

    fn contains(&self, p: Point2) -> bool {
        let mut inside = false;
        for &i in self.candidates(p.y) {
            let (a, b) = self.edges[i as usize];
            if on_segment(p, a, b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if x > p.x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn on_segment(p: Point2, a: Point2, b: Point2) -> bool {
    const EPS: f64 = 1e-9;
    let ab = b.sub(a);
    let ap = p.sub(a);
    let cross = ab.x * ap.y - ab.y * ap.x;
    let len = ab.norm();
    if cross.abs() > EPS * len.max(1.0) {
        return false;
    }
    let dot = ab.x * ap.x + ab.y * ap.y;
    dot >= -EPS && dot <= ab.x * ab.x + ab.y * ab.y + EPS
}

fn circumradius(a: Point2, b: Point2, c: Point2) -> f64 {
    let (ab, bc, ca) = (b.sub(a).norm(), c.sub(b).norm(), a.sub(c).norm());
    let area2 = ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs();
    if area2 == 0.0 {
        f64::INFINITY
    } else {
        ab * bc * ca / (2.0 * area2)
    }
}

impl HullPolygon {
    /// A hull that contains nothing.
    pub fn empty() -> Self {
        Self {
            rings: Vec::new(),
            area: 0.0,
            index: EdgeIndex::default(),
        }
    }

    /// Axis-aligned rectangle, mostly for fixtures.
    pub fn rectangle(min: Point2, max: Point2) -> Self {
        Self::from_rings(vec![vec![
            min,
            Point2::new(max.x, min.y),
            max,
            Point2::new(min.x, max.y),
        ]])
    }

    /// Builds a polygon from closed rings (last vertex connects to the first).
    pub fn from_rings(rings: Vec<Vec<Point2>>) -> Self {
        let mut edges = Vec::new();
        let mut area = 0.0;
        for ring in &rings {
            let mut signed = 0.0;
            for i in 0..ring.len() {
                let (a, b) = (ring[i], ring[(i + 1) % ring.len()]);
                edges.push((a, b));
                signed += a.x * b.y - b.x * a.y;
            }
            area += signed / 2.0;
        }
        Self {
            rings,
            area: area.abs(),
            index: EdgeIndex::build(edges),
        }
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.rings.is_empty()
    }

    /// Inside or on the boundary (even-odd rule over all rings).
    pub fn contains(&self, p: Point2) -> bool {
        self.index.contains(p)
    }
}

pub fn concave_hull(points: &[Point2], alpha: f64) -> Result<HullPolygon> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if points.len() < 3 {
        return Err(Error::DegenerateHull(format!("{} points", points.len())));
    }
    let dpts: Vec<DPoint> = points.iter().map(|p| DPoint { x: p.x, y: p.y }).collect();
    let tri = triangulate(&dpts);
    if tri.triangles.is_empty() {
        return Err(Error::DegenerateHull("all points are collinear".into()));
    }
    let n_tri = tri.triangles.len() / 3;
    let corner = |t: usize, k: usize| points[tri.triangles[3 * t + k]];
    let kept: Vec<bool> = (0..n_tri)
        .map(|t| circumradius(corner(t, 0), corner(t, 1), corner(t, 2)) <= alpha)
        .collect();
    let mut area = 0.0;
    for t in (0..n_tri).filter(|&t| kept[t]) {
        let (a, b, c) = (corner(t, 0), corner(t, 1), corner(t, 2));
        area += ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs() / 2.0;
    }
    // boundary half-edges: kept triangle on one side only
    let mut next_from: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    let mut boundary = Vec::new();
    for e in 0..tri.triangles.len() {
        if !kept[e / 3] {
            continue;
        }
        let twin = tri.halfedges[e];
        if twin == EMPTY || !kept[twin / 3] {
            let from = tri.triangles[e];
            let to = tri.triangles[if e % 3 == 2 { e - 2 } else { e + 1 }];
            next_from.entry(from).or_default().push(boundary.len());
            boundary.push((from, to));
        }
    }
    let mut used = vec![false; boundary.len()];
    let mut rings = Vec::new();
    for start in 0..boundary.len() {
        if used[start] {
            continue;
        }
        let mut ring = Vec::new();
        let mut e = start;
        loop {
            used[e] = true;
            let (from, to) = boundary[e];
            ring.push(points[from]);
            let next = next_from
                .get(&to)
                .and_then(|list| list.iter().copied().find(|&k| !used[k]));
            match next {
                Some(k) => e = k,
                None => break,
            }
        }
        rings.push(ring);
    }
    let edges = boundary.iter().map(|&(a, b)| (points[a], points[b])).collect();
    Ok(HullPolygon {
        rings,
        area,
        index: EdgeIndex::build(edges),
    })
}

/// Convex hull by monotone chain, counter-clockwise, without collinear points.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point2, a: Point2, b: Point2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}
