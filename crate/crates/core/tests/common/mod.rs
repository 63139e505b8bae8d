//! Independent reference implementations shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use occgrid::classic::{bayes_update, delta_ism_update, Increment, IsmConfig, LogOddsGrid};
use occgrid::grid::{traverse_ray, visibility_label, BinaryGrid, Cell, FieldOfView, Grid2};
use occgrid::lovasz::{lovasz_softmax, ProbMap};
use occgrid::metrics::{confusion, iou_per_class, miou};
use occgrid::{Category, GridSpec, LabelGrid, Point2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_spec(h: usize, w: usize) -> GridSpec {
    GridSpec {
        height: h,
        width: w,
        cell_x: 1.0,
        cell_y: 1.0,
        origin: Point2::new(0.0, 0.0),
    }
}

/// Per-class (Free, Occupied, Unobserved) IoU and mIoU rows of the reference
/// comparison table: Delta ISM, Gaussian ISM, ray trace, learned model.
pub const TABLE_ROWS: [(&str, [f64; 3], f64); 4] = [
    ("Delta ISM", [0.029, 0.391, 0.311], 0.244),
    ("Gaussian ISM", [0.012, 0.444, 0.213], 0.223),
    ("Ray trace", [0.066, 0.576, 0.405], 0.349),
    ("Occupancy net", [0.108, 0.614, 0.593], 0.439),
];

// ---------------------------------------------------------------- traversal

/// Parameter interval of the segment `a + t (b - a)`, t in [0, 1], inside the
/// closed box [u0, u0+1] x [v0, v0+1] of index space.
fn box_interval(a: (f64, f64), b: (f64, f64), u0: f64, v0: f64) -> Option<(f64, f64)> {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for (p, d, min) in [(a.0, b.0 - a.0, u0), (a.1, b.1 - a.1, v0)] {
        if d == 0.0 {
            if p < min || p > min + 1.0 {
                return None;
            }
        } else {
            let (t1, t2) = ((min - p) / d, (min + 1.0 - p) / d);
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
        }
    }
    (lo <= hi).then_some((lo, hi))
}

fn index_space(spec: &GridSpec, p: Point2) -> (f64, f64) {
    ((p.x - spec.origin.x) / spec.cell_x, (p.y - spec.origin.y) / spec.cell_y)
}

/// Cells whose interior the segment crosses with positive length, ordered by
/// entry parameter. Where the segment passes exactly through a lattice point
/// and both indices change, the row neighbour is inserted, matching the
/// traversal convention of stepping rows first on ties.
pub fn oracle_traversal(spec: &GridSpec, a: Point2, b: Point2) -> Vec<Cell> {
    let (ga, gb) = (index_space(spec, a), index_space(spec, b));
    let mut hits: Vec<(f64, Cell)> = Vec::new();
    for u in 0..spec.height {
        for v in 0..spec.width {
            if let Some((lo, hi)) = box_interval(ga, gb, u as f64, v as f64) {
                let degenerate_inside = ga == gb;
                if hi - lo > 1e-12 || degenerate_inside {
                    hits.push((lo, Cell::new(u, v)));
                }
            }
        }
    }
    hits.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<Cell> = Vec::with_capacity(hits.len() * 2);
    for (_, c) in hits {
        if let Some(&prev) = out.last() {
            if prev.u != c.u && prev.v != c.v {
                out.push(Cell::new(c.u, prev.v));
            }
        }
        out.push(c);
    }
    out
}

/// Random segment with a generic origin inside the grid and a target
/// anywhere in a box twice the grid size.
pub fn random_ray(rng: &mut impl Rng, spec: &GridSpec) -> (Point2, Point2) {
    let (ex, ey) = (spec.extent_x(), spec.extent_y());
    let a = Point2::new(spec.origin.x + rng.gen_range(0.0..ex), spec.origin.y + rng.gen_range(0.0..ey));
    let b = Point2::new(
        spec.origin.x + rng.gen_range(-0.5 * ex..1.5 * ex),
        spec.origin.y + rng.gen_range(-0.5 * ey..1.5 * ey),
    );
    (a, b)
}

pub fn random_spec(rng: &mut impl Rng) -> GridSpec {
    GridSpec {
        height: rng.gen_range(1..40),
        width: rng.gen_range(1..40),
        cell_x: rng.gen_range(0.1..2.0),
        cell_y: rng.gen_range(0.1..2.0),
        origin: Point2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)),
    }
}

/// Number of random rays whose traversal differs from the oracle.
pub fn traversal_mismatches(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..n)
        .filter(|_| {
            let spec = random_spec(&mut r);
            let (a, b) = random_ray(&mut r, &spec);
            traverse_ray(&spec, a, b) != oracle_traversal(&spec, a, b)
        })
        .count()
}

// --------------------------------------------------------------- visibility

/// 7x7 world whose central 3x3 block carries the bits of `pattern`.
pub fn exhaustive_world(pattern: u16) -> BinaryGrid {
    let mut g = Grid2::filled(7, 7, false);
    for bit in 0..9 {
        if pattern >> bit & 1 == 1 {
            g.set(Cell::new(2 + bit / 3, 2 + bit % 3), true);
        }
    }
    g
}

/// Per-cell classification from exact segment intersections: a cell is
/// Occupied if some in-view ray's first obstacle run covers it, else Free if
/// some ray reaches it before any obstacle, else Unobserved; Ignore outside
/// the field of view.
pub fn oracle_visibility(spec: &GridSpec, sensor: Point2, mask: &BinaryGrid, fov: &FieldOfView) -> LabelGrid {
    let mut occ = vec![false; spec.len()];
    let mut free = vec![false; spec.len()];
    for u in 0..spec.height {
        for v in 0..spec.width {
            if u != 0 && v != 0 && u + 1 != spec.height && v + 1 != spec.width {
                continue;
            }
            let target = spec.cell_center(Cell::new(u, v));
            let (dx, dy) = (target.x - sensor.x, target.y - sensor.y);
            if dy.atan2(dx).abs() > fov.half_angle {
                continue;
            }
            let ray = oracle_traversal(spec, sensor, target);
            let first = ray.iter().position(|c| *mask.at(*c)).unwrap_or(ray.len());
            let run_end = ray[first..].iter().position(|c| !*mask.at(*c)).map_or(ray.len(), |k| first + k);
            for c in &ray[..first] {
                free[spec.index(*c)] = true;
            }
            for c in &ray[first..run_end] {
                occ[spec.index(*c)] = true;
            }
        }
    }
    let cells = (0..spec.len())
        .map(|i| {
            let c = spec.cell_of_index(i);
            let p = spec.cell_center(c);
            let (dx, dy) = (p.x - sensor.x, p.y - sensor.y);
            if dy.atan2(dx).abs() > fov.half_angle || dx.hypot(dy) > fov.max_range {
                Category::Ignore
            } else if occ[i] {
                Category::Occupied
            } else if free[i] {
                Category::Free
            } else {
                Category::Unobserved
            }
        })
        .collect();
    LabelGrid::from_cells(*spec, cells).unwrap()
}

/// Masks (out of 512) on which visibility_label disagrees with the oracle.
pub fn visibility_mismatches() -> Vec<u16> {
    let spec = GridSpec::sensor_centered(7, 7, 1.0);
    let sensor = Point2::new(0.0, 0.0);
    let fov = FieldOfView::default();
    (0..512u16)
        .filter(|&m| {
            let mask = exhaustive_world(m);
            visibility_label(&spec, sensor, &mask, &fov) != oracle_visibility(&spec, sensor, &mask, &fov)
        })
        .collect()
}

// ------------------------------------------------------------------ metrics

pub const LIVE: [Category; 3] = [Category::Free, Category::Occupied, Category::Unobserved];
pub const ALL: [Category; 4] = [Category::Free, Category::Occupied, Category::Unobserved, Category::Ignore];

pub fn random_labels(rng: &mut impl Rng, spec: GridSpec, with_ignore: bool) -> LabelGrid {
    let pool: &[Category] = if with_ignore { &ALL } else { &LIVE };
    let cells = (0..spec.len()).map(|_| *pool.choose(rng).unwrap()).collect();
    LabelGrid::from_cells(spec, cells).unwrap()
}

/// IoU per class by enumerating the cells, straight from set definitions.
pub fn naive_iou(pred: &LabelGrid, gt: &LabelGrid) -> [f64; 3] {
    LIVE.map(|class| {
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, g) in pred.cells.data.iter().zip(&gt.cells.data) {
            if *g == Category::Ignore {
                continue;
            }
            let (in_p, in_g) = (*p == class, *g == class);
            inter += (in_p && in_g) as usize;
            union += (in_p || in_g) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    })
}

/// Random 16x16 pairs on which the module IoU differs from enumeration.
pub fn iou_mismatches(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let spec = unit_spec(16, 16);
    (0..n)
        .filter(|_| {
            let gt = random_labels(&mut r, spec, true);
            let pred = random_labels(&mut r, spec, false);
            iou_per_class(&confusion(&pred, &gt).unwrap()) != naive_iou(&pred, &gt)
        })
        .count()
}

/// Largest |lovasz_c - (1 - IoU_c)| over random hard predictions on 8x8 grids.
pub fn lovasz_iou_gap(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = unit_spec(8, 8);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let gt = random_labels(&mut r, spec, true);
        if gt.cells.data.iter().all(|c| *c == Category::Ignore) {
            continue;
        }
        let pred = random_labels(&mut r, spec, false);
        let out = lovasz_softmax(&ProbMap::one_hot(&pred), &gt).unwrap();
        let iou = iou_per_class(&confusion(&pred, &gt).unwrap());
        for c in 0..3 {
            if let Some(l) = out.per_class[c] {
                worst = worst.max((l - (1.0 - iou[c])).abs());
            }
        }
    }
    worst
}

pub fn table_miou_errors() -> Vec<(&'static str, f64, f64)> {
    TABLE_ROWS.iter().map(|&(name, ious, printed)| (name, miou(&ious), printed)).collect()
}

// ------------------------------------------------------------------ classic

/// Increments of `n` random frames of detections on a sensor-centred grid.
pub fn random_increments(n: usize, seed: u64) -> Vec<Increment> {
    let mut r = rng(seed);
    let spec = GridSpec::sensor_centered(40, 30, 0.5);
    let cfg = IsmConfig::default();
    (0..n)
        .map(|_| {
            let dets: Vec<Point2> = (0..r.gen_range(0..12))
                .map(|_| Point2::new(r.gen_range(0.0..20.0), r.gen_range(-7.5..7.5)))
                .collect();
            let sensor = Point2::new(r.gen_range(0.0..2.0), r.gen_range(-1.0..1.0));
            delta_ism_update(&spec, sensor, &dets, &cfg)
        })
        .collect()
}

pub fn accumulate<'a>(incs: impl IntoIterator<Item = &'a Increment>, spec: GridSpec, l0: f64) -> LogOddsGrid {
    let mut acc = LogOddsGrid::new(spec, l0);
    for inc in incs {
        bayes_update(&mut acc, inc).unwrap();
    }
    acc
}

/// True when every one of `perms` random orderings accumulates to the same
/// bits as the natural order.
pub fn bayes_is_order_free(perms: usize, seed: u64) -> bool {
    let incs = random_increments(10, seed);
    let spec = incs[0].spec;
    let reference: Vec<u64> = accumulate(&incs, spec, 0.2).values().data.iter().map(|v| v.to_bits()).collect();
    let mut r = rng(seed ^ 0xabc);
    (0..perms).all(|_| {
        let mut order: Vec<usize> = (0..incs.len()).collect();
        order.shuffle(&mut r);
        let acc = accumulate(order.iter().map(|&i| &incs[i]), spec, 0.2);
        acc.values().data.iter().map(|v| v.to_bits()).eq(reference.iter().copied())
    })
}
