use occgrid::aggregate::{aggregate_frames, rasterize_bev, AggregationConfig, RadarFrame, RadarPoint, SensorKind, SensorMount};
use occgrid::classic::{bayes_update, classify_grid, delta_ism_update, IsmConfig, LogOddsGrid};
use occgrid::grid::{compose, invert, Cell, Grid2};
use occgrid::lovasz::{lovasz_softmax, weighted_cross_entropy, ProbMap};
use occgrid::metrics::{confusion, iou_per_class};
use occgrid::{Category, GridSpec, LabelGrid, Point2, Pose2};
use proptest::prelude::*;

fn pose() -> impl Strategy<Value = Pose2> {
    (-50.0f64..50.0, -50.0f64..50.0, -3.1f64..3.1).prop_map(|(x, y, yaw)| Pose2::new(x, y, yaw))
}

fn category(live_only: bool) -> impl Strategy<Value = Category> {
    let all = [Category::Free, Category::Occupied, Category::Unobserved, Category::Ignore];
    proptest::sample::select(all[..if live_only { 3 } else { 4 }].to_vec())
}

fn label_pair(h: usize, w: usize) -> impl Strategy<Value = (LabelGrid, LabelGrid)> {
    let spec = GridSpec::sensor_centered(h, w, 1.0);
    (proptest::collection::vec(category(true), h * w), proptest::collection::vec(category(false), h * w))
        .prop_map(move |(p, g)| (LabelGrid::from_cells(spec, p).unwrap(), LabelGrid::from_cells(spec, g).unwrap()))
}

fn simplex() -> impl Strategy<Value = [f64; 3]> {
    (0.001f64..1.0, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(a, b, c)| {
        let s = a + b + c;
        [a / s, b / s, c / s]
    })
}

fn mount() -> SensorMount {
    SensorMount {
        sensor_id: "radar".into(),
        mount_pose: Pose2::new(3.5, 0.2, 0.1),
        kind: SensorKind::Radar,
    }
}

fn frames(n: usize) -> impl Strategy<Value = Vec<(RadarFrame, Pose2)>> {
    let point = (0.0f64..40.0, -12.0f64..12.0, -1.0f64..1.0).prop_map(|(x, y, v)| RadarPoint { x, y, vx: v, vy: 0.0 });
    let frame = (proptest::collection::vec(point, 0..15), pose()).prop_map(|(points, p)| {
        (
            RadarFrame {
                timestamp: 0.0,
                sensor_id: "radar".into(),
                points,
            },
            Pose2::new(p.x * 0.1, p.y * 0.1, p.yaw * 0.05),
        )
    });
    proptest::collection::vec(frame, n)
}

proptest! {
    #[test]
    fn cell_center_round_trips(h in 1usize..60, w in 1usize..60, cell in 0.05f64..2.0, u in 0usize..60, v in 0usize..60) {
        let spec = GridSpec::sensor_centered(h, w, cell);
        let c = Cell::new(u % h, v % w);
        prop_assert_eq!(spec.world_to_cell(spec.cell_center(c)), Some(c));
    }

    #[test]
    fn pose_inverse_composes_to_identity(a in pose()) {
        let id = compose(&a, &invert(&a));
        prop_assert!(id.x.abs() < 1e-12 && id.y.abs() < 1e-12);
        prop_assert!(occgrid::grid::normalize_angle(id.yaw).abs() < 1e-12);
    }

    #[test]
    fn aggregation_ignores_the_order_of_older_frames(fs in frames(5), seed in any::<u64>()) {
        let spec = GridSpec::sensor_centered(100, 60, 0.4);
        let cfg = AggregationConfig { frames: 5, velocity_threshold: 0.5 };
        let (f, p): (Vec<_>, Vec<_>) = fs.iter().cloned().unzip();
        let base = rasterize_bev(&aggregate_frames(&f, &p, &mount(), &cfg).unwrap(), &spec);
        let mut order: Vec<usize> = (0..4).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        order.push(4);
        let (f2, p2): (Vec<_>, Vec<_>) = order.iter().map(|&i| fs[i].clone()).unzip();
        let pts = aggregate_frames(&f2, &p2, &mount(), &cfg).unwrap();
        let permuted = rasterize_bev(&pts, &spec);
        prop_assert_eq!(&base, &permuted);
        prop_assert!(base.data.iter().filter(|&&b| b).count() <= pts.len());
    }

    #[test]
    fn stationary_aggregation_is_the_union(fs in frames(4)) {
        let spec = GridSpec::sensor_centered(100, 60, 0.4);
        let cfg = AggregationConfig { frames: 4, velocity_threshold: 0.5 };
        let (f, _): (Vec<_>, Vec<_>) = fs.into_iter().unzip();
        let still = vec![Pose2::new(1.0, 2.0, 0.3); 4];
        let m = SensorMount { mount_pose: Pose2::identity(), ..mount() };
        let agg = rasterize_bev(&aggregate_frames(&f, &still, &m, &cfg).unwrap(), &spec);
        let union: Vec<Point2> = f.iter().flat_map(|fr| fr.points.iter().filter(|p| p.speed() <= 0.5).map(|p| p.position())).collect();
        let direct = rasterize_bev(&union, &spec);
        prop_assert_eq!(agg, direct);
    }

    #[test]
    fn bayes_accumulation_commutes(dets in proptest::collection::vec(proptest::collection::vec((0.5f64..20.0, -7.0f64..7.0), 0..8), 2..8), l0 in -1.0f64..1.0) {
        let spec = GridSpec::sensor_centered(40, 28, 0.5);
        let cfg = IsmConfig::default();
        let incs: Vec<_> = dets.iter().map(|d| {
            let pts: Vec<Point2> = d.iter().map(|&(x, y)| Point2::new(x, y)).collect();
            delta_ism_update(&spec, Point2::new(0.0, 0.0), &pts, &cfg)
        }).collect();
        let run = |order: &mut dyn Iterator<Item = usize>| {
            let mut acc = LogOddsGrid::new(spec, l0);
            for i in order { bayes_update(&mut acc, &incs[i]).unwrap(); }
            acc
        };
        let fwd = run(&mut (0..incs.len()));
        let rev = run(&mut (0..incs.len()).rev());
        prop_assert_eq!(fwd.evidence, rev.evidence);
    }

    #[test]
    fn raising_probability_never_moves_towards_free(p in 0.0f64..1.0, dp in 0.0f64..1.0, t_free in 0.0f64..0.5, gap in 0.0f64..0.5) {
        let spec = GridSpec::sensor_centered(1, 2, 1.0);
        let t_occ = t_free + gap;
        let probs = Grid2 { height: 1, width: 2, data: vec![p, (p + dp).min(1.0)] };
        let l = classify_grid(&spec, &probs, t_occ, t_free);
        let rank = |c: Category| match c { Category::Free => 0, Category::Unobserved => 1, _ => 2 };
        prop_assert!(rank(l.cells.data[0]) <= rank(l.cells.data[1]));
    }

    #[test]
    fn iou_is_symmetric((a, b) in label_pair(6, 7)) {
        let b_live = LabelGrid::from_cells(b.spec, b.cells.data.iter().map(|&c| if c == Category::Ignore { Category::Free } else { c }).collect()).unwrap();
        prop_assert_eq!(iou_per_class(&confusion(&a, &b_live).unwrap()), iou_per_class(&confusion(&b_live, &a).unwrap()));
    }

    #[test]
    fn lovasz_is_bounded_and_ignores_pixel_order(
        gt in proptest::collection::vec(category(false), 24),
        probs in proptest::collection::vec(simplex(), 24),
        rot in 0usize..24,
    ) {
        prop_assume!(gt.iter().any(|&c| c != Category::Ignore));
        let spec = GridSpec::sensor_centered(4, 6, 1.0);
        let out = lovasz_softmax(&ProbMap::new(spec, probs.clone()).unwrap(), &LabelGrid::from_cells(spec, gt.clone()).unwrap()).unwrap();
        for l in out.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(l));
        }
        let (mut g2, mut p2) = (gt.clone(), probs.clone());
        g2.rotate_left(rot);
        p2.rotate_left(rot);
        let shuffled = lovasz_softmax(&ProbMap::new(spec, p2).unwrap(), &LabelGrid::from_cells(spec, g2).unwrap()).unwrap();
        prop_assert!((shuffled.loss - out.loss).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_linear_in_the_weights(
        gt in proptest::collection::vec(category(false), 12),
        probs in proptest::collection::vec(simplex(), 12),
        w in (0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0),
    ) {
        prop_assume!(gt.iter().any(|&c| c != Category::Ignore));
        let spec = GridSpec::sensor_centered(3, 4, 1.0);
        let pm = ProbMap::new(spec, probs).unwrap();
        let g = LabelGrid::from_cells(spec, gt).unwrap();
        let w1 = [w.0, w.1, w.2];
        let a = weighted_cross_entropy(&pm, &g, &w1).unwrap();
        let b = weighted_cross_entropy(&pm, &g, &w1.map(|x| 2.0 * x)).unwrap();
        prop_assert_eq!(b.loss, 2.0 * a.loss);
        for (ga, gb) in a.grad.iter().zip(&b.grad) {
            for k in 0..3 { prop_assert_eq!(gb[k], 2.0 * ga[k]); }
        }
    }
}
