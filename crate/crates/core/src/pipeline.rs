//! End-to-end stages over scene bundles: radar inputs per aggregation window,
//! ground truth, the ray-trace baseline, the classic ISM route, and the
//! synthetic benchmark comparing them with the learned model.

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_frames, filter_dynamic, rasterize_bev, windows, AggregationConfig};
use crate::autolabel::{LabelConfig, SceneLabeler};
use crate::classic::{bayes_update, classify_grid, default_candidates, ism_update, tune_thresholds, IsmConfig, IsmKind, LogOddsGrid, Thresholds, TuneResult};
use crate::error::{Error, Result};
use crate::grid::{visibility_label, BinaryGrid, FieldOfView, Grid2, GridSpec, LabelGrid, Point2};
use crate::metrics::{confusion, ConfusionCounts, MetricsReport};
use crate::net::{infer_batch, train, Example, LossKind, OccNet, TrainConfig, TrainLog};
use crate::par::Exec;
use crate::scene::SceneBundle;
use crate::sim::{gen_scenes, mix_seed, SceneParams};

/// One aggregation window of one radar: frames `end + 1 - frames ..= end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub radar: usize,
    pub end: usize,
    pub frames: usize,
}

/// Last step of every complete non-overlapping window of `k` frames.
pub fn window_ends(steps: usize, k: usize) -> Vec<usize> {
    windows(steps, k).map(|r| r.end - 1).collect()
}

/// At most `cap` window ends, evenly spread over the available ones.
pub fn thin_windows(ends: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < ends.len() => (0..cap).map(|i| ends[i * ends.len() / cap]).collect(),
        _ => ends.to_vec(),
    }
}

/// Every window of every radar in `scene`, radar-major.
pub fn scene_windows(scene: &SceneBundle, frames: usize, cap: Option<usize>) -> Vec<WindowRef> {
    let ends = thin_windows(&window_ends(scene.steps.len(), frames), cap);
    (0..scene.radar_mounts().len())
        .flat_map(|radar| ends.iter().map(move |&end| WindowRef { radar, end, frames }))
        .collect()
}

fn window_frames(scene: &SceneBundle, w: &WindowRef) -> Result<std::ops::Range<usize>> {
    if w.frames == 0 || w.end >= scene.steps.len() || w.end + 1 < w.frames {
        return Err(Error::Config(format!("window {w:?} does not fit a scene of {} steps", scene.steps.len())));
    }
    Ok(w.end + 1 - w.frames..w.end + 1)
}

/// Static radar points of the window, in the sensor frame at its last step.
pub fn aggregated_points(scene: &SceneBundle, w: &WindowRef, velocity_threshold: f64) -> Result<Vec<Point2>> {
    let range = window_frames(scene, w)?;
    let mounts = scene.radar_mounts();
    let mount = mounts.get(w.radar).ok_or_else(|| Error::Config(format!("no radar {}", w.radar)))?;
    let frames: Vec<_> = scene.steps[range.clone()].iter().map(|s| s.radar[w.radar].clone()).collect();
    let poses: Vec<_> = scene.steps[range].iter().map(|s| s.ego).collect();
    let cfg = AggregationConfig {
        frames: w.frames,
        velocity_threshold,
    };
    aggregate_frames(&frames, &poses, mount, &cfg)
}

/// Binary BEV network input of a window.
pub fn radar_input(scene: &SceneBundle, w: &WindowRef) -> Result<BinaryGrid> {
    let pts = aggregated_points(scene, w, AggregationConfig::default().velocity_threshold)?;
    Ok(rasterize_bev(&pts, &scene.grid))
}

/// Ray-trace baseline: visibility labels of the rasterized aggregated radar,
/// treating every cell without a detection as free.
pub fn raytrace(scene: &SceneBundle, w: &WindowRef, fov: &FieldOfView) -> Result<LabelGrid> {
    let input = radar_input(scene, w)?;
    Ok(visibility_label(&scene.grid, Point2::new(0.0, 0.0), &input, fov))
}

/// Occupancy probabilities from Bayesian accumulation of one ISM increment
/// per frame of the window, all expressed in the grid of the last frame.
pub fn classic_probs(scene: &SceneBundle, w: &WindowRef, cfg: &IsmConfig) -> Result<Grid2<f64>> {
    cfg.validate()?;
    let range = window_frames(scene, w)?;
    let target = scene.radar_pose(w.radar, w.end);
    let mut acc = LogOddsGrid::new(scene.grid, cfg.l0);
    let v_thresh = AggregationConfig::default().velocity_threshold;
    for j in range {
        let warp = target.inverse().compose(&scene.radar_pose(w.radar, j));
        let frame = filter_dynamic(&scene.steps[j].radar[w.radar], v_thresh);
        let dets: Vec<Point2> = frame.points.iter().map(|p| warp.apply(p.position())).collect();
        let inc = ism_update(&scene.grid, warp.translation(), &dets, cfg);
        bayes_update(&mut acc, &inc)?;
    }
    Ok(acc.probabilities(cfg.l_max))
}

pub fn classic_labels(scene: &SceneBundle, w: &WindowRef, cfg: &IsmConfig, t: &Thresholds) -> Result<LabelGrid> {
    Ok(classify_grid(&scene.grid, &classic_probs(scene, w, cfg)?, t.t_occ, t.t_free))
}

/// Ground truth and radar input of every requested window.
pub fn build_examples(scene: &SceneBundle, wins: &[WindowRef], label_cfg: &LabelConfig) -> Result<Vec<Example>> {
    let labeler = SceneLabeler::new(scene, *label_cfg)?;
    wins.iter()
        .map(|w| {
            Ok(Example {
                input: radar_input(scene, w)?,
                label: labeler.label(w.radar, w.end),
            })
        })
        .collect()
}

/// Windows and examples of many scenes, scenes processed under `exec`.
pub fn build_dataset(scenes: &[SceneBundle], frames: usize, cap: Option<usize>, label_cfg: &LabelConfig, exec: Exec) -> Result<Vec<Example>> {
    let per_scene = exec.try_map(scenes, |s| build_examples(s, &scene_windows(s, frames, cap), label_cfg))?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn pooled(pairs: impl IntoIterator<Item = Result<ConfusionCounts>>, n: usize) -> Result<MetricsReport> {
    let mut total = ConfusionCounts::default();
    for c in pairs {
        total += c?;
    }
    Ok(MetricsReport::from_counts(total, n))
}

/// Scores the ray-trace baseline on `examples` (built from the same windows).
pub fn evaluate_raytrace(scenes: &[SceneBundle], frames: usize, cap: Option<usize>, label_cfg: &LabelConfig, exec: Exec) -> Result<MetricsReport> {
    let per_scene = exec.try_map(scenes, |s| {
        let labeler = SceneLabeler::new(s, *label_cfg)?;
        let wins = scene_windows(s, frames, cap);
        let n = wins.len();
        let counts = pooled(
            wins.iter().map(|w| confusion(&raytrace(s, w, &label_cfg.fov)?, &labeler.label(w.radar, w.end))),
            n,
        )?;
        Ok::<_, Error>(counts)
    })?;
    let n = per_scene.iter().map(|r| r.n_grids).sum();
    Ok(MetricsReport::from_counts(per_scene.into_iter().map(|r| r.counts).sum(), n))
}

/// Probabilities and labels of the classic route for every window of `scenes`.
pub fn classic_dataset(
    scenes: &[SceneBundle],
    frames: usize,
    cap: Option<usize>,
    ism: &IsmConfig,
    label_cfg: &LabelConfig,
    exec: Exec,
) -> Result<(Vec<Grid2<f64>>, Vec<LabelGrid>)> {
    let per_scene = exec.try_map(scenes, |s| {
        let labeler = SceneLabeler::new(s, *label_cfg)?;
        scene_windows(s, frames, cap)
            .iter()
            .map(|w| Ok((classic_probs(s, w, ism)?, labeler.label(w.radar, w.end))))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_scene.into_iter().flatten().unzip())
}

/// Tunes thresholds on validation scenes, then scores the test scenes.
pub fn tune_and_evaluate_classic(
    val: &[SceneBundle],
    test: &[SceneBundle],
    frames: usize,
    cap: Option<usize>,
    ism: &IsmConfig,
    label_cfg: &LabelConfig,
    exec: Exec,
) -> Result<(TuneResult, MetricsReport)> {
    let spec = val.first().ok_or_else(|| Error::Empty("validation scenes".into()))?.grid;
    let (vp, vg) = classic_dataset(val, frames, cap, ism, label_cfg, exec)?;
    let tuned = tune_thresholds(&spec, &vp, &vg, &default_candidates())?;
    let (tp, tg) = classic_dataset(test, frames, None, ism, label_cfg, exec)?;
    let t = tuned.thresholds;
    let n = tp.len();
    let report = pooled(tp.iter().zip(&tg).map(|(p, g)| confusion(&classify_grid(&spec, p, t.t_occ, t.t_free), g)), n)?;
    Ok((tuned, report))
}

pub fn evaluate_network(model: &OccNet<f32>, examples: &[Example], exec: Exec) -> Result<MetricsReport> {
    let spec = match examples.first() {
        Some(e) => e.label.spec,
        None => return Err(Error::Empty("test examples".into())),
    };
    let inputs: Vec<BinaryGrid> = examples.iter().map(|e| e.input.clone()).collect();
    let preds = infer_batch(model, &spec, &inputs, exec)?;
    pooled(preds.iter().zip(examples).map(|(p, e)| confusion(p, &e.label)), examples.len())
}

/// Scene-level split by fractions (e.g. 0.80 / 0.05 / 0.15); every split gets
/// at least one scene when there are enough.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || !(sum > 0.0) {
        return Err(Error::Config(format!("invalid split {fractions:?}")));
    }
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 scenes to split, got {n}")));
    }
    let mut val = ((fractions[1] / sum) * n as f64).round().max(1.0) as usize;
    let mut test = ((fractions[2] / sum) * n as f64).round().max(1.0) as usize;
    while val + test >= n {
        if test > val {
            test -= 1;
        } else {
            val -= 1;
        }
    }
    Ok([n - val - test, val, test])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneParams,
    pub label: LabelConfig,
    pub train: TrainConfig,
    /// Aggregation depths to evaluate.
    pub frames: Vec<usize>,
    /// Cap on windows per (scene, radar) for training and validation.
    pub max_windows: Option<usize>,
    /// Gradient steps budget, as example passes; epochs follow from the set size.
    pub example_passes: usize,
    /// Aggregation depths at which the classic ISMs are scored.
    pub classic_frames: Vec<usize>,
}

impl BenchmarkConfig {
    /// Seed 7, 10/2/3 scenes, 128x48 grid at 0.4 m, k in {1, 10, 20}.
    pub fn desk_scale() -> Self {
        let scene = SceneParams {
            grid: GridSpec::sensor_centered(128, 48, 0.4),
            steps: 100,
            ..SceneParams::default()
        };
        Self {
            seed: 7,
            train_scenes: 10,
            val_scenes: 2,
            test_scenes: 3,
            scene,
            label: LabelConfig::default(),
            train: TrainConfig {
                widths: vec![8, 16, 32, 64],
                ..TrainConfig::default()
            },
            frames: vec![1, 10, 20],
            max_windows: Some(10),
            example_passes: 6000,
            classic_frames: vec![20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub frames: usize,
    pub raytrace: MetricsReport,
    pub occnet: MetricsReport,
    pub train_examples: usize,
    pub test_examples: usize,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicResult {
    pub frames: usize,
    pub kind: IsmKind,
    pub tuned: TuneResult,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub depths: Vec<DepthResult>,
    pub classic: Vec<ClassicResult>,
}

impl BenchmarkReport {
    pub fn depth(&self, frames: usize) -> Option<&DepthResult> {
        self.depths.iter().find(|d| d.frames == frames)
    }

    /// Best test mIoU among the tuned classic ISMs at `frames`.
    pub fn best_classic(&self, frames: usize) -> Option<f64> {
        self.classic
            .iter()
            .filter(|c| c.frames == frames)
            .map(|c| c.test.miou)
            .max_by(f64::total_cmp)
    }
}

/// Generated train / val / test scenes of a benchmark.
pub fn benchmark_scenes(cfg: &BenchmarkConfig, exec: Exec) -> Result<[Vec<SceneBundle>; 3]> {
    let n = cfg.train_scenes + cfg.val_scenes + cfg.test_scenes;
    let mut all = gen_scenes(cfg.seed, n, &cfg.scene, exec)?;
    let test = all.split_off(cfg.train_scenes + cfg.val_scenes);
    let val = all.split_off(cfg.train_scenes);
    Ok([all, val, test])
}

/// Trains one model per aggregation depth and scores it together with the
/// ray-trace baseline and the tuned classic ISMs on the test scenes.
/// Independent trainings run concurrently under `exec`; each is sequential.
pub fn run_benchmark(cfg: &BenchmarkConfig, loss: LossKind, exec: Exec) -> Result<BenchmarkReport> {
    let [train_s, val_s, test_s] = benchmark_scenes(cfg, exec)?;
    let depths = exec.try_map(&cfg.frames, |&k| {
        let train_set = build_dataset(&train_s, k, cfg.max_windows, &cfg.label, exec)?;
        let val_set = build_dataset(&val_s, k, cfg.max_windows, &cfg.label, exec)?;
        let test_set = build_dataset(&test_s, k, None, &cfg.label, exec)?;
        let epochs = cfg.example_passes.div_ceil(train_set.len().max(1)).max(1);
        let tcfg = TrainConfig {
            epochs,
            frames: k,
            seed: mix_seed(cfg.seed, 1000 + k as u64),
            ..cfg.train.clone()
        };
        let (model, log) = train(&train_set, &val_set, &tcfg, loss)?;
        let occnet = evaluate_network(&model, &test_set, exec)?;
        let raytrace = evaluate_raytrace(&test_s, k, None, &cfg.label, exec)?;
        log::info!("k={k}: occnet {:.4} raytrace {:.4}", occnet.miou, raytrace.miou);
        Ok::<_, Error>(DepthResult {
            frames: k,
            raytrace,
            occnet,
            train_examples: train_set.len(),
            test_examples: test_set.len(),
            log,
        })
    })?;
    let mut classic = Vec::new();
    for &k in &cfg.classic_frames {
        for kind in [IsmKind::Delta, IsmKind::Gaussian] {
            let (tuned, test) = tune_and_evaluate_classic(&val_s, &test_s, k, cfg.max_windows, &IsmConfig::with_kind(kind), &cfg.label, exec)?;
            classic.push(ClassicResult { frames: k, kind, tuned, test });
        }
    }
    Ok(BenchmarkReport { depths, classic })
}
