//! `occgrid`: command-line driver for simulation, labelling, the classic and
//! ray-trace baselines, network training and inference, and evaluation.
//!
//! Exit status: 0 success, 1 other I/O failure, 2 usage, 3 missing input,
//! 4 malformed or corrupt file, 5 invalid configuration, 6 numerical failure.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occgrid::autolabel::{LabelConfig, SceneLabeler};
use occgrid::classic::{default_candidates, tune_thresholds, IsmConfig, IsmKind, Thresholds, TuneResult};
use occgrid::io;
use occgrid::metrics::{confusion, ConfusionCounts, MetricsReport};
use occgrid::net::{infer_batch, train, LossKind, TrainConfig, TrainLog};
use occgrid::pipeline::{build_dataset, classic_dataset, classic_labels, radar_input, raytrace, scene_windows, split_counts, WindowRef};
use occgrid::scene::SceneBundle;
use occgrid::sim::{gen_scenes, SceneParams};
use occgrid::{Error, Exec, GridSpec, LabelGrid};
use serde::Serialize;

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 7;
const SCENE_EXT: &str = "ogsb";

#[derive(Parser)]
#[command(name = "occgrid", version, about = "Occupancy grid mapping from sparse clustered radar")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scene bundles.
    Simulate(SimulateArgs),
    /// Auto-label every aggregation window of a scene from its lidar.
    Label(LabelArgs),
    /// Classic inverse-sensor-model grids.
    Classic(ClassicArgs),
    /// Ray-trace baseline grids on aggregated radar.
    Raytrace(RaytraceArgs),
    /// Train the segmentation network on a directory of scenes.
    Train(TrainArgs),
    /// Predict grids for a scene with a trained model.
    Infer(InferArgs),
    /// Score a directory of predicted grids against ground truth.
    Eval(EvalArgs),
    /// Tune classic thresholds on validation scenes.
    Tune(TuneArgs),
    /// Render a grid file as PNG or PGM.
    Render(RenderArgs),
}

#[derive(Args, Clone)]
struct WindowArgs {
    /// Radar frames aggregated per window.
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Keep at most this many evenly spaced windows per radar.
    #[arg(long)]
    max_windows: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Time steps per scene.
    #[arg(long)]
    steps: Option<usize>,
    /// Grid as HEIGHTxWIDTH@CELL, e.g. 128x48@0.4.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<GridSpec>,
    /// Also write a JSON dump next to every bundle.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    scene: PathBuf,
    /// JSON label configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    win: WindowArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum IsmArg {
    Delta,
    Gaussian,
}

impl From<IsmArg> for IsmKind {
    fn from(a: IsmArg) -> Self {
        match a {
            IsmArg::Delta => IsmKind::Delta,
            IsmArg::Gaussian => IsmKind::Gaussian,
        }
    }
}

#[derive(Args)]
struct ClassicArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum)]
    ism: IsmArg,
    /// Thresholds file written by `tune`; overrides --t-occ / --t-free.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    t_occ: Option<f64>,
    #[arg(long)]
    t_free: Option<f64>,
    #[command(flatten)]
    win: WindowArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RaytraceArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    win: WindowArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Lovasz,
    Wce,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scene bundles, split by scene.
    #[arg(long)]
    data: PathBuf,
    /// Train/val/test split in percent.
    #[arg(long, default_value = "80/5/15", value_parser = parse_split)]
    split: [f64; 3],
    #[arg(long, value_enum, default_value = "lovasz")]
    loss: LossArg,
    /// Class weights (free,occupied,unobserved) for the cross-entropy loss.
    #[arg(long, value_parser = parse_weights, default_value = "1,1,1")]
    wce_weights: [f64; 3],
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Encoder widths, e.g. 16,32,64.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    win: WindowArgs,
    /// Model file; the training log goes next to it as JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    win: WindowArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long, value_enum)]
    ism: IsmArg,
    /// Directory of validation scene bundles.
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    win: WindowArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Output image; the extension selects PNG or PGM.
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let err = || format!("expected HEIGHTxWIDTH@CELL, got {s:?}");
    let (dims, cell) = s.split_once('@').ok_or_else(err)?;
    let (h, w) = dims.split_once('x').ok_or_else(err)?;
    let spec = GridSpec::sensor_centered(
        h.parse().map_err(|_| err())?,
        w.parse().map_err(|_| err())?,
        cell.parse().map_err(|_| err())?,
    );
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn parse_split(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split('/').map(str::parse).collect::<Result<_, _>>().map_err(|_| format!("expected A/B/C, got {s:?}"))?;
    parts.try_into().map_err(|_| format!("expected three split parts, got {s:?}"))
}

fn parse_weights(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(str::parse).collect::<Result<_, _>>().map_err(|_| format!("expected a,b,c, got {s:?}"))?;
    let w: [f64; 3] = parts.try_into().map_err(|_| format!("expected three weights, got {s:?}"))?;
    if w.iter().all(|x| *x > 0.0 && x.is_finite()) {
        Ok(w)
    } else {
        Err(format!("weights must be positive, got {s:?}"))
    }
}

fn exit_status(e: &Error) -> u8 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Io(_) => 1,
        Error::Format(_) => 4,
        Error::NonFinite(_) | Error::UndefinedLoss => 6,
        _ => 5,
    }
}

fn missing(what: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, what.to_string()))
}

fn read_input(path: &Path) -> occgrid::Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => missing(format!("{}: no such file", path.display())),
        _ => e.into(),
    })
}

fn read_scene(path: &Path) -> occgrid::Result<SceneBundle> {
    io::decode_scene(&read_input(path)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> occgrid::Result<T> {
    serde_json::from_slice(&read_input(path)?).map_err(|e| occgrid::FormatError::Malformed(format!("{}: {e}", path.display())).into())
}

fn label_config(path: Option<&Path>) -> occgrid::Result<LabelConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => LabelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Sorted files with extension `ext` directly inside `dir`.
fn list_files(dir: &Path, ext: &str) -> occgrid::Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => missing(format!("{}: no such directory", dir.display())),
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry?.path();
        if p.is_file() && p.extension() == Some(OsStr::new(ext)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn read_scene_dir(dir: &Path) -> occgrid::Result<Vec<(String, SceneBundle)>> {
    let files = list_files(dir, SCENE_EXT)?;
    if files.is_empty() {
        return Err(missing(format!("{}: no .{SCENE_EXT} scene bundles", dir.display())));
    }
    files.iter().map(|p| Ok((stem(p), read_scene(p)?))).collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn grid_name(scene: &str, w: &WindowRef) -> String {
    format!("{scene}_r{}_t{:03}.pgm", w.radar, w.end)
}

fn write_grids(out: &Path, scene: &str, wins: &[WindowRef], grids: &[LabelGrid]) -> occgrid::Result<()> {
    fs::create_dir_all(out)?;
    for (w, g) in wins.iter().zip(grids) {
        io::write_grid(&out.join(grid_name(scene, w)), g)?;
    }
    log::info!("wrote {} grids to {}", grids.len(), out.display());
    Ok(())
}

fn windows_for(scene: &SceneBundle, win: &WindowArgs) -> occgrid::Result<Vec<WindowRef>> {
    if win.frames == 0 {
        return Err(Error::Config("--frames must be at least 1".into()));
    }
    let wins = scene_windows(scene, win.frames, win.max_windows);
    if wins.is_empty() {
        return Err(Error::Config(format!("scene has {} steps, fewer than --frames {}", scene.steps.len(), win.frames)));
    }
    Ok(wins)
}

fn simulate(a: &SimulateArgs, exec: Exec) -> occgrid::Result<()> {
    let mut params = SceneParams::default();
    if let Some(steps) = a.steps {
        params.steps = steps;
    }
    if let Some(grid) = a.grid {
        params.grid = grid;
    }
    let scenes = gen_scenes(a.seed, a.scenes, &params, exec)?;
    fs::create_dir_all(&a.out)?;
    for (i, s) in scenes.iter().enumerate() {
        let path = a.out.join(format!("scene_{i:03}.{SCENE_EXT}"));
        io::write_scene(&path, s)?;
        if a.text {
            io::write_scene_text(&path.with_extension("json"), s)?;
        }
    }
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn label(a: &LabelArgs, exec: Exec) -> occgrid::Result<()> {
    let scene = read_scene(&a.scene)?;
    let cfg = label_config(a.config.as_deref())?;
    let wins = windows_for(&scene, &a.win)?;
    let labeler = SceneLabeler::new(&scene, cfg)?;
    let grids = exec.map(&wins, |w| labeler.label(w.radar, w.end));
    write_grids(&a.out, &stem(&a.scene), &wins, &grids)
}

fn classic(a: &ClassicArgs, exec: Exec) -> occgrid::Result<()> {
    let scene = read_scene(&a.scene)?;
    let mut cfg = IsmConfig::with_kind(a.ism.into());
    if let Some(p) = &a.thresholds {
        let tuned: TuneResult = read_json(p)?;
        cfg.t_occ = tuned.thresholds.t_occ;
        cfg.t_free = tuned.thresholds.t_free;
    } else {
        cfg.t_occ = a.t_occ.unwrap_or(cfg.t_occ);
        cfg.t_free = a.t_free.unwrap_or(cfg.t_free);
    }
    cfg.validate()?;
    let t = Thresholds {
        t_occ: cfg.t_occ,
        t_free: cfg.t_free,
    };
    let wins = windows_for(&scene, &a.win)?;
    let grids = exec.try_map(&wins, |w| classic_labels(&scene, w, &cfg, &t))?;
    write_grids(&a.out, &stem(&a.scene), &wins, &grids)
}

fn raytrace_cmd(a: &RaytraceArgs, exec: Exec) -> occgrid::Result<()> {
    let scene = read_scene(&a.scene)?;
    let cfg = label_config(a.config.as_deref())?;
    let wins = windows_for(&scene, &a.win)?;
    let grids = exec.try_map(&wins, |w| raytrace(&scene, w, &cfg.fov))?;
    write_grids(&a.out, &stem(&a.scene), &wins, &grids)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train_scenes: Vec<&'a str>,
    val_scenes: Vec<&'a str>,
    test_scenes: Vec<&'a str>,
    train_examples: usize,
    val_examples: usize,
    config: &'a TrainConfig,
    log: &'a TrainLog,
}

fn scene_names(part: &[(String, SceneBundle)]) -> Vec<&str> {
    part.iter().map(|(n, _)| n.as_str()).collect()
}

fn train_cmd(a: &TrainArgs, exec: Exec) -> occgrid::Result<()> {
    let scenes = read_scene_dir(&a.data)?;
    let label_cfg = label_config(a.config.as_deref())?;
    let [n_train, n_val, _] = split_counts(scenes.len(), a.split)?;
    let (train_part, rest) = scenes.split_at(n_train);
    let (val_part, test_part) = rest.split_at(n_val);
    let bundles = |part: &[(String, SceneBundle)]| part.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>();

    let train_set = build_dataset(&bundles(train_part), a.win.frames, a.win.max_windows, &label_cfg, exec)?;
    let val_set = build_dataset(&bundles(val_part), a.win.frames, a.win.max_windows, &label_cfg, exec)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        frames: a.win.frames,
        widths: a.widths.clone().unwrap_or(defaults.widths.clone()),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr0: a.lr.unwrap_or(defaults.lr0),
        ..defaults
    };
    let loss = match a.loss {
        LossArg::Lovasz => LossKind::Lovasz,
        LossArg::Wce => LossKind::WeightedCe(a.wce_weights),
    };
    log::info!("training on {} examples, validating on {}", train_set.len(), val_set.len());
    let (model, log) = train(&train_set, &val_set, &cfg, loss)?;
    io::write_model(&a.out, &model)?;
    let summary = TrainSummary {
        train_scenes: scene_names(train_part),
        val_scenes: scene_names(val_part),
        test_scenes: scene_names(test_part),
        train_examples: train_set.len(),
        val_examples: val_set.len(),
        config: &cfg,
        log: &log,
    };
    io::write_json(&a.out.with_extension("json"), &summary)
}

fn infer(a: &InferArgs, exec: Exec) -> occgrid::Result<()> {
    let model = io::decode_model(&read_input(&a.model)?)?;
    let scene = read_scene(&a.scene)?;
    let wins = windows_for(&scene, &a.win)?;
    let inputs = exec.try_map(&wins, |w| radar_input(&scene, w))?;
    let grids = infer_batch(&model, &scene.grid, &inputs, exec)?;
    write_grids(&a.out, &stem(&a.scene), &wins, &grids)
}

fn read_grid_file(path: &Path) -> occgrid::Result<LabelGrid> {
    io::decode_grid(&read_input(path)?, &read_input(&io::sidecar_path(path))?)
}

fn eval(a: &EvalArgs, exec: Exec) -> occgrid::Result<()> {
    let preds = list_files(&a.pred, "pgm")?;
    if preds.is_empty() {
        return Err(missing(format!("{}: no .pgm grids", a.pred.display())));
    }
    let counts = exec.try_map(&preds, |p| {
        let gt_path = a.gt.join(p.file_name().expect("listed file has a name"));
        confusion(&read_grid_file(p)?, &read_grid_file(&gt_path)?)
    })?;
    let report = MetricsReport::from_counts(counts.into_iter().sum::<ConfusionCounts>(), preds.len());
    log::info!("mIoU {:.4} over {} grids", report.miou, report.n_grids);
    io::write_report(&a.out, &report)
}

fn tune(a: &TuneArgs, exec: Exec) -> occgrid::Result<()> {
    let scenes: Vec<SceneBundle> = read_scene_dir(&a.val)?.into_iter().map(|(_, s)| s).collect();
    let label_cfg = label_config(a.config.as_deref())?;
    let ism = IsmConfig::with_kind(a.ism.into());
    let (probs, gts) = classic_dataset(&scenes, a.win.frames, a.win.max_windows, &ism, &label_cfg, exec)?;
    let tuned = tune_thresholds(&scenes[0].grid, &probs, &gts, &default_candidates())?;
    log::info!("best thresholds {:?} with mIoU {:.4}", tuned.thresholds, tuned.miou);
    io::write_json(&a.out, &tuned)
}

fn render(a: &RenderArgs) -> occgrid::Result<()> {
    let grid = read_grid_file(&a.grid)?;
    let ext = a.out.extension().and_then(OsStr::to_str).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pgm") => io::encode_pgm(&grid),
        Some("png") => {
            let pixels = io::grid_image(&grid.cells.map(|&c| io::category_byte(c)));
            let mut buf = Vec::new();
            let mut enc = png::Encoder::new(&mut buf, grid.spec.width as u32, grid.spec.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
            w.write_image_data(&pixels).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            w.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
            buf
        }
        _ => return Err(Error::Config(format!("{}: output must end in .png or .pgm", a.out.display()))),
    };
    io::atomic_write(&a.out, &bytes)
}

fn run(cli: &Cli) -> occgrid::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.cmd {
        Cmd::Simulate(a) => simulate(a, exec),
        Cmd::Label(a) => label(a, exec),
        Cmd::Classic(a) => classic(a, exec),
        Cmd::Raytrace(a) => raytrace_cmd(a, exec),
        Cmd::Train(a) => train_cmd(a, exec),
        Cmd::Infer(a) => infer(a, exec),
        Cmd::Eval(a) => eval(a, exec),
        Cmd::Tune(a) => tune(a, exec),
        Cmd::Render(a) => render(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OCCGRID_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("occgrid: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}
