//! On-disk formats: scene bundles, label grids, model weights and metrics
//! reports. Binary formats are little-endian and end in a CRC-32 of every
//! preceding byte; every write goes to a temporary file that is then renamed
//! over the destination.

use std::fs;
use std::path::{Path, PathBuf};

use crate::aggregate::{RadarFrame, RadarPoint, SensorKind, SensorMount};
use crate::error::{Error, FormatError, Result};
use crate::grid::{Category, Grid2, GridSpec, LabelGrid, Point2, Pose2};
use crate::metrics::MetricsReport;
use crate::net::{ConvParams, Layer, OccNet};
use crate::scene::{LidarSweep, Point3, SceneBundle, TimeStep};

pub const SCENE_MAGIC: &[u8; 4] = b"OGSB";
pub const SCENE_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"OGNM";
pub const MODEL_VERSION: u32 = 1;

/// Writes `bytes` next to `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("collection larger than u32::MAX"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn pose(&mut self, p: &Pose2) {
        self.f64(p.x);
        self.f64(p.y);
        self.f64(p.yaw);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            }
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Malformed("string is not UTF-8".into()).into())
    }
    fn pose(&mut self) -> Result<Pose2> {
        Ok(Pose2 {
            x: self.f64()?,
            y: self.f64()?,
            yaw: self.f64()?,
        })
    }
    fn finished(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FormatError::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)).into())
        }
    }
}

/// `magic | version | body length (u64) | body | crc32`.
fn frame(magic: &[u8; 4], version: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 20);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Validates the envelope written by [`frame`] and returns the body.
fn unframe<'a>(magic: &'static [u8; 4], version: u32, bytes: &'a [u8]) -> Result<&'a [u8]> {
    let mut r = Reader::new(bytes);
    let found = r.array::<4>().map_err(|_| FormatError::BadMagic {
        expected: std::str::from_utf8(magic).expect("ASCII magic"),
    })?;
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: std::str::from_utf8(magic).expect("ASCII magic"),
        }
        .into());
    }
    let v = r.u32()?;
    if v != version {
        return Err(FormatError::Version { found: v, expected: version }.into());
    }
    let body_len = usize::try_from(r.u64()?).map_err(|_| FormatError::Malformed("body length overflows".into()))?;
    let header = r.pos;
    let needed = header.checked_add(body_len).and_then(|n| n.checked_add(4));
    match needed {
        Some(n) if n <= bytes.len() => {
            if n < bytes.len() {
                return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - n)).into());
            }
        }
        _ => {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                needed: needed.map_or(usize::MAX, |n| n - bytes.len()),
            }
            .into())
        }
    }
    let end = header + body_len;
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    Ok(&bytes[header..end])
}

fn put_spec(w: &mut Writer, g: &GridSpec) {
    w.u64(g.height as u64);
    w.u64(g.width as u64);
    w.f64(g.cell_x);
    w.f64(g.cell_y);
    w.f64(g.origin.x);
    w.f64(g.origin.y);
}

fn get_spec(r: &mut Reader) -> Result<GridSpec> {
    let spec = GridSpec {
        height: r.u64()? as usize,
        width: r.u64()? as usize,
        cell_x: r.f64()?,
        cell_y: r.f64()?,
        origin: Point2::new(r.f64()?, r.f64()?),
    };
    spec.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(spec)
}

pub fn encode_scene(scene: &SceneBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(scene.seed);
    put_spec(&mut w, &scene.grid);
    w.len(scene.mounts.len());
    for m in &scene.mounts {
        w.str(&m.sensor_id);
        w.u8(match m.kind {
            SensorKind::Radar => 0,
            SensorKind::Lidar => 1,
        });
        w.pose(&m.mount_pose);
    }
    w.len(scene.steps.len());
    for step in &scene.steps {
        let mut rec = Writer::default();
        rec.f64(step.timestamp);
        rec.pose(&step.ego);
        rec.len(step.radar.len());
        for f in &step.radar {
            rec.f64(f.timestamp);
            rec.str(&f.sensor_id);
            rec.len(f.points.len());
            for p in &f.points {
                rec.f64(p.x);
                rec.f64(p.y);
                rec.f64(p.vx);
                rec.f64(p.vy);
            }
        }
        rec.len(step.lidar.len());
        for s in &step.lidar {
            rec.f64(s.timestamp);
            rec.str(&s.sensor_id);
            rec.len(s.points.len());
            for p in &s.points {
                rec.f64(p.x);
                rec.f64(p.y);
                rec.f64(p.z);
            }
        }
        w.u64(rec.buf.len() as u64);
        w.buf.extend_from_slice(&rec.buf);
    }
    frame(SCENE_MAGIC, SCENE_VERSION, &w.buf)
}

fn decode_step(r: &mut Reader) -> Result<TimeStep> {
    let timestamp = r.f64()?;
    let ego = r.pose()?;
    let n_radar = r.len()?;
    let mut radar = Vec::with_capacity(n_radar.min(64));
    for _ in 0..n_radar {
        let ts = r.f64()?;
        let id = r.str()?;
        let n = r.len()?;
        let mut points = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            points.push(RadarPoint {
                x: r.f64()?,
                y: r.f64()?,
                vx: r.f64()?,
                vy: r.f64()?,
            });
        }
        radar.push(RadarFrame {
            timestamp: ts,
            sensor_id: id,
            points,
        });
    }
    let n_lidar = r.len()?;
    let mut lidar = Vec::with_capacity(n_lidar.min(64));
    for _ in 0..n_lidar {
        let ts = r.f64()?;
        let id = r.str()?;
        let n = r.len()?;
        let mut points = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            points.push(Point3::new(r.f64()?, r.f64()?, r.f64()?));
        }
        lidar.push(LidarSweep {
            timestamp: ts,
            sensor_id: id,
            points,
        });
    }
    Ok(TimeStep {
        timestamp,
        ego,
        radar,
        lidar,
    })
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneBundle> {
    let body = unframe(SCENE_MAGIC, SCENE_VERSION, bytes)?;
    let mut r = Reader::new(body);
    let seed = r.u64()?;
    let grid = get_spec(&mut r)?;
    let n_mounts = r.len()?;
    let mut mounts = Vec::with_capacity(n_mounts.min(64));
    for _ in 0..n_mounts {
        let sensor_id = r.str()?;
        let kind = match r.u8()? {
            0 => SensorKind::Radar,
            1 => SensorKind::Lidar,
            k => return Err(FormatError::Malformed(format!("unknown sensor kind {k}")).into()),
        };
        mounts.push(SensorMount {
            sensor_id,
            mount_pose: r.pose()?,
            kind,
        });
    }
    let n_steps = r.len()?;
    let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
    for _ in 0..n_steps {
        let len = r.u64()? as usize;
        let mut rec = Reader::new(r.take(len)?);
        steps.push(decode_step(&mut rec)?);
        rec.finished()?;
    }
    r.finished()?;
    Ok(SceneBundle {
        seed,
        grid,
        mounts,
        steps,
    })
}

pub fn write_scene(path: &Path, scene: &SceneBundle) -> Result<()> {
    atomic_write(path, &encode_scene(scene))
}

pub fn read_scene(path: &Path) -> Result<SceneBundle> {
    decode_scene(&fs::read(path)?)
}

/// Human-readable JSON dump of a scene, for debugging.
pub fn write_scene_text(path: &Path, scene: &SceneBundle) -> Result<()> {
    let text = serde_json::to_string_pretty(scene).map_err(|e| FormatError::Malformed(e.to_string()))?;
    atomic_write(path, text.as_bytes())
}

/// Byte used for each category in grid images.
pub fn category_byte(c: Category) -> u8 {
    match c {
        Category::Free => 0,
        Category::Occupied => 255,
        Category::Unobserved => 192,
        Category::Ignore => 96,
    }
}

pub fn byte_category(b: u8) -> Option<Category> {
    match b {
        0 => Some(Category::Free),
        255 => Some(Category::Occupied),
        192 => Some(Category::Unobserved),
        96 => Some(Category::Ignore),
        _ => None,
    }
}

/// Row-major image of `grid`: forward (increasing u) points up and the
/// vehicle's left (increasing v) points left.
pub fn grid_image(grid: &Grid2<u8>) -> Vec<u8> {
    let (h, w) = (grid.height, grid.width);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            out.push(*grid.get(h - 1 - row, w - 1 - col));
        }
    }
    out
}

fn image_grid(pixels: &[u8], h: usize, w: usize) -> Grid2<u8> {
    let mut g = Grid2::filled(h, w, 0u8);
    for row in 0..h {
        for col in 0..w {
            g.data[(h - 1 - row) * w + (w - 1 - col)] = pixels[row * w + col];
        }
    }
    g
}

pub fn encode_pgm(grid: &LabelGrid) -> Vec<u8> {
    let bytes = grid.cells.map(|&c| category_byte(c));
    let mut out = format!("P5\n{} {}\n255\n", grid.spec.width, grid.spec.height).into_bytes();
    out.extend(grid_image(&bytes));
    out
}

/// Parses a binary PGM with maxval 255 (header comments allowed).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if !bytes.starts_with(b"P5") {
        return Err(FormatError::BadMagic { expected: "P5" }.into());
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(if pos >= bytes.len() {
                FormatError::Truncated { offset: pos, needed: 1 }.into()
            } else {
                FormatError::Malformed("bad PGM header".into()).into()
            });
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .expect("ASCII digits")
            .parse()
            .map_err(|_| FormatError::Malformed("PGM header number out of range".into()))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(FormatError::Malformed(format!("PGM maxval {} (expected 255)", fields[2])).into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let n = w.checked_mul(h).ok_or_else(|| FormatError::Malformed("PGM size overflows".into()))?;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < n {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: n - raster.len(),
        }
        .into());
    }
    if raster.len() > n {
        return Err(FormatError::Malformed(format!("{} trailing bytes after raster", raster.len() - n)).into());
    }
    Ok((w, h, raster.to_vec()))
}

/// Sidecar path holding the grid spec of a grid image.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_grid(path: &Path, grid: &LabelGrid) -> Result<()> {
    let spec = serde_json::to_string_pretty(&grid.spec).map_err(|e| FormatError::Malformed(e.to_string()))?;
    atomic_write(&sidecar_path(path), spec.as_bytes())?;
    atomic_write(path, &encode_pgm(grid))
}

pub fn decode_grid(pgm: &[u8], spec_json: &[u8]) -> Result<LabelGrid> {
    let spec: GridSpec = serde_json::from_slice(spec_json).map_err(|e| FormatError::Malformed(format!("grid sidecar: {e}")))?;
    spec.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    let (w, h, raster) = decode_pgm(pgm)?;
    if (h, w) != (spec.height, spec.width) {
        return Err(FormatError::Malformed(format!("image is {h}x{w} but the sidecar says {}x{}", spec.height, spec.width)).into());
    }
    let bytes = image_grid(&raster, h, w);
    let cells = bytes
        .data
        .iter()
        .map(|&b| byte_category(b).ok_or_else(|| FormatError::Malformed(format!("byte {b} is not a category"))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    LabelGrid::from_cells(spec, cells)
}

pub fn read_grid(path: &Path) -> Result<LabelGrid> {
    decode_grid(&fs::read(path)?, &fs::read(sidecar_path(path))?)
}

const LAYER_CONV: u8 = 0;
const LAYER_RELU: u8 = 1;
const LAYER_DOWN: u8 = 2;
const LAYER_UP: u8 = 3;

pub fn encode_model(model: &OccNet<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(model.seed);
    w.len(model.widths.len());
    for &c in &model.widths {
        w.len(c);
    }
    w.len(model.layers.len());
    for l in &model.layers {
        match l {
            Layer::Conv(p) => {
                w.u8(LAYER_CONV);
                w.len(p.in_ch);
                w.len(p.out_ch);
            }
            Layer::Relu => w.u8(LAYER_RELU),
            Layer::Down => w.u8(LAYER_DOWN),
            Layer::Up => w.u8(LAYER_UP),
        }
    }
    for p in model.convs() {
        p.weight.iter().chain(&p.bias).for_each(|&v| w.f32(v));
    }
    frame(MODEL_MAGIC, MODEL_VERSION, &w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<OccNet<f32>> {
    let body = unframe(MODEL_MAGIC, MODEL_VERSION, bytes)?;
    let mut r = Reader::new(body);
    let seed = r.u64()?;
    let n_widths = r.len()?;
    let widths = (0..n_widths).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let n_layers = r.len()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        layers.push(match r.u8()? {
            LAYER_CONV => {
                let (i, o) = (r.len()?, r.len()?);
                if i.checked_mul(o).and_then(|n| n.checked_mul(9)).map_or(true, |n| n > body.len()) {
                    return Err(FormatError::Malformed(format!("implausible convolution {i}->{o}")).into());
                }
                Layer::Conv(ConvParams::zeros(i, o))
            }
            LAYER_RELU => Layer::Relu,
            LAYER_DOWN => Layer::Down,
            LAYER_UP => Layer::Up,
            k => return Err(FormatError::Malformed(format!("unknown layer kind {k}")).into()),
        });
    }
    let mut model = OccNet { layers, widths, seed };
    for p in model.convs_mut() {
        for v in p.weight.iter_mut().chain(p.bias.iter_mut()) {
            *v = r.f32()?;
        }
    }
    r.finished()?;
    model.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(model)
}

pub fn write_model(path: &Path, model: &OccNet<f32>) -> Result<()> {
    atomic_write(path, &encode_model(model))
}

pub fn read_model(path: &Path) -> Result<OccNet<f32>> {
    decode_model(&fs::read(path)?)
}

pub fn encode_report(report: &MetricsReport) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(report).expect("metrics serialize");
    s.push('\n');
    s.into_bytes()
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    atomic_write(path, &encode_report(report))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| FormatError::Malformed(format!("report: {e}")).into())
}

/// Any serializable value as pretty JSON, written atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| FormatError::Malformed(e.to_string()))?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}
