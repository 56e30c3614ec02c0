//! Synthetic "shapes" detection data and the JSON-lines manifest.
//!
//! Each image holds one or more non-overlapping objects of a single class on a
//! low-saturation cluttered background. A class is a (shape, fill) pair, so
//! every class shares the same objectness cue (a saturated blob) while staying
//! visually distinct. Manifest boxes are the exact pixel extents of what was
//! drawn.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One image with its class label and (possibly withheld) boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Path as written in the manifest, relative to it.
    pub image: String,
    /// `image` resolved against the manifest directory.
    pub image_path: PathBuf,
    pub class_id: usize,
    pub boxes: Vec<BBox>,
    pub has_bbox_labels: bool,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.has_bbox_labels && !self.boxes.is_empty() {
            return Err(format!(
                "record {} has boxes but has_bbox_labels is false",
                self.image
            ));
        }
        for b in &self.boxes {
            b.validate().map_err(|e| format!("record {}: {e}", self.image))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image: String,
    class_id: usize,
    boxes: Vec<[f64; 4]>,
    has_bbox_labels: bool,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub max_objects: usize,
    /// Object scale `sqrt(w*h)` as a fraction of the image side.
    pub object_scale: (f64, f64),
    /// Aspect ratio range `w/h`, sampled log-uniformly.
    pub aspect_jitter: (f64, f64),
    /// Clutter strokes per background pixel.
    pub clutter_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            train_images: 2000,
            val_images: 400,
            image_size: 32,
            max_objects: 2,
            object_scale: (0.25, 0.55),
            aspect_jitter: (0.6, 1.6),
            clutter_density: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
    Cross,
}

const SHAPES: [Shape; 5] = [
    Shape::Rectangle,
    Shape::Ellipse,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    Solid,
    Striped,
    Checker,
}

const FILLS: [Fill; 3] = [Fill::Solid, Fill::Striped, Fill::Checker];

pub const MAX_CLASSES: usize = SHAPES.len() * FILLS.len();

fn class_style(class_id: usize) -> (Shape, Fill) {
    (SHAPES[class_id % SHAPES.len()], FILLS[class_id / SHAPES.len()])
}

/// Human-readable class name, e.g. `striped-triangle`.
pub fn class_name(class_id: usize) -> String {
    let (shape, fill) = class_style(class_id);
    format!("{fill:?}-{shape:?}").to_lowercase()
}

/// Saturated object colors; each pairs with the next one for patterned fills.
const PALETTE: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 70, 230],
    [230, 200, 30],
    [200, 40, 210],
    [30, 200, 210],
];

/// Minimum channel spread (max - min) of every object pixel. Background and
/// clutter pixels stay well below it.
pub const OBJECT_SATURATION: u8 = 120;
const BACKGROUND_MAX_SPREAD: i32 = 12;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return bad(format!(
                "num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            ));
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        if self.max_objects == 0 {
            return bad("max_objects must be >= 1".into());
        }
        if self.train_images == 0 {
            return bad("train_images must be >= 1".into());
        }
        let (smin, smax) = self.object_scale;
        if !(smin > 0.0 && smin <= smax && smax < 1.0) {
            return bad(format!("object_scale must lie in (0,1), got {smin}..{smax}"));
        }
        let (amin, amax) = self.aspect_jitter;
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return bad(format!("aspect_jitter must satisfy 0 < min <= max, got {amin}..{amax}"));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return bad("clutter_density must be >= 0".into());
        }
        // Largest side the sampler can request must fit with a one-pixel margin.
        let stretch = amax.max(1.0 / amin).sqrt();
        let side = (smax * stretch * self.image_size as f64).round() as usize;
        if side + 2 > self.image_size {
            return bad(format!(
                "objects up to {side} px do not fit in a {0}x{0} image",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// RGB8 raster.
struct Canvas {
    size: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.px[y * self.size + x] = c;
    }

    fn bytes(&self) -> Vec<u8> {
        self.px.iter().flatten().copied().collect()
    }
}

fn gray(v: i32) -> [u8; 3] {
    let v = v.clamp(0, 255) as u8;
    [v, v, v]
}

fn draw_background(canvas: &mut Canvas, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
    let s = canvas.size;
    let base = rng.random_range(70..180);
    let tint: [i32; 3] = std::array::from_fn(|_| rng.random_range(-BACKGROUND_MAX_SPREAD / 2..=BACKGROUND_MAX_SPREAD / 2));
    for y in 0..s {
        for x in 0..s {
            let v = base + rng.random_range(-10..=10);
            let c = std::array::from_fn(|i| (v + tint[i]).clamp(0, 255) as u8);
            canvas.set(x, y, c);
        }
    }
    let strokes = (cfg.clutter_density * (s * s) as f64).round() as usize;
    for _ in 0..strokes {
        let v = rng.random_range(20..235);
        let len = rng.random_range(2..=s / 3);
        let (x0, y0) = (rng.random_range(0..s), rng.random_range(0..s));
        let horizontal = rng.random_bool(0.5);
        for t in 0..len {
            let (x, y) = if horizontal { (x0 + t, y0) } else { (x0, y0 + t) };
            if x < s && y < s {
                canvas.set(x, y, gray(v));
            }
        }
    }
}

/// Whether pixel `(i, j)` of a `w x h` box belongs to the shape.
fn inside(shape: Shape, i: usize, j: usize, w: usize, h: usize) -> bool {
    let (wf, hf) = (w as f64, h as f64);
    let dx = (i as f64 + 0.5 - wf / 2.0) / (wf / 2.0);
    let dy = (j as f64 + 0.5 - hf / 2.0) / (hf / 2.0);
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        Shape::Triangle => {
            let half = (j as f64 + 1.0) / hf;
            dx.abs() <= half
        }
        Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
        Shape::Cross => dx.abs() <= 1.0 / 3.0 || dy.abs() <= 1.0 / 3.0,
    }
}

fn fill_color(fill: Fill, i: usize, j: usize, a: [u8; 3], b: [u8; 3]) -> [u8; 3] {
    let alt = match fill {
        Fill::Solid => false,
        Fill::Striped => (i / 2) % 2 == 1,
        Fill::Checker => ((i / 2) + (j / 2)) % 2 == 1,
    };
    if alt {
        b
    } else {
        a
    }
}

/// Pixel rectangle, inclusive on both ends.
#[derive(Debug, Clone, Copy)]
struct PixRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl PixRect {
    fn overlaps_with_gap(&self, o: &PixRect) -> bool {
        !(self.x1 + 1 < o.x0 || o.x1 + 1 < self.x0 || self.y1 + 1 < o.y0 || o.y1 + 1 < self.y0)
    }

    fn to_box(self, size: usize) -> BBox {
        let s = size as f64;
        BBox::new(
            self.x0 as f64 / s,
            self.y0 as f64 / s,
            (self.x1 + 1) as f64 / s,
            (self.y1 + 1) as f64 / s,
        )
        .expect("non-empty pixel rectangle")
    }
}

/// Renders one image; returns the raster and the drawn extents.
fn render(cfg: &SynthConfig, class_id: usize, rng: &mut ChaCha8Rng) -> (Canvas, Vec<PixRect>) {
    let s = cfg.image_size;
    let mut canvas = Canvas {
        size: s,
        px: vec![[0; 3]; s * s],
    };
    draw_background(&mut canvas, cfg, rng);
    let (shape, fill) = class_style(class_id);
    let wanted = rng.random_range(1..=cfg.max_objects);
    let mut placed: Vec<PixRect> = Vec::new();
    let (smin, smax) = cfg.object_scale;
    let (amin, amax) = cfg.aspect_jitter;
    for _ in 0..wanted {
        for _attempt in 0..50 {
            let scale = rng.random_range(smin..=smax) * s as f64;
            let aspect = (rng.random_range(amin.ln()..=amax.ln())).exp();
            let w = ((scale * aspect.sqrt()).round() as usize).clamp(4, s - 2);
            let h = ((scale / aspect.sqrt()).round() as usize).clamp(4, s - 2);
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            let frame = PixRect {
                x0,
                y0,
                x1: x0 + w - 1,
                y1: y0 + h - 1,
            };
            if placed.iter().any(|p| p.overlaps_with_gap(&frame)) {
                continue;
            }
            let ci = rng.random_range(0..PALETTE.len());
            let (a, b) = (PALETTE[ci], PALETTE[(ci + 2) % PALETTE.len()]);
            let mut ext: Option<PixRect> = None;
            for j in 0..h {
                for i in 0..w {
                    if !inside(shape, i, j, w, h) {
                        continue;
                    }
                    let (x, y) = (x0 + i, y0 + j);
                    canvas.set(x, y, fill_color(fill, i, j, a, b));
                    ext = Some(match ext {
                        None => PixRect { x0: x, y0: y, x1: x, y1: y },
                        Some(r) => PixRect {
                            x0: r.x0.min(x),
                            y0: r.y0.min(y),
                            x1: r.x1.max(x),
                            y1: r.y1.max(y),
                        },
                    });
                }
            }
            placed.push(ext.expect("shapes of at least 4x4 pixels are non-empty"));
            break;
        }
    }
    (canvas, placed)
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn write_png(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(rgb).map_err(to_io)?;
    w.finish().map_err(to_io)
}

/// Decodes an 8-bit PNG into RGB bytes and its side lengths.
pub fn read_png_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img_err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| img_err(e.to_string()))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => src.to_vec(),
        png::ColorType::Rgba => src.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => src.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => src.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(img_err("unexpanded palette image".into())),
    };
    Ok((rgb, w, h))
}

/// Loads a PNG as a `[3, H, W]` tensor with values in `[-0.5, 0.5]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (rgb, w, h) = read_png_rgb(path)?;
    let mut data = vec![0.0f32; 3 * w * h];
    for (p, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + p] = px[c] as f32 / 255.0 - 0.5;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Renders the dataset into `out_dir` and writes `out_dir/manifest.jsonl`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, Vec<SampleRecord>)> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let total = cfg.train_images + cfg.val_images;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let (split, local) = if index < cfg.train_images {
            (Split::Train, index)
        } else {
            (Split::Val, index - cfg.train_images)
        };
        let mut rng = image_rng(cfg.seed, index);
        let class_id = rng.random_range(0..cfg.num_classes);
        let (canvas, rects) = render(cfg, class_id, &mut rng);
        let image = format!("images/{}_{local:05}.png", split.name());
        let image_path = out_dir.join(&image);
        write_png(&image_path, cfg.image_size, &canvas.bytes())?;
        records.push(SampleRecord {
            image,
            image_path,
            class_id,
            boxes: rects.iter().map(|r| r.to_box(cfg.image_size)).collect(),
            has_bbox_labels: true,
            split,
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok((manifest, records))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = ManifestLine {
            image: r.image.clone(),
            class_id: r.class_id,
            boxes: r.boxes.iter().map(BBox::to_array).collect(),
            has_bbox_labels: r.has_bbox_labels,
            split: r.split,
        };
        let json = serde_json::to_string(&line).expect("manifest lines serialize");
        writeln!(w, "{json}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            line: line_no,
            reason,
        };
        let raw: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let boxes = raw
            .boxes
            .iter()
            .map(|&b| BBox::try_from(b).map_err(|e| bad(format!("record {}: {e}", raw.image))))
            .collect::<Result<Vec<_>>>()?;
        let record = SampleRecord {
            image_path: base.join(&raw.image),
            image: raw.image,
            class_id: raw.class_id,
            boxes,
            has_bbox_labels: raw.has_bbox_labels,
            split: raw.split,
        };
        record.validate().map_err(bad)?;
        records.push(record);
    }
    Ok(records)
}

/// Clears boxes (keeping class labels) for every record of a held-out class.
pub fn withhold_boxes(
    mut records: Vec<SampleRecord>,
    held_out: &BTreeSet<usize>,
) -> Result<Vec<SampleRecord>> {
    let observed: BTreeSet<usize> = records.iter().map(|r| r.class_id).collect();
    if let Some(c) = held_out.iter().find(|c| !observed.contains(c)) {
        return Err(Error::Data(format!("held-out class {c} does not occur in the data")));
    }
    for r in records.iter_mut().filter(|r| held_out.contains(&r.class_id)) {
        r.boxes.clear();
        r.has_bbox_labels = false;
    }
    Ok(records)
}

/// Records per class, and boxes per class, for one split (or all when `None`).
pub fn class_tallies(records: &[SampleRecord], split: Option<Split>) -> BTreeMap<usize, (usize, usize)> {
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        let e = out.entry(r.class_id).or_insert((0, 0));
        e.0 += 1;
        e.1 += r.boxes.len();
    }
    out
}

/// Read access to labeled images, as used by training and evaluation.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn split(&self, i: usize) -> Split;
    fn class_id(&self, i: usize) -> usize;
    fn has_bbox_labels(&self, i: usize) -> bool;
    /// Only meaningful when `has_bbox_labels(i)` is true.
    fn boxes(&self, i: usize) -> &[BBox];
    fn image(&self, i: usize) -> &Tensor<f32>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split(i) == split).collect()
    }
}

/// Records with their decoded images held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    images: Arc<Vec<Tensor<f32>>>,
}

impl Dataset {
    pub fn load(records: Vec<SampleRecord>) -> Result<Self> {
        let images = records
            .iter()
            .map(|r| load_image(&r.image_path))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = images.first() {
            if let Some((r, t)) = records
                .iter()
                .zip(&images)
                .find(|(_, t)| t.dims() != first.dims())
            {
                return Err(Error::Image {
                    path: r.image_path.clone(),
                    reason: format!("shape {:?} differs from {:?}", t.dims(), first.dims()),
                });
            }
        }
        Ok(Dataset {
            records,
            images: Arc::new(images),
        })
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        Self::load(load_manifest(path)?)
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn image_dims(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.dims())
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    }

    /// Same images, boxes withheld for `held_out` classes.
    pub fn withhold(&self, held_out: &BTreeSet<usize>) -> Result<Self> {
        Ok(Dataset {
            records: withhold_boxes(self.records.clone(), held_out)?,
            images: Arc::clone(&self.images),
        })
    }

    /// Keeps the records for which `keep` is true.
    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Self {
        let (records, images): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .zip(self.images.iter())
            .filter(|(r, _)| keep(r))
            .map(|(r, t)| (r.clone(), t.clone()))
            .unzip();
        Dataset {
            records,
            images: Arc::new(images),
        }
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        self.records.len()
    }
    fn split(&self, i: usize) -> Split {
        self.records[i].split
    }
    fn class_id(&self, i: usize) -> usize {
        self.records[i].class_id
    }
    fn has_bbox_labels(&self, i: usize) -> bool {
        self.records[i].has_bbox_labels
    }
    fn boxes(&self, i: usize) -> &[BBox] {
        &self.records[i].boxes
    }
    fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }
}
