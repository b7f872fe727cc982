//! Synthetic pixel-aligned visible/infrared scenes with engineered complementary
//! visibility, and a YOLO-style on-disk dataset layout.
//!
//! Every object belongs to one of three visibility classes:
//!
//! | class | visible image                     | infrared image                 |
//! |-------|-----------------------------------|--------------------------------|
//! | 0     | textured, contrast >= 0.3         | bright blob, contrast >= 0.4   |
//! | 1     | textured, contrast >= 0.3         | flat, contrast 0.01            |
//! | 2     | flat, contrast 0.01               | bright blob, contrast >= 0.4   |
//!
//! With the default noise sigma of 0.02 the 0.01 contrast sits below the noise
//! floor, so a detector reading one modality cannot see one of the classes.
//!
//! Layout written by [`write_dataset`]:
//!
//! ```text
//! root/images/visible/000042.png    RGB, 8 bit
//! root/images/infrared/000042.png   RGB, 8 bit, single channel replicated
//! root/labels/000042.txt            "class cx cy w h" per line, normalised
//! root/manifest.json                {"train": [ids], "val": [ids], "test": [ids]}
//! ```

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor4};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["both", "visible_only", "infrared_only"];

/// Contrast of an object in the modality it is meant to be invisible in.
pub const HIDDEN_CONTRAST: f64 = 0.01;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_PAIR_IOU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub shape: ShapeKind,
    pub bbox: BBox,
    /// Added to the visible background per channel (before texture modulation).
    pub visible_tint: [f64; 3],
    pub visible_contrast: f64,
    /// Checkerboard cell size in pixels.
    pub texture_period: usize,
    pub infrared_contrast: f64,
}

impl ObjectSpec {
    pub fn visible_in_rgb(&self) -> bool {
        self.class != 2
    }

    pub fn visible_in_ir(&self) -> bool {
        self.class != 1
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let b = &self.bbox;
        match self.shape {
            ShapeKind::Rectangle => px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2,
            ShapeKind::Disc => {
                let (cx, cy) = b.center();
                let dx = (px - cx) / (b.width() / 2.0);
                let dy = (py - cy) / (b.height() / 2.0);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_illumination: f64,
    pub max_illumination: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_objects: 1,
            max_objects: 4,
            min_illumination: 0.05,
            max_illumination: 0.3,
            min_size: 0.08,
            max_size: 0.3,
            noise_sigma: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 8
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.min_illumination <= self.max_illumination
            && self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.max_size < 1.0
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scene config: {self:?}")))
        }
    }
}

/// Planar 3-channel 8-bit image (`channel, row, column`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    fn from_planes(width: usize, height: usize, planes: &[Vec<f64>; 3]) -> Self {
        let data = planes
            .iter()
            .flat_map(|p| p.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `1 x 3 x h x w` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let scale = 1.0 / 255.0;
        Tensor4::from_vec(
            (1, 3, self.height, self.width),
            self.data.iter().map(|&v| T::from_f64(f64::from(v) * scale)).collect(),
        )
        .expect("planar image has 3*h*w bytes")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    fn interleaved(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        (0..plane)
            .flat_map(|i| (0..3).map(move |c| c * plane + i))
            .map(|i| self.data[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class: usize,
    pub bbox: BBox,
}

impl Label {
    /// `class cx cy w h`, shortest round-trip float formatting.
    pub fn to_line(&self) -> String {
        let (cx, cy) = self.bbox.center();
        format!("{} {} {} {} {}", self.class, cx, cy, self.bbox.width(), self.bbox.height())
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format!("expected 5 fields, found {}", fields.len()));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| format!("bad class id `{}`", fields[0]))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| format!("bad number `{f}`"))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(format!("value {f} outside [0, 1]"));
            }
        }
        let bbox = BBox::from_center(v[0], v[1], v[2], v[3]);
        if !bbox.is_valid() {
            return Err("zero-area box".into());
        }
        Ok(Self { class, bbox })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: u64,
    pub visible: Image,
    pub infrared: Image,
    pub labels: Vec<Label>,
}

impl PairedSample {
    /// Mirrors both images and all labels left to right.
    pub fn flip_horizontal(&self) -> Self {
        Self {
            id: self.id,
            visible: self.visible.flip_horizontal(),
            infrared: self.infrared.flip_horizontal(),
            labels: self
                .labels
                .iter()
                .map(|l| Label {
                    class: l.class,
                    bbox: BBox::new(1.0 - l.bbox.x2, l.bbox.y1, 1.0 - l.bbox.x1, l.bbox.y2),
                })
                .collect(),
        }
    }
}

/// Object placement and global appearance of one scene, before rasterisation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub illumination: f64,
    /// Per-channel background tint of the visible image.
    pub background_tint: [f64; 3],
    pub background_phase: [f64; 4],
    pub ir_background: [f64; 3],
    pub objects: Vec<ObjectSpec>,
}

/// Box geometry lives on a dyadic grid so corners, centres and sizes convert
/// into each other exactly and label files read back bit-identical.
const GEOMETRY_GRID: f64 = (1u64 << 20) as f64;

fn snap_down(v: f64) -> f64 {
    (v * GEOMETRY_GRID).floor() / GEOMETRY_GRID
}

/// Draws object placements and appearance parameters.
pub fn sample_layout(rng: &mut SeededRng, cfg: &SceneConfig) -> SceneLayout {
    let illumination = rng.uniform(cfg.min_illumination, cfg.max_illumination);
    let background_tint = [rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)];
    let background_phase = std::array::from_fn(|_| rng.uniform(0.0, std::f64::consts::TAU));
    let ir_background = [rng.uniform(0.12, 0.22), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)];

    let wanted = rng.range_inclusive(cfg.min_objects, cfg.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let class = rng.below(NUM_CLASSES);
        let shape = if rng.chance(0.5) { ShapeKind::Disc } else { ShapeKind::Rectangle };
        let visible_tint = [rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)];
        let visible_contrast = rng.uniform(0.5, 0.7);
        let texture_period = rng.range_inclusive(2, 4);
        let infrared_contrast = rng.uniform(0.45, 0.65);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let w = snap_down(rng.uniform(cfg.min_size, cfg.max_size));
            let h = match shape {
                ShapeKind::Disc => w,
                ShapeKind::Rectangle => snap_down(rng.uniform(cfg.min_size, cfg.max_size)),
            };
            let cx = snap_down(rng.uniform(w / 2.0, 1.0 - w / 2.0));
            let cy = snap_down(rng.uniform(h / 2.0, 1.0 - h / 2.0));
            let bbox = BBox::from_center(cx, cy, w, h);
            let clear = objects
                .iter()
                .all(|o| crate::metrics::iou(&o.bbox, &bbox).map_or(false, |v| v < MAX_PAIR_IOU));
            let inside = bbox.x1 >= 0.0 && bbox.y1 >= 0.0 && bbox.x2 <= 1.0 && bbox.y2 <= 1.0;
            if clear && inside {
                objects.push(ObjectSpec {
                    class,
                    shape,
                    bbox,
                    visible_tint,
                    visible_contrast,
                    texture_period,
                    infrared_contrast,
                });
                break;
            }
        }
    }
    SceneLayout {
        illumination,
        background_tint,
        background_phase,
        ir_background,
        objects,
    }
}

/// Noise-free rendering of a layout as `(visible, infrared)` float planes.
pub fn render_clean(layout: &SceneLayout, size: usize) -> ([Vec<f64>; 3], [Vec<f64>; 3]) {
    let n = size * size;
    let mut vis: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    let mut ir: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    let ph = layout.background_phase;
    let [ir_base, ir_gx, ir_gy] = layout.ir_background;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            // dim textured backdrop: a few sinusoids with random phase
            let tex = 0.5
                + 0.25 * (std::f64::consts::TAU * 3.0 * u + ph[0]).sin()
                + 0.15 * (std::f64::consts::TAU * 5.0 * v + ph[1]).sin()
                + 0.10 * (std::f64::consts::TAU * 7.0 * (u + v) + ph[2]).sin();
            for (c, plane) in vis.iter_mut().enumerate() {
                plane[y * size + x] = layout.illumination * layout.background_tint[c] * (0.6 + 0.4 * tex);
            }
            let smooth = ir_base + ir_gx * (u - 0.5) + ir_gy * (v - 0.5)
                + 0.02 * (std::f64::consts::TAU * u + ph[3]).sin();
            for plane in ir.iter_mut() {
                plane[y * size + x] = smooth;
            }
        }
    }
    for obj in &layout.objects {
        let b = obj.bbox;
        let (x0, x1) = ((b.x1 * size as f64).floor() as usize, ((b.x2 * size as f64).ceil() as usize).min(size));
        let (y0, y1) = ((b.y1 * size as f64).floor() as usize, ((b.y2 * size as f64).ceil() as usize).min(size));
        let (cx, cy) = b.center();
        for y in y0..y1 {
            for x in x0..x1 {
                let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                if !obj.covers(u, v) {
                    continue;
                }
                let i = y * size + x;
                if obj.visible_in_rgb() {
                    let checker = ((x / obj.texture_period) + (y / obj.texture_period)) % 2;
                    let modulation = if checker == 0 { 1.0 } else { 0.8 };
                    for (c, plane) in vis.iter_mut().enumerate() {
                        plane[i] += obj.visible_contrast * obj.visible_tint[c] * modulation;
                    }
                } else {
                    for plane in vis.iter_mut() {
                        plane[i] += HIDDEN_CONTRAST;
                    }
                }
                let heat = if obj.visible_in_ir() {
                    // blob brightest at the centre, never below the nominal contrast
                    let dx = (u - cx) / (b.width() / 2.0);
                    let dy = (v - cy) / (b.height() / 2.0);
                    obj.infrared_contrast * (1.0 + 0.3 * (1.0 - (dx * dx + dy * dy).min(1.0)))
                } else {
                    HIDDEN_CONTRAST
                };
                for plane in ir.iter_mut() {
                    plane[i] += heat;
                }
            }
        }
    }
    (vis, ir)
}

/// Generates one scene. Identical `rng` state gives a bit-identical sample.
pub fn gen_scene(rng: &mut SeededRng, cfg: &SceneConfig, id: u64) -> PairedSample {
    let layout = sample_layout(rng, cfg);
    let size = cfg.image_size;
    let (mut vis, mut ir) = render_clean(&layout, size);
    for plane in vis.iter_mut() {
        for v in plane.iter_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }
    // one noise draw shared by the replicated infrared channels
    for i in 0..size * size {
        let e = cfg.noise_sigma * rng.normal();
        for plane in ir.iter_mut() {
            plane[i] += e;
        }
    }
    PairedSample {
        id,
        visible: Image::from_planes(size, size, &vis),
        infrared: Image::from_planes(size, size, &ir),
        labels: layout
            .objects
            .iter()
            .map(|o| Label {
                class: o.class,
                bbox: o.bbox,
            })
            .collect(),
    }
}

/// Generates `count` samples with ids `first_id..`, each from its own sub-stream
/// of `seed`, in parallel.
pub fn generate(seed: u64, cfg: &SceneConfig, first_id: u64, count: usize) -> Vec<PairedSample> {
    let root = SeededRng::new(seed);
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            gen_scene(&mut root.fork(id), cfg, id)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[u64]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<PairedSample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<Vec<PairedSample>> {
        let ids = self.manifest.split(name)?;
        ids.iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| s.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Parse {
                        path: self.root.join("manifest.json"),
                        line: 0,
                        msg: format!("split `{name}` lists unknown sample {id:06}"),
                    })
            })
            .collect()
    }
}

fn sample_stem(id: u64) -> String {
    format!("{id:06}")
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img.interleaved()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0u8; 3 * w * h];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + 3 * w];
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = row[3 * x + c];
            }
        }
    }
    Ok(Image { width: w, height: h, data })
}

/// Writes samples and manifest under `root`.
pub fn write_dataset(samples: &[PairedSample], manifest: &Manifest, root: &Path) -> Result<()> {
    let vis_dir = root.join("images").join("visible");
    let ir_dir = root.join("images").join("infrared");
    let label_dir = root.join("labels");
    for dir in [&vis_dir, &ir_dir, &label_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let stem = sample_stem(s.id);
        write_png(&vis_dir.join(format!("{stem}.png")), &s.visible)?;
        write_png(&ir_dir.join(format!("{stem}.png")), &s.infrared)?;
        let mut text: String = s.labels.iter().map(|l| l.to_line() + "\n").collect();
        if text.is_empty() {
            text.clear();
        }
        let path = label_dir.join(format!("{stem}.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Label::parse_line(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let vis_dir = root.join("images").join("visible");
    let ir_dir = root.join("images").join("infrared");
    let label_dir = root.join("labels");
    let vis = png_stems(&vis_dir)?;
    let ir = png_stems(&ir_dir)?;
    for stem in &ir {
        if vis.binary_search(stem).is_err() {
            return Err(Error::MissingPair {
                found: ir_dir.join(format!("{stem}.png")),
                missing: vis_dir.join(format!("{stem}.png")),
            });
        }
    }
    let mut samples = Vec::with_capacity(vis.len());
    for stem in &vis {
        let vis_path = vis_dir.join(format!("{stem}.png"));
        let ir_path = ir_dir.join(format!("{stem}.png"));
        let label_path = label_dir.join(format!("{stem}.txt"));
        for mate in [&ir_path, &label_path] {
            if !mate.exists() {
                return Err(Error::MissingPair {
                    found: vis_path.clone(),
                    missing: mate.to_path_buf(),
                });
            }
        }
        let id: u64 = stem.parse().map_err(|_| Error::Parse {
            path: vis_path.clone(),
            line: 0,
            msg: "file stem is not a numeric sample id".into(),
        })?;
        let visible = read_png(&vis_path)?;
        let infrared = read_png(&ir_path)?;
        if (visible.width, visible.height) != (infrared.width, infrared.height) {
            return Err(Error::Image {
                path: ir_path,
                msg: format!(
                    "size {}x{} differs from visible {}x{}",
                    infrared.width, infrared.height, visible.width, visible.height
                ),
            });
        }
        samples.push(PairedSample {
            id,
            visible,
            infrared,
            labels: read_labels(&label_path)?,
        });
    }
    let manifest_path = root.join("manifest.json");
    let manifest = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest {
            train: samples.iter().map(|s| s.id).collect(),
            ..Manifest::default()
        },
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        samples,
        manifest,
    })
}

/// Generates train/val/test splits with consecutive ids and a matching manifest.
pub fn synthesize(seed: u64, cfg: &SceneConfig, n_train: usize, n_val: usize, n_test: usize) -> (Vec<PairedSample>, Manifest) {
    let total = n_train + n_val + n_test;
    let samples = generate(seed, cfg, 0, total);
    let ids: Vec<u64> = (0..total as u64).collect();
    let manifest = Manifest {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    (samples, manifest)
}
