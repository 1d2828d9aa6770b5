//! Synthetic fine-grained dataset: every image shows one ellipse "object"
//! of random color and pose over textured clutter; the subcategory is
//! carried only by a small binary glyph stamped somewhere on the object.
//!
//! Labels and evaluation annotations live in separate files. The training
//! loader ([`DatasetDir::load_training_view`]) reads only images and labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::BBox;
use crate::error::{Result, WsdlError};
use crate::tensor::Tensor;

pub const GLYPH_SIDE: usize = 5;
pub const LABELS_FILE: &str = "labels.tsv";
pub const ANNOTATIONS_FILE: &str = "annotations.tsv";
/// Minimum pairwise Hamming distance between class glyphs.
pub const MIN_GLYPH_DISTANCE: u32 = 6;
const CODEBOOK_SEED: u64 = 0x5eed_91f0;

/// A 5×5 binary pattern, row-major in the low 25 bits.
pub type Glyph = u32;

pub fn glyph_bit(g: Glyph, row: usize, col: usize) -> bool {
    (g >> (row * GLYPH_SIDE + col)) & 1 == 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    /// Object diameter range as a fraction of the image side.
    pub object_min: f64,
    pub object_max: f64,
    /// Expected clutter shapes per 1000 pixels.
    pub clutter_density: f64,
    /// Pixels per glyph cell.
    pub glyph_cell: usize,
    pub codebook: Vec<Glyph>,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        GenConfig {
            num_classes,
            train_count: 800,
            test_count: 200,
            image_size: 64,
            object_min: 0.3,
            object_max: 0.6,
            clutter_density: 3.0,
            glyph_cell: 2,
            codebook: default_codebook(num_classes),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(WsdlError::Config("at least 2 classes are required".into()));
        }
        if self.codebook.len() != self.num_classes {
            return Err(WsdlError::Config(format!(
                "codebook has {} glyphs for {} classes",
                self.codebook.len(),
                self.num_classes
            )));
        }
        for (i, &a) in self.codebook.iter().enumerate() {
            if a >> (GLYPH_SIDE * GLYPH_SIDE) != 0 {
                return Err(WsdlError::Config(format!("glyph {i} uses more than 25 bits")));
            }
            for (j, &b) in self.codebook.iter().enumerate().skip(i + 1) {
                let d = (a ^ b).count_ones();
                if d < MIN_GLYPH_DISTANCE {
                    return Err(WsdlError::Config(format!(
                        "glyphs {i} and {j} differ in {d} cells, need at least {MIN_GLYPH_DISTANCE}"
                    )));
                }
            }
        }
        if !(0.0 < self.object_min && self.object_min <= self.object_max && self.object_max <= 0.9) {
            return Err(WsdlError::Config(
                "object size range must satisfy 0 < min <= max <= 0.9".into(),
            ));
        }
        let glyph_px = (GLYPH_SIDE * self.glyph_cell) as f64;
        // The glyph square must fit inside the smallest possible ellipse.
        let min_radius = 0.5 * self.object_min * self.image_size as f64;
        if glyph_px * std::f64::consts::FRAC_1_SQRT_2 >= min_radius || self.glyph_cell == 0 {
            return Err(WsdlError::Config(format!(
                "a {glyph_px}px glyph does not fit objects of radius {min_radius}"
            )));
        }
        if !(self.clutter_density >= 0.0) {
            return Err(WsdlError::Config("clutter_density must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Deterministic codebook: random 25-bit patterns with 8–17 set cells,
/// accepted greedily when far enough from every earlier glyph.
pub fn default_codebook(num_classes: usize) -> Vec<Glyph> {
    let mut rng = ChaCha8Rng::seed_from_u64(CODEBOOK_SEED);
    let mut book: Vec<Glyph> = Vec::with_capacity(num_classes);
    while book.len() < num_classes {
        let g: Glyph = rng.gen::<u32>() & ((1 << 25) - 1);
        let ones = g.count_ones();
        if !(8..=17).contains(&ones) {
            continue;
        }
        if book.iter().all(|&b| (b ^ g).count_ones() >= MIN_GLYPH_DISTANCE + 2) {
            book.push(g);
        }
    }
    book
}

/// 8-bit RGB raster, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c] as f64 / 255.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAnnotations {
    pub object: BBox,
    /// Glyph center, then two object landmarks.
    pub parts: Vec<(f64, f64)>,
}

/// Image with its image-level label; the only sample view training sees.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub name: String,
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub samples: Vec<LabeledImage>,
}

impl TrainingView {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen: Vec<usize> = self.samples.iter().map(|s| s.label).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `[N,3,H,W]` tensor of the selected samples, values in `[0,1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        images_to_tensor(indices.iter().map(|&i| &self.samples[i].image))
    }
}

pub fn images_to_tensor<'a>(images: impl Iterator<Item = &'a RgbImage>) -> Tensor {
    let mut data = Vec::new();
    let mut count = 0;
    let mut size = (0, 0);
    for img in images {
        size = (img.height, img.width);
        let area = img.width * img.height;
        let start = data.len();
        data.resize(start + 3 * area, 0.0);
        for (p, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[start + c * area + p] = px[c] as f64 / 255.0;
            }
        }
        count += 1;
    }
    Tensor::new(&[count, 3, size.0, size.1], data).expect("non-empty batch")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7261_696e,
        Split::Test => 0x7465_7374,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 24) ^ index as u64
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, color: [f64; 3]) {
        self.rgb[y * self.size + x] = color;
    }

    fn into_image(self) -> RgbImage {
        let pixels = self
            .rgb
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        RgbImage {
            width: self.size,
            height: self.size,
            pixels,
        }
    }
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }
}

/// Render one sample and its evaluation annotations.
pub fn generate_sample(config: &GenConfig, label: usize, seed: u64) -> (SyntheticSample, EvalAnnotations) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let sf = size as f64;

    // Background: linear gradient between two muted colors plus pixel noise.
    let c0 = random_color(&mut rng, 0.15, 0.85);
    let c1 = random_color(&mut rng, 0.15, 0.85);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ds, dc) = dir.sin_cos();
    let mut canvas = Canvas {
        size,
        rgb: vec![[0.0; 3]; size * size],
    };
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / sf - 0.5) * dc + (y as f64 / sf - 0.5) * ds) + 0.75) / 1.5;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] + (c1[c] - c0[c]) * t + rng.gen_range(-0.06..0.06);
            }
            canvas.set(x, y, px);
        }
    }

    // Clutter: small rectangles and discs in muted colors.
    let expected = config.clutter_density * (size * size) as f64 / 1000.0;
    let shapes = rng.gen_range(0.5 * expected..=1.5 * expected).round() as usize;
    for _ in 0..shapes {
        let color = random_color(&mut rng, 0.15, 0.85);
        let x0 = rng.gen_range(0..size);
        let y0 = rng.gen_range(0..size);
        if rng.gen_bool(0.5) {
            let w = rng.gen_range(2..8);
            let h = rng.gen_range(2..8);
            for y in y0..(y0 + h).min(size) {
                for x in x0..(x0 + w).min(size) {
                    canvas.set(x, y, color);
                }
            }
        } else {
            let r = rng.gen_range(1.5..4.5f64);
            let (cx, cy) = (x0 as f64, y0 as f64);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        canvas.set(x, y, color);
                    }
                }
            }
        }
    }

    // Object: ellipse of class-independent color and pose, fully in frame.
    let a = 0.5 * sf * rng.gen_range(config.object_min..=config.object_max);
    let b = 0.5 * sf * rng.gen_range(config.object_min..=config.object_max);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let mut ellipse = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a,
        b,
        theta,
    };
    let (ex, ey) = ellipse.half_extents();
    ellipse.cx = rng.gen_range(ex + 1.0..=sf - ex - 1.0);
    ellipse.cy = rng.gen_range(ey + 1.0..=sf - ey - 1.0);
    let object_color = random_color(&mut rng, 0.2, 0.8);
    let shade = rng.gen_range(-0.15..0.15);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if ellipse.contains(px, py) {
                let t = (px - ellipse.cx) / (2.0 * ex);
                let color = object_color.map(|c| c + shade * t);
                canvas.set(x, y, color);
            }
        }
    }
    let object = BBox::new(
        (ellipse.cx - ex).floor().max(0.0),
        (ellipse.cy - ey).floor().max(0.0),
        (ellipse.cx + ex).ceil().min(sf),
        (ellipse.cy + ey).ceil().min(sf),
    )
    .expect("object has positive extent");

    // Glyph: square of 5×5 cells whose corners all lie inside the ellipse.
    let side = GLYPH_SIDE * config.glyph_cell;
    let fits = |gx: usize, gy: usize| {
        let (x0, y0, x1, y1) = (gx as f64, gy as f64, (gx + side) as f64, (gy + side) as f64);
        ellipse.contains(x0, y0) && ellipse.contains(x1, y0) && ellipse.contains(x0, y1) && ellipse.contains(x1, y1)
    };
    let mut origin = None;
    for _ in 0..200 {
        let gx = rng.gen_range(object.x_min as usize..=(object.x_max as usize).saturating_sub(side));
        let gy = rng.gen_range(object.y_min as usize..=(object.y_max as usize).saturating_sub(side));
        if fits(gx, gy) {
            origin = Some((gx, gy));
            break;
        }
    }
    let (gx, gy) = origin.unwrap_or_else(|| {
        let half = side as f64 / 2.0;
        (
            (ellipse.cx - half).round() as usize,
            (ellipse.cy - half).round() as usize,
        )
    });
    let glyph = config.codebook[label];
    for row in 0..GLYPH_SIDE {
        for col in 0..GLYPH_SIDE {
            let v = if glyph_bit(glyph, row, col) { 0.96 } else { 0.04 };
            for dy in 0..config.glyph_cell {
                for dx in 0..config.glyph_cell {
                    canvas.set(
                        gx + col * config.glyph_cell + dx,
                        gy + row * config.glyph_cell + dy,
                        [v; 3],
                    );
                }
            }
        }
    }

    let glyph_center = ((gx + side / 2) as f64, (gy + side / 2) as f64);
    let (s, c) = theta.sin_cos();
    let reach = 0.6 * a;
    let landmark = |sign: f64| {
        (
            (ellipse.cx + sign * reach * c).floor(),
            (ellipse.cy + sign * reach * s).floor(),
        )
    };
    let annotations = EvalAnnotations {
        object,
        parts: vec![glyph_center, landmark(1.0), landmark(-1.0)],
    };
    (
        SyntheticSample {
            image: canvas.into_image(),
            label,
        },
        annotations,
    )
}

/// Samples of one split, labels cycling through the classes so per-class
/// counts differ by at most one.
pub fn generate_split(config: &GenConfig, split: Split) -> Vec<(SyntheticSample, EvalAnnotations)> {
    let count = match split {
        Split::Train => config.train_count,
        Split::Test => config.test_count,
    };
    (0..count)
        .map(|i| generate_sample(config, i % config.num_classes, sample_seed(config.seed, split, i)))
        .collect()
}

pub fn sample_name(index: usize) -> String {
    format!("{index:05}.ppm")
}

/// Write `train/` and `test/` splits under `out`, each with PPM images,
/// `labels.tsv` and `annotations.tsv`.
pub fn generate_dataset(config: &GenConfig, out: &Path) -> Result<()> {
    config.validate()?;
    for split in [Split::Train, Split::Test] {
        let dir = out.join(split.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| WsdlError::io(&dir, e))?;
        let mut labels = String::new();
        let mut annotations = String::new();
        for (i, (sample, ann)) in generate_split(config, split).into_iter().enumerate() {
            let name = sample_name(i);
            write_ppm(&dir.join(&name), &sample.image)?;
            writeln!(labels, "{name}\t{}", sample.label).expect("string write");
            writeln!(annotations, "{name}\t{}", format_annotation(&ann)).expect("string write");
        }
        write_file(&dir.join(LABELS_FILE), labels.as_bytes())?;
        write_file(&dir.join(ANNOTATIONS_FILE), annotations.as_bytes())?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| WsdlError::io(path, e))
}

fn format_annotation(ann: &EvalAnnotations) -> String {
    let o = &ann.object;
    let parts: Vec<String> = ann.parts.iter().map(|(x, y)| format!("{x},{y}")).collect();
    format!("{} {} {} {}\t{}", o.x_min, o.y_min, o.x_max, o.y_max, parts.join(";"))
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.pixels);
    write_file(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| WsdlError::io(path, e))?;
    parse_ppm(&bytes).map_err(|detail| WsdlError::parse(path, detail))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let width: usize = token()?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token()?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let need = width * height * 3;
    if data.len() != need {
        return Err(format!("expected {need} pixel bytes, found {}", data.len()));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: data.to_vec(),
    })
}

/// One split directory of a generated dataset. Every file read through it
/// is recorded, so tests can assert which files a code path touched.
#[derive(Debug)]
pub struct DatasetDir {
    root: PathBuf,
    access_log: Mutex<Vec<PathBuf>>,
}

impl DatasetDir {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        DatasetDir {
            root: root.into(),
            access_log: Mutex::new(Vec::new()),
        }
    }

    pub fn split(dataset_root: &Path, split: Split) -> Self {
        Self::open(dataset_root.join(split.dir_name()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn accessed(&self) -> Vec<PathBuf> {
        self.access_log.lock().expect("log lock").clone()
    }

    fn touch(&self, path: &Path) {
        self.access_log.lock().expect("log lock").push(path.to_path_buf());
    }

    fn read_text(&self, name: &str) -> Result<(PathBuf, String)> {
        let path = self.root.join(name);
        self.touch(&path);
        let text = std::fs::read_to_string(&path).map_err(|e| WsdlError::io(&path, e))?;
        Ok((path, text))
    }

    pub fn load_labels(&self) -> Result<Vec<(String, usize)>> {
        let (path, text) = self.read_text(LABELS_FILE)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(n, line)| {
                let (name, class) = line
                    .split_once('\t')
                    .ok_or_else(|| WsdlError::parse(&path, format!("line {}: missing tab", n + 1)))?;
                let class = class
                    .trim()
                    .parse()
                    .map_err(|_| WsdlError::parse(&path, format!("line {}: bad class {class:?}", n + 1)))?;
                Ok((name.to_string(), class))
            })
            .collect()
    }

    pub fn load_image(&self, name: &str) -> Result<RgbImage> {
        let path = self.root.join(name);
        self.touch(&path);
        read_ppm(&path)
    }

    /// Images and image-level labels only.
    pub fn load_training_view(&self) -> Result<TrainingView> {
        let samples = self
            .load_labels()?
            .into_iter()
            .map(|(name, label)| {
                let image = self.load_image(&name)?;
                Ok(LabeledImage { name, image, label })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingView { samples })
    }

    /// Object boxes and part points keyed by image file name. Evaluation only.
    pub fn load_annotations(&self) -> Result<BTreeMap<String, EvalAnnotations>> {
        let (path, text) = self.read_text(ANNOTATIONS_FILE)?;
        let bad = |n: usize, what: &str| WsdlError::parse(&path, format!("line {}: {what}", n + 1));
        let mut out = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(n, "expected 3 tab-separated fields"));
            }
            let coords: Vec<f64> = fields[1]
                .split(' ')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(n, "bad box coordinates"))?;
            if coords.len() != 4 {
                return Err(bad(n, "box needs 4 coordinates"));
            }
            let object = BBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| bad(n, &e.to_string()))?;
            let parts = fields[2]
                .split(';')
                .map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect::<Option<Vec<(f64, f64)>>>()
                .ok_or_else(|| bad(n, "bad part points"))?;
            out.insert(fields[0].to_string(), EvalAnnotations { object, parts });
        }
        Ok(out)
    }
}
