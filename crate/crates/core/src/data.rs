//! Synthetic "instrument" dataset: parametric shapes with textual
//! descriptions, written to and read from a plain directory layout:
//!
//! ```text
//! <dir>/images/<id>.ppm   RGB, P6, 8-bit
//! <dir>/masks/<id>.pgm    class index per pixel, P5, 8-bit (0 = background)
//! <dir>/classes.json      class manifest with three prompts per class
//! <dir>/split.json        {"train": [...], "val": [...]}
//! ```

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

pub const PROMPT_TEMPLATE_PREFIX: &str = "the surgical instrument area represented by the";

/// Prompt built from the surgical template.
pub fn template_prompt(class_name: &str) -> String {
    format!("{PROMPT_TEMPLATE_PREFIX} {class_name}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Capsule,
    Rectangle,
    Cross,
    Triangle,
    Annulus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u8,
    pub name: String,
    pub family: ShapeFamily,
    /// Base RGB colour; instances vary around it by `color_jitter`.
    pub color: [f64; 3],
    pub color_jitter: f64,
    /// Class name, template prompt, long appearance description.
    pub prompts: [String; 3],
}

impl ClassSpec {
    pub fn description(&self) -> &str {
        &self.prompts[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `(H·W) × 3`, values in `[0, 1]`, row-major pixels.
    pub image: Tensor,
    /// `H·W` class indices.
    pub mask: Vec<u8>,
}

impl ImageSample {
    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.mask.iter().copied().filter(|&c| c != 0).collect()
    }

    pub fn binary_mask(&self, class_id: u8) -> Vec<f64> {
        self.mask.iter().map(|&c| if c == class_id { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.image.data().iter().map(|&v| pnm::to_u8(v)).collect()
    }
}

/// Augmentation magnitudes applied at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub brightness: f64,
    pub crop_scale_min: f64,
    pub hflip: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { rotation_deg: 15.0, brightness: 0.2, crop_scale_min: 0.8, hflip: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub image_size: usize,
    pub seed: u64,
    pub augmentation: AugmentSpec,
    pub classes: Vec<ClassSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: ClassManifest,
    pub samples: Vec<ImageSample>,
    pub split: Split,
}

impl Dataset {
    pub fn classes(&self) -> &[ClassSpec] {
        &self.manifest.classes
    }

    pub fn sample(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn subset(&self, ids: &[String]) -> Vec<&ImageSample> {
        ids.iter().filter_map(|id| self.sample(id)).collect()
    }

    pub fn train(&self) -> Vec<&ImageSample> {
        self.subset(&self.split.train)
    }

    pub fn val(&self) -> Vec<&ImageSample> {
        self.subset(&self.split.val)
    }
}

struct Catalog {
    name: &'static str,
    family: ShapeFamily,
    color: [f64; 3],
    description: &'static str,
}

const CATALOG: [Catalog; 6] = [
    Catalog {
        name: "oval grasper",
        family: ShapeFamily::Ellipse,
        color: [0.86, 0.86, 0.90],
        description: "Oval graspers appear as smooth rounded elliptical bodies with a bright silver metallic \
                      sheen, gently curved outlines without any straight edges or corners, and a pale gray \
                      surface that stands out against the reddish tissue.",
    },
    Catalog {
        name: "capsule probe",
        family: ShapeFamily::Capsule,
        color: [0.95, 0.74, 0.22],
        description: "Capsule probes look like elongated golden yellow rods with two parallel straight sides \
                      and fully rounded ends, a long slender pill-shaped silhouette, and a warm glossy coating \
                      visible across the endoscopic field.",
    },
    Catalog {
        name: "block retractor",
        family: ShapeFamily::Rectangle,
        color: [0.24, 0.66, 0.34],
        description: "Block retractors present as solid green rectangular plates with four straight edges \
                      meeting at sharp right-angled corners, a flat uniform face, and a broad boxy footprint \
                      that holds tissue away from the operative site.",
    },
    Catalog {
        name: "cross clamp",
        family: ShapeFamily::Cross,
        color: [0.30, 0.40, 0.92],
        description: "Cross clamps show a deep blue plus-shaped frame made of two thick perpendicular bars of \
                      equal length crossing at the centre, leaving four open notched corners between the arms \
                      of the instrument.",
    },
    Catalog {
        name: "wedge scissors",
        family: ShapeFamily::Triangle,
        color: [0.62, 0.30, 0.80],
        description: "Wedge scissors appear as violet triangular blades that taper from a wide flat base to a \
                      single pointed tip, with three straight cutting edges and a glossy purple finish under \
                      the endoscope light.",
    },
    Catalog {
        name: "ring applier",
        family: ShapeFamily::Annulus,
        color: [0.20, 0.80, 0.86],
        description: "Ring appliers look like cyan circular loops with a hollow open centre, a thick band of \
                      constant width running all the way around, and a round outline that frames the tissue \
                      visible through the middle.",
    },
];

/// The built-in class catalogue, truncated to `num_classes` (at most 6).
pub fn default_classes(num_classes: usize) -> Result<Vec<ClassSpec>> {
    if num_classes == 0 || num_classes > CATALOG.len() {
        return Err(Error::config(
            "num_classes",
            format!("the synthetic generator supports 1..={} classes", CATALOG.len()),
        ));
    }
    Ok(CATALOG[..num_classes]
        .iter()
        .enumerate()
        .map(|(i, c)| ClassSpec {
            id: i as u8 + 1,
            name: c.name.to_string(),
            family: c.family,
            color: c.color,
            color_jitter: 0.06,
            prompts: [c.name.to_string(), template_prompt(c.name), normalise_ws(c.description)],
        })
        .collect())
}

fn normalise_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One placed shape. Sizes are in pixels; `rotation` in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub family: ShapeFamily,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub rotation: f64,
}

impl Instance {
    /// Point-in-shape test at continuous coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = (self.a, self.b);
        match self.family {
            ShapeFamily::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= a && v.abs() <= b,
            ShapeFamily::Cross => (u.abs() <= a && v.abs() <= b) || (u.abs() <= b && v.abs() <= a),
            ShapeFamily::Capsule => {
                let along = (u.abs() - (a - b)).max(0.0);
                along * along + v * v <= b * b
            }
            ShapeFamily::Triangle => v >= -b && v <= b - 2.0 * b * u.abs() / a,
            ShapeFamily::Annulus => {
                let r2 = u * u + v * v;
                r2 <= a * a && r2 >= b * b
            }
        }
    }

    /// Pixel-centre rasterisation onto a `height × width` grid.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        let mut out = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                out[y * width + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        out
    }

    fn sample(family: ShapeFamily, size: usize, rng: &mut ChaCha8Rng) -> Instance {
        let s = size as f64 / 64.0;
        let (lo, hi) = (14.0 * s, 20.0 * s);
        let (a, b) = match family {
            ShapeFamily::Ellipse => (rng.random_range(lo..hi), rng.random_range(lo..hi)),
            ShapeFamily::Rectangle => (rng.random_range(0.8 * lo..0.85 * hi), rng.random_range(0.8 * lo..0.85 * hi)),
            ShapeFamily::Cross => {
                let a = rng.random_range(lo..hi);
                (a, a * rng.random_range(0.42..0.5))
            }
            ShapeFamily::Capsule => (rng.random_range(hi..1.3 * hi), rng.random_range(0.6 * lo..0.8 * lo)),
            ShapeFamily::Triangle => (rng.random_range(1.1 * lo..1.1 * hi), rng.random_range(0.8 * lo..0.8 * hi)),
            ShapeFamily::Annulus => {
                let a = rng.random_range(lo..hi);
                (a, a * 0.45)
            }
        };
        let margin = 0.22 * size as f64;
        Instance {
            family,
            cx: rng.random_range(margin..size as f64 - margin),
            cy: rng.random_range(margin..size as f64 - margin),
            a,
            b,
            rotation: rng.random_range(0.0..PI),
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let base = [rng.random_range(0.45..0.6), rng.random_range(0.15..0.25), rng.random_range(0.13..0.22)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (rng.random_range(0.02..0.12), rng.random_range(0.0..2.0 * PI), rng.random_range(0.05..0.2), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let shade: f64 = waves
                .iter()
                .map(|(amp, ang, freq, phase)| {
                    let t = (x as f64 * ang.cos() + y as f64 * ang.sin()) * freq + phase;
                    amp * t.sin()
                })
                .sum();
            let n = rng.random_range(-0.03..0.03);
            px.push([base[0] + shade + n, base[1] + 0.5 * shade + n, base[2] + 0.5 * shade + n]);
        }
    }
    px
}

/// Renders one image with 1–3 non-overlapping instances of uniformly drawn
/// classes. Pixel values are quantised to 8 bits so the in-memory sample
/// equals what a reader recovers from disk.
pub fn render_sample(id: &str, size: usize, classes: &[ClassSpec], rng: &mut ChaCha8Rng) -> ImageSample {
    let mut pixels = background(size, rng);
    let mut mask = vec![0u8; size * size];
    let wanted = rng.random_range(1..=3);
    for _ in 0..wanted {
        let class = &classes[rng.random_range(0..classes.len())];
        let mut placed = None;
        for _ in 0..30 {
            let inst = Instance::sample(class.family, size, rng);
            let raster = inst.rasterize(size, size);
            if raster.iter().filter(|&&m| m).count() < 16 {
                continue;
            }
            if !collides(&raster, &mask, size) {
                placed = Some(raster);
                break;
            }
        }
        let Some(raster) = placed else { break };
        let brightness = rng.random_range(0.88..1.12);
        let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-class.color_jitter..class.color_jitter)).collect();
        for (i, inside) in raster.iter().enumerate() {
            if !*inside {
                continue;
            }
            mask[i] = class.id;
            let n = rng.random_range(-0.03..0.03);
            for ch in 0..3 {
                pixels[i][ch] = (class.color[ch] + jitter[ch]) * brightness + n;
            }
        }
    }
    let data = pixels.iter().flat_map(|p| p.iter().map(|&v| pnm::to_u8(v) as f64 / 255.0)).collect();
    ImageSample { id: id.to_string(), height: size, width: size, image: Tensor::from_vec(size * size, 3, data), mask }
}

/// True when `raster` touches an occupied pixel or one of its 8 neighbours.
fn collides(raster: &[bool], mask: &[u8], size: usize) -> bool {
    for (i, &inside) in raster.iter().enumerate() {
        if !inside {
            continue;
        }
        let (y, x) = ((i / size) as isize, (i % size) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size && mask[ny as usize * size + nx as usize] != 0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Deterministic in-memory generation: samples, classes and an 80/20 split.
pub fn generate(config: &ModelConfig, num_images: usize, seed: u64) -> Result<Dataset> {
    if num_images == 0 {
        return Err(Error::config("num_images", "must be ≥ 1"));
    }
    let classes = default_classes(config.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<ImageSample> = (0..num_images)
        .map(|i| render_sample(&format!("img_{i:04}"), config.image_size, &classes, &mut rng))
        .collect();
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_val = (num_images as f64 * 0.2).round() as usize;
    let mut val: Vec<String> = ids[..n_val].to_vec();
    let mut train: Vec<String> = ids[n_val..].to_vec();
    val.sort();
    train.sort();
    Ok(Dataset {
        manifest: ClassManifest { image_size: config.image_size, seed, augmentation: AugmentSpec::default(), classes },
        samples,
        split: Split { train, val },
    })
}

/// Writes a dataset in the directory layout described at module level.
pub fn write_dataset(dataset: &Dataset, out: &Path) -> Result<()> {
    let images = out.join("images");
    let masks = out.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in &dataset.samples {
        pnm::write_ppm(&images.join(format!("{}.ppm", s.id)), s.width, s.height, &s.to_rgb8())?;
        pnm::write_pgm(&masks.join(format!("{}.pgm", s.id)), s.width, s.height, &s.mask)?;
    }
    write_json(&out.join("classes.json"), &dataset.manifest)?;
    write_json(&out.join("split.json"), &dataset.split)?;
    Ok(())
}

/// Generates and writes a synthetic dataset; returns the class manifest.
pub fn generate_dataset(config: &ModelConfig, num_images: usize, seed: u64, out: &Path) -> Result<ClassManifest> {
    let ds = generate(config, num_images, seed)?;
    write_dataset(&ds, out)?;
    Ok(ds.manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset { path: path.to_path_buf(), reason: e.to_string() })
}

/// Reads a dataset directory and validates every sample.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: ClassManifest = read_json(&dir.join("classes.json"))?;
    validate_classes(&manifest.classes, &dir.join("classes.json"))?;
    let num_classes = manifest.classes.len();
    let images_dir = dir.join("images");
    let mut ids: Vec<String> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("ppm"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .flatten()
        })
        .collect();
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for id in &ids {
        samples.push(load_sample(dir, id, num_classes)?);
    }
    let split_path = dir.join("split.json");
    let split = if split_path.exists() {
        let split: Split = read_json(&split_path)?;
        for id in split.train.iter().chain(&split.val) {
            if !ids.contains(id) {
                return Err(Error::Dataset { path: split_path, reason: format!("split lists unknown image {id}") });
            }
        }
        split
    } else {
        log::warn!("{} has no split.json; using every image for training", dir.display());
        Split { train: ids.clone(), val: Vec::new() }
    };
    Ok(Dataset { manifest, samples, split })
}

fn validate_classes(classes: &[ClassSpec], path: &Path) -> Result<()> {
    let bad = |reason: String| Error::Dataset { path: path.to_path_buf(), reason };
    let mut names = BTreeSet::new();
    for (i, c) in classes.iter().enumerate() {
        if c.id as usize != i + 1 {
            return Err(bad(format!("class ids must be 1..=C in order; found {} at position {}", c.id, i)));
        }
        if !names.insert(c.name.as_str()) {
            return Err(bad(format!("duplicate class name {}", c.name)));
        }
    }
    Ok(())
}

fn load_sample(dir: &Path, id: &str, num_classes: usize) -> Result<ImageSample> {
    let img_path = dir.join("images").join(format!("{id}.ppm"));
    let mask_path: PathBuf = dir.join("masks").join(format!("{id}.pgm"));
    if !mask_path.exists() {
        return Err(Error::Dataset { path: mask_path, reason: format!("missing mask for image {id}") });
    }
    let (w, h, c, rgb) = pnm::read(&img_path)?;
    if c != 3 {
        return Err(Error::Dataset { path: img_path, reason: "image must be P6 RGB".into() });
    }
    let (mw, mh, mc, mask) = pnm::read(&mask_path)?;
    if mc != 1 {
        return Err(Error::Dataset { path: mask_path, reason: "mask must be P5 grayscale".into() });
    }
    if (mw, mh) != (w, h) {
        return Err(Error::Dataset {
            path: mask_path,
            reason: format!("dimension mismatch: image {w}x{h}, mask {mw}x{mh}"),
        });
    }
    if let Some(&v) = mask.iter().find(|&&v| v as usize > num_classes) {
        return Err(Error::Dataset {
            path: mask_path,
            reason: format!("mask value {v} exceeds class count {num_classes}"),
        });
    }
    let data = rgb.iter().map(|&v| v as f64 / 255.0).collect();
    Ok(ImageSample { id: id.to_string(), height: h, width: w, image: Tensor::from_vec(w * h, 3, data), mask })
}

/// Random crop/rescale, rotation, horizontal flip and brightness change.
/// Image and mask share one nearest-neighbour, edge-clamped resampling.
pub fn augment(sample: &ImageSample, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> ImageSample {
    let (h, w) = (sample.height, sample.width);
    let angle = rng.random_range(-spec.rotation_deg..=spec.rotation_deg).to_radians();
    let scale = rng.random_range(spec.crop_scale_min..=1.0);
    let max_shift = (1.0 - scale) * 0.5;
    let shift_x = rng.random_range(-max_shift..=max_shift) * w as f64;
    let shift_y = rng.random_range(-max_shift..=max_shift) * h as f64;
    let flip = spec.hflip && rng.random_bool(0.5);
    let gain = 1.0 + rng.random_range(-spec.brightness..=spec.brightness);
    let (s, c) = angle.sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut image = Tensor::zeros(h * w, 3);
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            if flip {
                px = -px;
            }
            let sx = cx + shift_x + scale * (c * px - s * py);
            let sy = cy + shift_y + scale * (s * px + c * py);
            let ix = (sx.floor() as isize).clamp(0, w as isize - 1) as usize;
            let iy = (sy.floor() as isize).clamp(0, h as isize - 1) as usize;
            let src = iy * w + ix;
            let dst = y * w + x;
            mask[dst] = sample.mask[src];
            for ch in 0..3 {
                image.set(dst, ch, (sample.image.get(src, ch) * gain).clamp(0.0, 1.0));
            }
        }
    }
    ImageSample { id: sample.id.clone(), height: h, width: w, image, mask }
}
