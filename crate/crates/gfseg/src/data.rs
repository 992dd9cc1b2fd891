//! Class taxonomy, fold splits, K-shot support sampling and the synthetic
//! shapes dataset.
//!
//! Class ids are global `u8` values: `0` is background, `255` is ignore, and
//! foreground classes are `1..=num_classes`. A [`ClassTaxonomy`] partitions
//! the foreground ids of one fold into base and novel sets; everything
//! downstream (channel layout, metrics grouping) is derived from it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{BACKGROUND_ID, IGNORE_ID};

/// Base/novel partition of the foreground classes for one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub base_ids: Vec<u8>,
    pub novel_ids: Vec<u8>,
    pub background_id: u8,
}

impl ClassTaxonomy {
    /// Build a taxonomy from explicit class lists, validating the invariants.
    /// This is also the hook for non-contiguous splits (e.g. grouping all
    /// vehicle classes as novel and all animal classes as base).
    pub fn new(base_ids: Vec<u8>, novel_ids: Vec<u8>) -> Result<Self> {
        if base_ids.is_empty() || novel_ids.is_empty() {
            return Err(Error::Invariant(
                "taxonomy needs at least one base and one novel class".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for &id in base_ids.iter().chain(novel_ids.iter()) {
            if id == BACKGROUND_ID || id == IGNORE_ID {
                return Err(Error::Invariant(format!(
                    "class id {id} is reserved (background/ignore)"
                )));
            }
            if !seen.insert(id) {
                return Err(Error::Invariant(format!("class id {id} appears twice")));
            }
        }
        Ok(ClassTaxonomy {
            base_ids,
            novel_ids,
            background_id: BACKGROUND_ID,
        })
    }

    /// Number of base classes (M).
    pub fn num_base(&self) -> usize {
        self.base_ids.len()
    }

    /// Number of novel classes (N).
    pub fn num_novel(&self) -> usize {
        self.novel_ids.len()
    }

    /// Total channel count for phase-2 heads: background + base + novel.
    pub fn num_channels(&self) -> usize {
        1 + self.num_base() + self.num_novel()
    }

    pub fn is_base(&self, id: u8) -> bool {
        self.base_ids.contains(&id)
    }

    pub fn is_novel(&self, id: u8) -> bool {
        self.novel_ids.contains(&id)
    }

    /// Channel index of a class id in the combined head layout:
    /// 0 = background, 1..=M base in `base_ids` order, M+1.. novel.
    pub fn channel_of(&self, id: u8) -> Option<usize> {
        if id == self.background_id {
            return Some(0);
        }
        if let Some(p) = self.base_ids.iter().position(|&b| b == id) {
            return Some(1 + p);
        }
        self.novel_ids
            .iter()
            .position(|&n| n == id)
            .map(|p| 1 + self.num_base() + p)
    }

    /// Class id living at a channel index (inverse of [`Self::channel_of`]).
    pub fn class_of_channel(&self, channel: usize) -> Option<u8> {
        if channel == 0 {
            return Some(self.background_id);
        }
        let m = self.num_base();
        if channel <= m {
            self.base_ids.get(channel - 1).copied()
        } else {
            self.novel_ids.get(channel - 1 - m).copied()
        }
    }
}

/// Split an ordered class list into `num_folds` contiguous blocks and make
/// block `fold_index` the novel set; everything else is base.
pub fn split_folds(
    all_class_ids: &[u8],
    num_folds: usize,
    fold_index: usize,
) -> Result<ClassTaxonomy> {
    if num_folds == 0 || all_class_ids.len() % num_folds != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {} equal folds",
            all_class_ids.len(),
            num_folds
        )));
    }
    if fold_index >= num_folds {
        return Err(Error::Range(format!(
            "fold index {fold_index} out of range for {num_folds} folds"
        )));
    }
    let block = all_class_ids.len() / num_folds;
    let start = fold_index * block;
    let novel_ids = all_class_ids[start..start + block].to_vec();
    let base_ids: Vec<u8> = all_class_ids[..start]
        .iter()
        .chain(all_class_ids[start + block..].iter())
        .copied()
        .collect();
    ClassTaxonomy::new(base_ids, novel_ids)
}

/// One image with its pixel-exact mask. The image is stored normalized
/// (dataset mean subtracted), so a value of 0 is the mean color.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// (3, H, W), normalized reals.
    pub image: Array3<f64>,
    /// (H, W) class ids; 255 marks ignored pixels.
    pub mask: Array2<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Foreground class ids present in the mask, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut set = BTreeSet::new();
        for &v in self.mask.iter() {
            if v != BACKGROUND_ID && v != IGNORE_ID {
                set.insert(v);
            }
        }
        set.into_iter().collect()
    }

    fn check_dims(&self) -> Result<()> {
        let (c, h, w) = (
            self.image.shape()[0],
            self.image.shape()[1],
            self.image.shape()[2],
        );
        if c != 3 || h != self.mask.shape()[0] || w != self.mask.shape()[1] {
            return Err(Error::Shape(format!(
                "sample {}: image {:?} does not pair with mask {:?}",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        Ok(())
    }
}

/// Replace every novel-class pixel with background; the result is what the
/// pre-training phase sees. Pure and idempotent.
pub fn relabel_for_pretraining(sample: &Sample, taxonomy: &ClassTaxonomy) -> Result<Sample> {
    sample.check_dims()?;
    let mut mask = sample.mask.clone();
    for v in mask.iter_mut() {
        let id = *v;
        if id == IGNORE_ID || id == taxonomy.background_id || taxonomy.is_base(id) {
            continue;
        }
        if taxonomy.is_novel(id) {
            *v = taxonomy.background_id;
        } else {
            return Err(Error::Data(format!(
                "sample {}: unknown class id {id} in mask",
                sample.id
            )));
        }
    }
    Ok(Sample {
        id: sample.id.clone(),
        image: sample.image.clone(),
        mask,
    })
}

/// Pick K support images per novel class, deterministically from `seed`.
///
/// An image may show several novel classes; it is sampled for its designated
/// class but keeps its full mask, so all labeled novel pixels supervise.
pub fn sample_support_set(
    novel_pool: &[Sample],
    taxonomy: &ClassTaxonomy,
    k: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(taxonomy.num_novel() * k);
    for &class in &taxonomy.novel_ids {
        let candidates: Vec<usize> = novel_pool
            .iter()
            .enumerate()
            .filter(|(_, s)| s.mask.iter().any(|&v| v == class))
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < k {
            return Err(Error::Data(format!(
                "novel class {class} has only {} candidate image(s), need {k}",
                candidates.len()
            )));
        }
        let mut chosen = candidates;
        chosen.shuffle(&mut rng);
        chosen.truncate(k);
        chosen.sort_unstable();
        for i in chosen {
            support.push(novel_pool[i].clone());
        }
    }
    Ok(support)
}

/// Parameters of the synthetic shapes dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_folds: usize,
    pub images_per_class: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::Config(format!(
                "num_classes {} outside 1..=254",
                self.num_classes
            )));
        }
        if self.num_folds == 0 || self.num_classes % self.num_folds != 0 {
            return Err(Error::Config(format!(
                "num_classes {} not divisible by num_folds {}",
                self.num_classes, self.num_folds
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Config("image_size must be at least 16x16".into()));
        }
        Ok(())
    }

    pub fn all_class_ids(&self) -> Vec<u8> {
        (1..=self.num_classes as u8).collect()
    }

    /// Held-out images per class: a quarter of the training count, at least one.
    pub fn test_images_per_class(&self) -> usize {
        (self.images_per_class / 4).max(1)
    }
}

/// Mean color subtracted when normalizing images; raw pixel values live in
/// [0, 1], normalized values in [-0.5, 0.5].
pub const DATASET_MEAN: f64 = 0.5;

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Diamond,
    Cross,
    Ellipse,
    Bar,
}

const SHAPE_KINDS: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Diamond,
    ShapeKind::Cross,
    ShapeKind::Ellipse,
    ShapeKind::Bar,
];

fn shape_contains(kind: ShapeKind, dy: f64, dx: f64, r: f64) -> bool {
    match kind {
        ShapeKind::Circle => dy * dy + dx * dx <= r * r,
        ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
        ShapeKind::Triangle => {
            // upright isoceles: apex at the top
            dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
        }
        ShapeKind::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
        }
        ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
        ShapeKind::Cross => {
            (dy.abs() <= r && dx.abs() <= r / 3.0) || (dx.abs() <= r && dy.abs() <= r / 3.0)
        }
        ShapeKind::Ellipse => {
            let a = r;
            let b = r * 0.55;
            (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0
        }
        ShapeKind::Bar => dy.abs() <= r * 0.35 && dx.abs() <= r,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color family of a class: a distinct hue with per-object jitter.
fn class_color(class: u8, num_classes: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = (class as f64 - 1.0) / num_classes as f64 * 360.0;
    let jitter = rng.gen_range(-8.0..8.0);
    let v = rng.gen_range(0.75..0.95);
    hsv_to_rgb(hue + jitter, 0.85, v)
}

fn paint_object(
    image: &mut Array3<f64>,
    mask: &mut Array2<u8>,
    class: u8,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let kind = SHAPE_KINDS[(class as usize - 1) % SHAPE_KINDS.len()];
    let min_dim = h.min(w) as f64;
    let r = rng.gen_range(min_dim * 0.12..min_dim * 0.22);
    let cy = rng.gen_range(r..h as f64 - r);
    let cx = rng.gen_range(r..w as f64 - r);
    let color = class_color(class, num_classes, rng);
    for y in 0..h {
        for x in 0..w {
            if shape_contains(kind, y as f64 - cy, x as f64 - cx, r) {
                let noise = rng.gen_range(-0.02..0.02);
                for c in 0..3 {
                    image[[c, y, x]] = (color[c] + noise).clamp(0.0, 1.0);
                }
                mask[[y, x]] = class;
            }
        }
    }
}

fn textured_background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    // low-frequency diagonal gradient plus pixel noise, kept desaturated so
    // no foreground color family collides with it
    let base = rng.gen_range(0.25..0.45);
    let slope = rng.gen_range(-0.15..0.15);
    let mut img = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = (y + x) as f64 / (h + w) as f64;
            let v = base + slope * t + rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                let tint = 1.0 + 0.04 * (c as f64 - 1.0);
                img[[c, y, x]] = (v * tint).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn render_image(spec: &DatasetSpec, primary: u8, rng: &mut ChaCha8Rng, id: String) -> Sample {
    let (h, w) = spec.image_size;
    let mut raw = textured_background(h, w, rng);
    let mut mask = Array2::<u8>::zeros((h, w));
    // extras first, primary last so the designated class is never occluded
    let extra_count = {
        let roll: f64 = rng.gen_range(0.0..1.0);
        if roll < 0.25 {
            0
        } else if roll < 0.75 {
            1
        } else {
            2
        }
    };
    for _ in 0..extra_count {
        let mut other = rng.gen_range(1..=spec.num_classes as u8);
        if other == primary {
            other = other % spec.num_classes as u8 + 1;
        }
        paint_object(&mut raw, &mut mask, other, spec.num_classes, rng);
    }
    paint_object(&mut raw, &mut mask, primary, spec.num_classes, rng);
    let image = raw.mapv(|v| v - DATASET_MEAN);
    Sample { id, image, mask }
}

/// Render the full synthetic dataset: `images_per_class` training images per
/// class (each class is the always-visible primary object of its images) and
/// a held-out quarter for testing. Bit-deterministic for a given spec.
pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 1..=spec.num_classes as u8 {
        for i in 0..spec.images_per_class {
            // one stream per image keeps generation order-independent
            let mut rng = image_rng(spec.seed, class, i as u64, false);
            let id = format!("train_c{class:03}_{i:04}");
            train.push(render_image(spec, class, &mut rng, id));
        }
        for i in 0..spec.test_images_per_class() {
            let mut rng = image_rng(spec.seed, class, i as u64, true);
            let id = format!("test_c{class:03}_{i:04}");
            test.push(render_image(spec, class, &mut rng, id));
        }
    }
    Ok((train, test))
}

fn image_rng(seed: u64, class: u8, index: u64, test: bool) -> ChaCha8Rng {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    s = s
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(((class as u64) << 32) | (index << 1) | test as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    rng.set_stream(class as u64);
    rng
}

// ---- on-disk format ----

/// Write one split (train or test) under `dir/<split>/`:
/// `images/*.png`, `masks/*.png` and a `manifest.txt` with one record per
/// line: `sample_id<TAB>image_path<TAB>mask_path<TAB>comma-separated class ids`.
/// Mask PNGs are 8-bit grayscale holding raw class ids.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let split_dir = dir.join(split);
    std::fs::create_dir_all(split_dir.join("images"))?;
    std::fs::create_dir_all(split_dir.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        s.check_dims()?;
        let (h, w) = (s.height(), s.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    to_u8(s.image[[0, y, x]]),
                    to_u8(s.image[[1, y, x]]),
                    to_u8(s.image[[2, y, x]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let mut m = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                m.put_pixel(x as u32, y as u32, image::Luma([s.mask[[y, x]]]));
            }
        }
        let image_rel = format!("images/{}.png", s.id);
        let mask_rel = format!("masks/{}.png", s.id);
        img.save(split_dir.join(&image_rel))?;
        m.save(split_dir.join(&mask_rel))?;
        let classes: Vec<String> = s.classes_present().iter().map(|c| c.to_string()).collect();
        writeln!(
            manifest,
            "{}\t{}\t{}\t{}",
            s.id,
            image_rel,
            mask_rel,
            classes.join(",")
        )
        .expect("write to string");
    }
    std::fs::write(split_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn to_u8(normalized: f64) -> u8 {
    ((normalized + DATASET_MEAN) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Load a split previously written by [`write_split`] (or any dataset
/// following the manifest format), normalizing images on the way in.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let split_dir = dir.join(split);
    let manifest_path = split_dir.join("manifest.txt");
    let manifest = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Data(format!(
                "manifest line {}: expected at least 3 tab-separated fields",
                lineno + 1
            )));
        }
        let id = fields[0].to_string();
        let image = load_image(&split_dir.join(fields[1]))?;
        let mask = load_mask(&split_dir.join(fields[2]))?;
        let s = Sample { id, image, mask };
        s.check_dims()?;
        samples.push(s);
    }
    Ok(samples)
}

fn load_image(path: &PathBuf) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p[c] as f64 / 255.0 - DATASET_MEAN;
            }
        }
    }
    Ok(out)
}

fn load_mask(path: &PathBuf) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = img.get_pixel(x as u32, y as u32)[0];
        }
    }
    Ok(out)
}
