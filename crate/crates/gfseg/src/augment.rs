//! Weak/strong augmentation and the context-oriented cutout family.
//!
//! The weak view is a flip plus crop; the strong view adds a square cutout
//! on top of the *same* weak view, so the two stay pixel-aligned everywhere
//! outside the cutout region — a prerequisite for comparing their
//! predictions per pixel.
//!
//! Cutout placement comes in four flavors that differ only in the eligible
//! pixel set: `bcutout` samples on bounding-box perimeters (the default:
//! object/context boundaries carry the most transferable signal), `wcutout`
//! inside boxes, `ocutout` outside all boxes, `icutout` anywhere.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::{BACKGROUND_ID, IGNORE_ID};

/// Axis-aligned inclusive bounding box of one connected component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub class_id: u8,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y_min && y <= self.y_max && x >= self.x_min && x <= self.x_max
    }

    pub fn on_perimeter(&self, y: usize, x: usize) -> bool {
        self.contains(y, x)
            && (y == self.y_min || y == self.y_max || x == self.x_min || x == self.x_max)
    }
}

/// Where the cutout center may land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoutMode {
    /// Union of box-perimeter pixels.
    Bcutout,
    /// Union of box interiors (perimeter included).
    Wcutout,
    /// Pixels outside every box.
    Ocutout,
    /// The whole image.
    Icutout,
}

impl std::str::FromStr for CutoutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bcutout" => Ok(CutoutMode::Bcutout),
            "wcutout" => Ok(CutoutMode::Wcutout),
            "ocutout" => Ok(CutoutMode::Ocutout),
            "icutout" => Ok(CutoutMode::Icutout),
            other => Err(Error::Config(format!("unknown cutout mode '{other}'"))),
        }
    }
}

/// Strong-augmentation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrongAug {
    Cutout,
    Randaugment,
}

/// A weak view and the strong view derived from it.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub weak: Sample,
    pub strong: Sample,
    pub cutout_center: Option<(usize, usize)>,
}

/// Horizontal flip with probability ½, then a random crop to
/// `crop` × `crop`. Images smaller than the crop are padded first: image
/// pixels with 0 (the dataset mean), mask pixels with the ignore id.
pub fn weak_augment(sample: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> Sample {
    let flipped = if rng.gen_bool(0.5) {
        hflip(sample)
    } else {
        sample.clone()
    };
    let padded = pad_to(&flipped, crop);
    let (h, w) = (padded.height(), padded.width());
    let max_y = h - crop;
    let max_x = w - crop;
    let y0 = if max_y == 0 { 0 } else { rng.gen_range(0..=max_y) };
    let x0 = if max_x == 0 { 0 } else { rng.gen_range(0..=max_x) };
    crop_at(&padded, y0, x0, crop)
}

fn hflip(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    for y in 0..h {
        for x in 0..w {
            mask[[y, x]] = sample.mask[[y, w - 1 - x]];
            for c in 0..3 {
                image[[c, y, x]] = sample.image[[c, y, w - 1 - x]];
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

fn pad_to(sample: &Sample, min_size: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    if h >= min_size && w >= min_size {
        return sample.clone();
    }
    let nh = h.max(min_size);
    let nw = w.max(min_size);
    let mut image = Array3::<f64>::zeros((3, nh, nw));
    let mut mask = Array2::<u8>::from_elem((nh, nw), IGNORE_ID);
    for y in 0..h {
        for x in 0..w {
            mask[[y, x]] = sample.mask[[y, x]];
            for c in 0..3 {
                image[[c, y, x]] = sample.image[[c, y, x]];
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

fn crop_at(sample: &Sample, y0: usize, x0: usize, crop: usize) -> Sample {
    let mut image = Array3::<f64>::zeros((3, crop, crop));
    let mut mask = Array2::<u8>::zeros((crop, crop));
    for y in 0..crop {
        for x in 0..crop {
            mask[[y, x]] = sample.mask[[y0 + y, x0 + x]];
            for c in 0..3 {
                image[[c, y, x]] = sample.image[[c, y0 + y, x0 + x]];
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

/// One box per 4-connected component of each foreground class. Background
/// and ignore pixels produce no boxes. Boxes come out ordered by class id,
/// then by scan order of the component's first pixel.
pub fn extract_boxes(mask: &Array2<u8>) -> Vec<BoundingBox> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut boxes = Vec::new();
    let mut classes: Vec<u8> = Vec::new();
    for &v in mask.iter() {
        if v != BACKGROUND_ID && v != IGNORE_ID && !classes.contains(&v) {
            classes.push(v);
        }
    }
    classes.sort_unstable();
    let mut visited = vec![false; h * w];
    for class in classes {
        visited.iter_mut().for_each(|v| *v = false);
        for sy in 0..h {
            for sx in 0..w {
                if mask[[sy, sx]] != class || visited[sy * w + sx] {
                    continue;
                }
                // flood-fill this component
                let (mut y_min, mut y_max, mut x_min, mut x_max) = (sy, sy, sx, sx);
                let mut stack = vec![(sy, sx)];
                visited[sy * w + sx] = true;
                while let Some((y, x)) = stack.pop() {
                    y_min = y_min.min(y);
                    y_max = y_max.max(y);
                    x_min = x_min.min(x);
                    x_max = x_max.max(x);
                    let neighbors = [
                        (y.wrapping_sub(1), x),
                        (y + 1, x),
                        (y, x.wrapping_sub(1)),
                        (y, x + 1),
                    ];
                    for (ny, nx) in neighbors {
                        if ny < h && nx < w && mask[[ny, nx]] == class && !visited[ny * w + nx] {
                            visited[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
                boxes.push(BoundingBox {
                    class_id: class,
                    x_min,
                    y_min,
                    x_max,
                    y_max,
                });
            }
        }
    }
    boxes
}

/// Pick a cutout center uniformly from the mode's eligible pixel set.
/// Returns the chosen pixel as (y, x) plus the mode actually used — an empty
/// eligible set falls back to [`CutoutMode::Icutout`] with a warning.
pub fn sample_cutout_center(
    boxes: &[BoundingBox],
    image_size: (usize, usize),
    mode: CutoutMode,
    rng: &mut ChaCha8Rng,
) -> ((usize, usize), CutoutMode) {
    let (h, w) = image_size;
    let eligible: Vec<(usize, usize)> = match mode {
        CutoutMode::Icutout => Vec::new(), // handled below without materializing
        CutoutMode::Bcutout => {
            let mut set = std::collections::BTreeSet::new();
            for b in boxes {
                for x in b.x_min..=b.x_max {
                    set.insert((b.y_min, x));
                    set.insert((b.y_max, x));
                }
                for y in b.y_min..=b.y_max {
                    set.insert((y, b.x_min));
                    set.insert((y, b.x_max));
                }
            }
            set.into_iter().collect()
        }
        CutoutMode::Wcutout => {
            let mut inside = vec![false; h * w];
            for b in boxes {
                for y in b.y_min..=b.y_max {
                    for x in b.x_min..=b.x_max {
                        inside[y * w + x] = true;
                    }
                }
            }
            collect_marked(&inside, h, w, true)
        }
        CutoutMode::Ocutout => {
            let mut inside = vec![false; h * w];
            for b in boxes {
                for y in b.y_min..=b.y_max {
                    for x in b.x_min..=b.x_max {
                        inside[y * w + x] = true;
                    }
                }
            }
            collect_marked(&inside, h, w, false)
        }
    };
    if mode == CutoutMode::Icutout {
        let y = rng.gen_range(0..h);
        let x = rng.gen_range(0..w);
        return ((y, x), CutoutMode::Icutout);
    }
    if eligible.is_empty() {
        log::warn!("cutout mode {mode:?} has no eligible pixels; falling back to icutout");
        let y = rng.gen_range(0..h);
        let x = rng.gen_range(0..w);
        return ((y, x), CutoutMode::Icutout);
    }
    (eligible[rng.gen_range(0..eligible.len())], mode)
}

fn collect_marked(marks: &[bool], h: usize, w: usize, want: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if marks[y * w + x] == want {
                out.push((y, x));
            }
        }
    }
    out
}

/// Zero out (i.e. fill with the dataset mean) a `size`×`size` square around
/// `center`, clipped at the borders. Even sizes extend size/2 up/left and
/// size/2 − 1 down/right of the center. The mask is never touched.
pub fn apply_cutout(image: &Array3<f64>, center: (usize, usize), size: usize) -> Array3<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (cy, cx) = center;
    let half = (size / 2) as isize;
    let y0 = (cy as isize - half).max(0) as usize;
    let x0 = (cx as isize - half).max(0) as usize;
    let y1 = ((cy as isize - half + size as isize - 1).min(h as isize - 1)) as usize;
    let x1 = ((cx as isize - half + size as isize - 1).min(w as isize - 1)) as usize;
    let mut out = image.clone();
    for y in y0..=y1 {
        for x in x0..=x1 {
            for c in 0..3 {
                out[[c, y, x]] = 0.0;
            }
        }
    }
    out
}

/// Build the strong view from a weak view: boxes from the weak mask, a
/// center in the configured mode, then the cutout. Geometry is untouched.
pub fn strong_augment(
    weak: &Sample,
    mode: CutoutMode,
    cutout_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Sample, (usize, usize)) {
    let boxes = extract_boxes(&weak.mask);
    let (center, _) = sample_cutout_center(&boxes, (weak.height(), weak.width()), mode, rng);
    let image = apply_cutout(&weak.image, center, cutout_size);
    (
        Sample {
            id: weak.id.clone(),
            image,
            mask: weak.mask.clone(),
        },
        center,
    )
}

/// Weak view + strong view in one call, with the cutout center recorded.
pub fn augment_pair(
    sample: &Sample,
    crop: usize,
    mode: CutoutMode,
    cutout_size: usize,
    strong_kind: StrongAug,
    rng: &mut ChaCha8Rng,
) -> AugmentedPair {
    let weak = weak_augment(sample, crop, rng);
    match strong_kind {
        StrongAug::Cutout => {
            let (strong, center) = strong_augment(&weak, mode, cutout_size, rng);
            AugmentedPair {
                weak,
                strong,
                cutout_center: Some(center),
            }
        }
        StrongAug::Randaugment => {
            let strong = randaugment_variant(&weak, rng);
            AugmentedPair {
                weak,
                strong,
                cutout_center: None,
            }
        }
    }
}

/// Photometric strong augmentation: two ops drawn from
/// {contrast, brightness, sharpness} at random magnitudes. Geometry and mask
/// are untouched; values are clamped to the normalized range.
pub fn randaugment_variant(weak: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let mut image = weak.image.clone();
    for _ in 0..2 {
        let op = rng.gen_range(0..3u8);
        let magnitude: f64 = rng.gen_range(0.0..0.5);
        let signed = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
        image = match op {
            0 => photometric_contrast(&image, signed),
            1 => photometric_brightness(&image, signed),
            _ => photometric_sharpness(&image, signed),
        };
    }
    Sample {
        id: weak.id.clone(),
        image,
        mask: weak.mask.clone(),
    }
}

const NORM_MIN: f64 = -crate::data::DATASET_MEAN;
const NORM_MAX: f64 = 1.0 - crate::data::DATASET_MEAN;

/// Scale about the normalized zero point (the dataset mean).
pub fn photometric_contrast(image: &Array3<f64>, magnitude: f64) -> Array3<f64> {
    image.mapv(|v| (v * (1.0 + magnitude)).clamp(NORM_MIN, NORM_MAX))
}

pub fn photometric_brightness(image: &Array3<f64>, magnitude: f64) -> Array3<f64> {
    image.mapv(|v| (v + magnitude).clamp(NORM_MIN, NORM_MAX))
}

/// Unsharp masking against a 3×3 box blur; magnitude 0 is the identity.
pub fn photometric_sharpness(image: &Array3<f64>, magnitude: f64) -> Array3<f64> {
    if magnitude == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                            sum += image[[c, ny as usize, nx as usize]];
                            count += 1.0;
                        }
                    }
                }
                let blur = sum / count;
                let v = image[[c, y, x]];
                out[[c, y, x]] = (v + magnitude * (v - blur)).clamp(NORM_MIN, NORM_MAX);
            }
        }
    }
    out
}

/// Number of pixels at which two images differ (any channel).
pub fn diff_pixels(a: &Array3<f64>, b: &Array3<f64>) -> usize {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if (0..3).any(|c| a[[c, y, x]] != b[[c, y, x]]) {
                count += 1;
            }
        }
    }
    count
}
