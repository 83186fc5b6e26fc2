//! Synthetic two-part objects: a small class-specific checkered patch sitting
//! on one end of a large body whose shape and texture ignore the class.
//!
//! Sample `i` of a split draws from its own substream, so any subset can be
//! regenerated independently of the rest.

use rand::Rng;

use crate::backbone::{Example, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{substream, Domain, StreamRng};
use crate::tensor::Tensor;
use crate::wsol::{iou, BoundingBox};

/// Patch colours; class `c` uses entry `c % 8` with a cell size that grows every 8 classes.
const PATCH_PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.90],
    [0.10, 0.90, 0.90],
    [1.00, 0.55, 0.05],
    [0.98, 0.98, 0.98],
];
const PATCH_DARK: [f64; 3] = [0.05, 0.05, 0.05];

/// Muted body colours shared by every class.
const BODY_PALETTE: [[f64; 3]; 6] = [
    [0.62, 0.52, 0.38],
    [0.45, 0.50, 0.30],
    [0.40, 0.45, 0.55],
    [0.50, 0.35, 0.28],
    [0.55, 0.42, 0.52],
    [0.58, 0.58, 0.50],
];
const BACKGROUND: f64 = 0.3;

/// Maximum number of classes with a distinct patch pattern.
pub const MAX_CLASSES: usize = 2 * PATCH_PALETTE.len();

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Inclusive side range of the square patch.
    pub patch_size: (usize, usize),
    /// Inclusive range of the body's long side.
    pub body_length: (usize, usize),
    /// Range of short side / long side.
    pub body_aspect: (f64, f64),
    /// Half-width of the uniform per-pixel background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            train_per_class: 250,
            test_per_class: 100,
            image_size: 64,
            patch_size: (8, 12),
            body_length: (24, 40),
            body_aspect: (0.4, 0.6),
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return fail(format!("n_classes must be in 1..={MAX_CLASSES}, got {}", self.n_classes));
        }
        let (p0, p1) = self.patch_size;
        let (b0, b1) = self.body_length;
        let (a0, a1) = self.body_aspect;
        if p0 < 2 || p0 > p1 {
            return fail(format!("bad patch size range {p0}..={p1}"));
        }
        if b0 == 0 || b0 > b1 {
            return fail(format!("bad body length range {b0}..={b1}"));
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return fail(format!("bad body aspect range {a0}..{a1}"));
        }
        if b1 + p1.div_ceil(2) > self.image_size || p1 > self.image_size {
            return fail(format!(
                "objects up to {} px do not fit a {} px image",
                b1 + p1.div_ceil(2),
                self.image_size
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return fail(format!("noise must be in [0, 0.5], got {}", self.noise));
        }
        Ok(())
    }
}

/// One labelled image with its localization ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSample {
    /// `[3,S,S]` in `[0,1]`.
    pub image: Tensor,
    pub label: usize,
    pub gt_box: BoundingBox,
    /// Row-major `S x S` object mask; diagnostics only.
    pub mask: Vec<bool>,
    /// The discriminative patch alone.
    pub patch_box: BoundingBox,
    /// Body pixels (patch excluded), row-major.
    pub body_mask: Vec<bool>,
}

impl Example for GtSample {
    fn image(&self) -> &Tensor {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}

/// Tight box around the set pixels of a row-major mask.
pub fn mask_box(mask: &[bool], width: usize) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => BoundingBox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            Some(b) => BoundingBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    b
}

/// Colour of patch pixel `(dx, dy)` for a class.
pub fn patch_color(class_idx: usize, dx: usize, dy: usize) -> [f64; 3] {
    let cell = 2 + class_idx / PATCH_PALETTE.len();
    if (dx / cell + dy / cell) % 2 == 0 {
        PATCH_PALETTE[class_idx % PATCH_PALETTE.len()]
    } else {
        PATCH_DARK
    }
}

#[derive(Debug, Clone, Copy)]
enum BodyShape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
enum BodyTexture {
    Solid,
    HStripes,
    VStripes,
    Speckle,
}

struct Body {
    shape: BodyShape,
    texture: BodyTexture,
    color: [f64; 3],
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Body {
    fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        match self.shape {
            BodyShape::Rect => true,
            BodyShape::Ellipse => {
                let u = (x - self.x0) as f64 + 0.5 - self.w as f64 / 2.0;
                let v = (y - self.y0) as f64 + 0.5 - self.h as f64 / 2.0;
                let (a, b) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }

    fn shade(&self, x: usize, y: usize, rng: &mut StreamRng) -> [f64; 3] {
        let f = match self.texture {
            BodyTexture::Solid => 1.0,
            BodyTexture::HStripes => [1.0, 0.75][(y / 3) % 2],
            BodyTexture::VStripes => [1.0, 0.75][(x / 3) % 2],
            BodyTexture::Speckle => rng.random_range(0.7..=1.0),
        };
        self.color.map(|c| c * f)
    }
}

/// Draws one sample of class `class_idx`.
pub fn generate_sample(spec: &SynthSpec, class_idx: usize, rng: &mut StreamRng) -> Result<GtSample> {
    if class_idx >= spec.n_classes {
        return Err(Error::Contract(format!(
            "class {class_idx} out of range for {} classes",
            spec.n_classes
        )));
    }
    let s = spec.image_size;
    let long = rng.random_range(spec.body_length.0..=spec.body_length.1);
    let aspect = rng.random_range(spec.body_aspect.0..=spec.body_aspect.1);
    let short = ((long as f64 * aspect).round() as usize).max(1);
    let p = rng.random_range(spec.patch_size.0..=spec.patch_size.1);
    let horizontal = rng.random_bool(0.5);
    let far_end = rng.random_bool(0.5);
    let shape = if rng.random_bool(0.5) {
        BodyShape::Rect
    } else {
        BodyShape::Ellipse
    };
    let texture = [
        BodyTexture::Solid,
        BodyTexture::HStripes,
        BodyTexture::VStripes,
        BodyTexture::Speckle,
    ][rng.random_range(0..4)];
    let color = BODY_PALETTE[rng.random_range(0..BODY_PALETTE.len())];

    // Object frame along the long axis: the patch is centred on one end of the
    // body and sticks out by half its size.
    let half = p / 2;
    let along_extent = long + (p - half);
    let across_extent = short.max(p);
    let (ext_x, ext_y) = if horizontal {
        (along_extent, across_extent)
    } else {
        (across_extent, along_extent)
    };
    let ox = rng.random_range(0..=s - ext_x);
    let oy = rng.random_range(0..=s - ext_y);
    let body_along = if far_end { 0 } else { p - half };
    let patch_along = if far_end { long - half } else { 0 };
    let body_across = (across_extent - short) / 2;
    let patch_across = (across_extent - p) / 2;
    let (body, px, py) = if horizontal {
        (
            (ox + body_along, oy + body_across, long, short),
            ox + patch_along,
            oy + patch_across,
        )
    } else {
        (
            (ox + body_across, oy + body_along, short, long),
            ox + patch_across,
            oy + patch_along,
        )
    };
    let body = Body {
        shape,
        texture,
        color,
        x0: body.0,
        y0: body.1,
        w: body.2,
        h: body.3,
    };
    let patch_box = BoundingBox::new(px, py, px + p - 1, py + p - 1)?;

    let mut image = vec![0.0; IMAGE_CHANNELS * s * s];
    let mut mask = vec![false; s * s];
    let mut body_mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let rgb = if patch_box.contains(x, y) {
                mask[i] = true;
                patch_color(class_idx, x - px, y - py)
            } else if body.covers(x, y) {
                mask[i] = true;
                body_mask[i] = true;
                body.shade(x, y, rng)
            } else {
                [BACKGROUND; 3]
            };
            for (c, v) in rgb.iter().enumerate() {
                let n = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                image[c * s * s + i] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    let gt_box = mask_box(&mask, s).expect("object has at least the patch");
    Ok(GtSample {
        image: Tensor::new(vec![IMAGE_CHANNELS, s, s], image)?,
        label: class_idx,
        gt_box,
        mask,
        patch_box,
        body_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn domain(self) -> Domain {
        match self {
            Split::Train => Domain::TrainSample,
            Split::Test => Domain::TestSample,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Sample `index` of a split; classes cycle so every split is balanced.
pub fn sample_at(spec: &SynthSpec, split: Split, index: usize) -> Result<GtSample> {
    let mut rng = substream(spec.seed, split.domain(), index as u64);
    generate_sample(spec, index % spec.n_classes, &mut rng)
}

/// Summary statistics written next to a dataset dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub n_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub mean_box_area: f64,
    pub mean_patch_area: f64,
    /// Mean of per-sample gt-box area / patch area.
    pub mean_area_ratio: f64,
    /// Mean IoU of the patch box against the gt box.
    pub mean_patch_iou: f64,
}

impl Manifest {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "n_classes={}\nimage_size={}\nseed={}\ntrain_counts={}\ntest_counts={}\n\
             mean_box_area={}\nmean_patch_area={}\nmean_area_ratio={}\nmean_patch_iou={}\n",
            self.n_classes,
            self.image_size,
            self.seed,
            join(&self.train_counts),
            join(&self.test_counts),
            self.mean_box_area,
            self.mean_patch_area,
            self.mean_area_ratio,
            self.mean_patch_iou,
        )
    }
}

impl Manifest {
    /// Reads the output of [`Manifest::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected key=value", i + 1)))?;
            kv.insert(k.trim(), v.trim());
        }
        fn get<T: std::str::FromStr>(kv: &std::collections::BTreeMap<&str, &str>, key: &str) -> Result<T> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest lacks a valid '{key}'")))
        }
        let list = |key: &str| -> Result<Vec<usize>> {
            let raw: String = get(&kv, key)?;
            raw.split(',')
                .map(|c| c.parse().map_err(|_| Error::Config(format!("bad count in '{key}'"))))
                .collect()
        };
        Ok(Self {
            n_classes: get(&kv, "n_classes")?,
            image_size: get(&kv, "image_size")?,
            seed: get(&kv, "seed")?,
            train_counts: list("train_counts")?,
            test_counts: list("test_counts")?,
            mean_box_area: get(&kv, "mean_box_area")?,
            mean_patch_area: get(&kv, "mean_patch_area")?,
            mean_area_ratio: get(&kv, "mean_area_ratio")?,
            mean_patch_iou: get(&kv, "mean_patch_iou")?,
        })
    }
}

pub const AREA_RATIO_RANGE: (f64, f64) = (3.0, 8.0);
pub const MAX_PATCH_IOU: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<GtSample>,
    pub test: Vec<GtSample>,
    pub manifest: Manifest,
}

fn counts(samples: &[GtSample], n_classes: usize) -> Vec<usize> {
    let mut c = vec![0; n_classes];
    for s in samples {
        c[s.label] += 1;
    }
    c
}

/// Generates both splits and checks the geometry statistics.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let split = |sp: Split, per_class: usize| -> Result<Vec<GtSample>> {
        (0..per_class * spec.n_classes)
            .map(|i| sample_at(spec, sp, i))
            .collect()
    };
    let train = split(Split::Train, spec.train_per_class)?;
    let test = split(Split::Test, spec.test_per_class)?;
    let all: Vec<&GtSample> = train.iter().chain(&test).collect();
    let n = all.len().max(1) as f64;
    let mean = |f: &dyn Fn(&GtSample) -> f64| all.iter().map(|s| f(s)).sum::<f64>() / n;
    let manifest = Manifest {
        n_classes: spec.n_classes,
        image_size: spec.image_size,
        seed: spec.seed,
        train_counts: counts(&train, spec.n_classes),
        test_counts: counts(&test, spec.n_classes),
        mean_box_area: mean(&|s| s.gt_box.area() as f64),
        mean_patch_area: mean(&|s| s.patch_box.area() as f64),
        mean_area_ratio: mean(&|s| s.gt_box.area() as f64 / s.patch_box.area() as f64),
        mean_patch_iou: mean(&|s| iou(&s.patch_box, &s.gt_box)),
    };
    if !all.is_empty() {
        let (lo, hi) = AREA_RATIO_RANGE;
        if !(lo..=hi).contains(&manifest.mean_area_ratio) {
            return Err(Error::Contract(format!(
                "mean gt/patch area ratio {} outside [{lo}, {hi}]",
                manifest.mean_area_ratio
            )));
        }
        if manifest.mean_patch_iou >= MAX_PATCH_IOU {
            return Err(Error::Contract(format!(
                "mean patch-only IoU {} not below {MAX_PATCH_IOU}",
                manifest.mean_patch_iou
            )));
        }
    }
    Ok(SynthDataset {
        train,
        test,
        manifest,
    })
}
