//! Synthetic co-segmentation data, image/mask I/O and metrics.
//!
//! The generator draws pairs of images that share exactly one shape class;
//! distractor shapes from other classes appear on each side but never in the
//! ground truth, and the distractor classes of the two images are disjoint so
//! the shared class is unambiguous. Everything is derived from one seed.

pub mod metrics;
pub mod pnm;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CosegError, Result};
use crate::tensor::{Element, MaskBatch, Tensor};

/// 8-bit RGB image, interleaved rows. Pixel values map to [0, 1] floats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    /// Planar `[3, h, w]` tensor scaled to [0, 1].
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let (h, w) = (self.h, self.w);
        let mut data = vec![E::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] =
                        E::of_f64(self.rgb[(y * w + x) * 3 + c] as f64 / 255.0);
                }
            }
        }
        Tensor::from_parts(vec![3, h, w], data)
    }
}

/// Stacks images into an `[n, 3, h, w]` batch tensor.
pub fn batch_images<E: Element>(images: &[&Image]) -> Result<Tensor<E>> {
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.h, img.w) != (h, w) {
            return Err(CosegError::shape_mismatch(
                "batch_images",
                &[h, w],
                &[img.h, img.w],
            ));
        }
        data.extend_from_slice(img.to_tensor::<E>().data());
    }
    Ok(Tensor::from_parts(vec![images.len(), 3, h, w], data))
}

/// Binary foreground mask; 1 = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            w,
            h,
            data: vec![0; h * w],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.foreground_count() == 0
    }
}

/// Stacks masks into a cross-entropy target batch.
pub fn batch_masks(masks: &[&Mask]) -> Result<MaskBatch> {
    let (h, w) = (masks[0].h, masks[0].w);
    let mut labels = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.h, m.w) != (h, w) {
            return Err(CosegError::shape_mismatch("batch_masks", &[h, w], &[m.h, m.w]));
        }
        labels.extend_from_slice(&m.data);
    }
    MaskBatch::new(masks.len(), h, w, labels)
}

/// Shape families acting as semantic classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| CosegError::Config(format!("unknown shape class '{}'", name)))
    }

    /// Center of the family's hue band. Each semantic class pairs a geometry
    /// with a characteristic color range, standing in for the class-specific
    /// deep-feature signatures a pretrained encoder would provide; instances
    /// still vary in hue within the band, saturation and brightness.
    fn hue_center(self) -> f64 {
        let idx = Self::ALL.iter().position(|&c| c == self).unwrap() as f64;
        (idx + 0.5) / Self::ALL.len() as f64
    }
}

/// Plain HSV to RGB, all components in [0, 1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One training/eval sample: two images sharing a class, with ground truth.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image_a: Image,
    pub image_b: Image,
    pub mask_a: Mask,
    pub mask_b: Mask,
    pub class: ShapeClass,
}

/// Generator configuration. The seed fully determines the dataset.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub canvas: usize,
    pub classes: Vec<ShapeClass>,
    /// Class excluded from train/val; still present in the test split.
    pub holdout: Option<ShapeClass>,
    /// Shared-class instances drawn per image.
    pub instances_per_class: usize,
    /// Distractor shapes per image (capped by available classes).
    pub distractors: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs_per_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            canvas: 64,
            classes: ShapeClass::ALL.to_vec(),
            holdout: Some(ShapeClass::Ring),
            instances_per_class: 1,
            distractors: 2,
            noise: 0.06,
            seed: 7,
            train_pairs: 400,
            val_pairs: 40,
            test_pairs_per_class: 10,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 24 {
            return Err(CosegError::Config(format!(
                "canvas {} too small for the shape size range (minimum 24)",
                self.canvas
            )));
        }
        if self.classes.len() < 2 {
            return Err(CosegError::Config(
                "need at least 2 classes (a common class and distractors)".to_string(),
            ));
        }
        if let Some(h) = self.holdout {
            if !self.classes.contains(&h) {
                return Err(CosegError::Config(format!(
                    "holdout class {} is not in the inventory",
                    h.name()
                )));
            }
            if self.seen_classes().len() < 2 {
                return Err(CosegError::Config(
                    "holdout leaves fewer than 2 seen classes".to_string(),
                ));
            }
        }
        if self.instances_per_class == 0 {
            return Err(CosegError::Config("instances_per_class must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn seen_classes(&self) -> Vec<ShapeClass> {
        self.classes
            .iter()
            .copied()
            .filter(|c| Some(*c) != self.holdout)
            .collect()
    }
}

/// Train/val/test sample collections.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

struct ShapeInstance {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

impl ShapeInstance {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let r = self.r;
        match self.class {
            ShapeClass::Disk => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.abs() <= r * 0.88 && dy.abs() <= r * 0.88,
            ShapeClass::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            ShapeClass::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            ShapeClass::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }

    fn bbox_overlaps(&self, other: &ShapeInstance) -> bool {
        let gap = 1.0;
        (self.cx - other.cx).abs() <= self.r + other.r + gap
            && (self.cy - other.cy).abs() <= self.r + other.r + gap
    }
}

/// Draws an instance, preferring positions whose bounding box avoids the
/// already placed shapes; after enough rejections overlap is allowed (the
/// render order keeps masks exact: the foreground shape is drawn last).
fn sample_instance(
    rng: &mut ChaCha8Rng,
    canvas: usize,
    class: ShapeClass,
    placed: &[ShapeInstance],
) -> ShapeInstance {
    let s = canvas as f64;
    let r_lo = (s * 0.16).max(6.0);
    let r_hi = (s * 0.26).max(r_lo + 1.0);
    let mut fallback = None;
    for attempt in 0..80 {
        let r = rng.random_range(r_lo..r_hi);
        let margin = r + 2.0;
        let cx = rng.random_range(margin..s - margin);
        let cy = rng.random_range(margin..s - margin);
        // Bright shapes against a dark textured background.
        // Hue within the family band; saturation and brightness free.
        let hue = class.hue_center() + rng.random_range(-0.1..0.1);
        let color = hsv_to_rgb(
            hue,
            rng.random_range(0.55..0.95),
            rng.random_range(0.65..1.0),
        );
        let inst = ShapeInstance {
            class,
            cx,
            cy,
            r,
            color,
        };
        if placed.iter().all(|p| !inst.bbox_overlaps(p)) {
            return inst;
        }
        if attempt == 0 {
            fallback = Some(inst);
        }
    }
    fallback.expect("first attempt always recorded")
}

/// Renders one image: noisy background, the listed instances on top, and the
/// mask of instances belonging to `foreground` (empty mask when none do).
fn render(
    rng: &mut ChaCha8Rng,
    canvas: usize,
    instances: &[ShapeInstance],
    foreground: Option<ShapeClass>,
) -> (Image, Mask) {
    let (h, w) = (canvas, canvas);
    let base: f64 = rng.random_range(0.06..0.2);
    let noise = rng.random_range(0.02..0.06);
    let mut rgb = vec![0u8; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0f64; 3];
            let n = rng.random_range(-noise..noise);
            for p in px.iter_mut() {
                *p = (base + n).clamp(0.0, 1.0);
            }
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            for inst in instances {
                if inst.contains(fx, fy) {
                    px = inst.color;
                    if Some(inst.class) == foreground {
                        mask[y * w + x] = 1;
                    } else {
                        mask[y * w + x] = 0;
                    }
                }
            }
            for c in 0..3 {
                rgb[(y * w + x) * 3 + c] = (px[c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (Image { w, h, rgb }, Mask { w, h, data: mask })
}

/// One image containing `instances_per_class` shapes of `class` plus
/// distractors drawn from `distractor_pool`. Distractors render first so the
/// foreground class occludes on overlap and the mask stays exact.
fn gen_one_image(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    class: Option<ShapeClass>,
    distractor_pool: &[ShapeClass],
    distractor_count: usize,
) -> Result<(Image, Mask)> {
    let mut instances = Vec::new();
    for &dc in distractor_pool.iter().take(distractor_count) {
        let inst = sample_instance(rng, cfg.canvas, dc, &instances);
        instances.push(inst);
    }
    if let Some(class) = class {
        for _ in 0..cfg.instances_per_class {
            let inst = sample_instance(rng, cfg.canvas, class, &instances);
            instances.push(inst);
        }
    }
    Ok(render(rng, cfg.canvas, &instances, class))
}

/// One pair sharing `class`. The two images' distractor classes are disjoint.
fn gen_pair(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    class: ShapeClass,
    class_pool: &[ShapeClass],
) -> Result<SamplePair> {
    let mut others: Vec<ShapeClass> = class_pool.iter().copied().filter(|&c| c != class).collect();
    others.shuffle(rng);
    let half = others.len().div_ceil(2);
    let (pool_a, pool_b) = others.split_at(half);
    let count = cfg.distractors;
    let (image_a, mask_a) = gen_one_image(rng, cfg, Some(class), pool_a, count)?;
    let (image_b, mask_b) = gen_one_image(rng, cfg, Some(class), pool_b, count)?;
    Ok(SamplePair {
        image_a,
        image_b,
        mask_a,
        mask_b,
        class,
    })
}

/// Generates the full train/val/test split. Train and val use only seen
/// classes; test covers every class (the holdout class thereby tests
/// generalization to objects unseen during training).
pub fn gen_synthetic_pairset(cfg: &SyntheticConfig) -> Result<PairSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seen = cfg.seen_classes();

    let mut train = Vec::with_capacity(cfg.train_pairs);
    for i in 0..cfg.train_pairs {
        let class = seen[i % seen.len()];
        train.push(gen_pair(&mut rng, cfg, class, &seen)?);
    }
    let mut val = Vec::with_capacity(cfg.val_pairs);
    for i in 0..cfg.val_pairs {
        let class = seen[i % seen.len()];
        val.push(gen_pair(&mut rng, cfg, class, &seen)?);
    }
    // Test distractors stay within the seen inventory: the held-out class
    // appears only as the shared class of its own pairs (the unseen-object
    // protocol), never as an unsuppressable novelty inside other pairs.
    let mut test = Vec::new();
    for &class in &cfg.classes {
        let mut pool = seen.clone();
        if !pool.contains(&class) {
            pool.push(class);
        }
        for _ in 0..cfg.test_pairs_per_class {
            test.push(gen_pair(&mut rng, cfg, class, &pool)?);
        }
    }
    Ok(PairSet { train, val, test })
}

/// A group of images for group co-segmentation: `with` images contain
/// `class` (mask = its pixels), `without` images contain only other classes
/// (mask empty). Returns (images, ground-truth masks).
pub fn gen_group(
    cfg: &SyntheticConfig,
    class: ShapeClass,
    with: usize,
    without: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<Mask>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<ShapeClass> = cfg
        .seen_classes()
        .into_iter()
        .filter(|&c| c != class)
        .collect();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..with {
        let mut pool = others.clone();
        pool.shuffle(&mut rng);
        let (img, mask) = gen_one_image(&mut rng, cfg, Some(class), &pool, cfg.distractors)?;
        images.push(img);
        masks.push(mask);
    }
    for _ in 0..without {
        let mut pool = others.clone();
        pool.shuffle(&mut rng);
        // Distractors only; one extra stands in for the missing common shape.
        let (img, mask) = gen_one_image(&mut rng, cfg, None, &pool, cfg.distractors + 1)?;
        images.push(img);
        masks.push(mask);
    }
    Ok((images, masks))
}

// ----------------------------------------------------------------------
// On-disk dataset layout
// ----------------------------------------------------------------------

/// Writes `<root>/<split>/<class>/pair-NNNN/{a.ppm,b.ppm,a_mask.pgm,b_mask.pgm}`
/// plus `<root>/manifest.tsv` (split, class, pair directory).
pub fn write_dataset(root: &Path, set: &PairSet) -> Result<()> {
    let mut manifest = String::from("split\tclass\tpair\n");
    for (split, pairs) in [("train", &set.train), ("val", &set.val), ("test", &set.test)] {
        let mut per_class: BTreeMap<ShapeClass, usize> = BTreeMap::new();
        for pair in pairs.iter() {
            let idx = per_class.entry(pair.class).or_insert(0);
            let rel = format!("{}/{}/pair-{:04}", split, pair.class.name(), idx);
            *idx += 1;
            let dir = root.join(&rel);
            fs::create_dir_all(&dir)?;
            pnm::save_ppm(&pair.image_a, &dir.join("a.ppm"))?;
            pnm::save_ppm(&pair.image_b, &dir.join("b.ppm"))?;
            pnm::save_mask(&pair.mask_a, &dir.join("a_mask.pgm"))?;
            pnm::save_mask(&pair.mask_b, &dir.join("b_mask.pgm"))?;
            manifest.push_str(&format!("{}\t{}\t{}\n", split, pair.class.name(), rel));
        }
    }
    fs::write(root.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`] back into memory.
pub fn load_dataset(root: &Path) -> Result<PairSet> {
    let manifest = fs::read_to_string(root.join("manifest.tsv"))?;
    let mut set = PairSet {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (lineno, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CosegError::Parse {
                offset: lineno,
                msg: format!("manifest line {} has {} fields, expected 3", lineno + 1, fields.len()),
            });
        }
        let class = ShapeClass::from_name(fields[1])?;
        let dir = root.join(fields[2]);
        let pair = SamplePair {
            image_a: pnm::load_ppm(&dir.join("a.ppm"))?,
            image_b: pnm::load_ppm(&dir.join("b.ppm"))?,
            mask_a: pnm::load_mask(&dir.join("a_mask.pgm"))?,
            mask_b: pnm::load_mask(&dir.join("b_mask.pgm"))?,
            class,
        };
        match fields[0] {
            "train" => set.train.push(pair),
            "val" => set.val.push(pair),
            "test" => set.test.push(pair),
            other => {
                return Err(CosegError::Parse {
                    offset: lineno,
                    msg: format!("unknown split '{}'", other),
                })
            }
        }
    }
    Ok(set)
}

/// All pair directories of a split, for listing-style commands.
pub fn list_split_dirs(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let manifest = fs::read_to_string(root.join("manifest.tsv"))?;
    Ok(manifest
        .lines()
        .skip(1)
        .filter_map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            (fields.len() == 3 && fields[0] == split).then(|| root.join(fields[2]))
        })
        .collect())
}
