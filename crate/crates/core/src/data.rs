//! Synthetic 4-class surface-defect images, classical augmentations, and
//! dataset assembly with a deterministic stratified train/test split.
//!
//! Pixels live in [−1, 1]. Each class has a distinct base luminance band and
//! texture so the set is learnably separable at small resolutions:
//! corrosion is a dark field with bright (and a few dark) speckles, dents
//! are a light field with broad radial depressions, scratches are a neutral
//! field with thin dark line segments, and smooth is a plain light field.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Number of defect classes.
pub const CLASS_COUNT: usize = 4;
/// Square resolutions the generator supports.
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [8, 16, 32];

/// The four surface classes with stable integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DefectClass {
    Corrosion = 0,
    Dent = 1,
    Scratch = 2,
    Smooth = 3,
}

impl DefectClass {
    pub const ALL: [DefectClass; CLASS_COUNT] = [
        DefectClass::Corrosion,
        DefectClass::Dent,
        DefectClass::Scratch,
        DefectClass::Smooth,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::param(format!("class code {code} outside 0..{CLASS_COUNT}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::Corrosion => "corrosion",
            DefectClass::Dent => "dent",
            DefectClass::Scratch => "scratch",
            DefectClass::Smooth => "smooth",
        }
    }
}

// ── Deterministic per-image seeding ──────────────────────────────────

/// splitmix64 finalizer: decorrelates combined seed words so derived
/// streams (per image, per training step) are independent.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for image `index` of `class` under the run seed.
pub fn image_seed(seed: u64, class: DefectClass, index: usize) -> u64 {
    mix64(mix64(seed ^ mix64(class.code() as u64 + 1)) ^ index as u64)
}

// ── Generation ───────────────────────────────────────────────────────

fn check_resolution(h: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&h) {
        Ok(())
    } else {
        Err(Error::param(format!("unsupported resolution {h} (square {SUPPORTED_RESOLUTIONS:?})")))
    }
}

fn base_field(h: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.gen_range(lo..hi);
    let noise = rand_distr::Normal::new(0.0, 0.02).expect("valid sigma");
    (0..h * h).map(|_| base + noise.sample(rng)).collect()
}

/// Distance from pixel center `(px, py)` to the segment `(x0,y0)–(x1,y1)`.
fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// One synthetic image of `class` as a `(1, h, h)` tensor in [−1, 1],
/// fully determined by `rng`.
pub fn gen_image(class: DefectClass, h: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    check_resolution(h)?;
    let hf = h as f64;
    let mut img = match class {
        DefectClass::Smooth => base_field(h, 0.02, 0.12, rng),
        DefectClass::Dent => {
            let mut img = base_field(h, 0.30, 0.40, rng);
            let dents = rng.gen_range(2..=3u32);
            for _ in 0..dents {
                let cx = rng.gen_range(0.2 * hf..0.8 * hf);
                let cy = rng.gen_range(0.2 * hf..0.8 * hf);
                let sigma = rng.gen_range(0.08 * hf..0.16 * hf);
                let depth = rng.gen_range(0.4..0.7);
                for y in 0..h {
                    for x in 0..h {
                        let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        img[y * h + x] -= depth * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            img
        }
        DefectClass::Scratch => {
            let mut img = base_field(h, -0.05, 0.05, rng);
            let lines = rng.gen_range(1..=2u32);
            for _ in 0..lines {
                // The midpoint stays in the central 40% box so the ±4-pixel
                // augmentation crop can never push the whole line out of view;
                // a scratch that vanishes under cropping is indistinguishable
                // from the smooth class.
                let (mx, my) =
                    (rng.gen_range(0.3 * hf..0.7 * hf), rng.gen_range(0.3 * hf..0.7 * hf));
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let len = rng.gen_range(0.6 * hf..1.2 * hf);
                let (hx, hy) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
                let (x0, y0) = (mx - hx, my - hy);
                let (x1, y1) = (mx + hx, my + hy);
                let depth = rng.gen_range(0.5..0.8);
                let half_width = rng.gen_range(0.5..0.9);
                for y in 0..h {
                    for x in 0..h {
                        let d = segment_distance(x as f64, y as f64, x0, y0, x1, y1);
                        // Soft coverage ramp: full depth on the spine, fading
                        // to zero one pixel outside the half-width.
                        let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
                        img[y * h + x] -= depth * cover;
                    }
                }
            }
            img
        }
        DefectClass::Corrosion => {
            let mut img = base_field(h, -0.25, -0.15, rng);
            let density = rng.gen_range(0.04..0.06);
            for v in img.iter_mut() {
                if rng.gen_bool(density) {
                    if rng.gen_bool(0.75) {
                        *v += rng.gen_range(0.5..0.9);
                    } else {
                        *v -= rng.gen_range(0.3..0.6);
                    }
                }
            }
            img
        }
    };
    for v in img.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Tensor::new(&[1, h, h], img)
}

/// `count` images of one class as `(count, 1, h, h)`, each image seeded
/// independently from `(seed, class, index)`.
pub fn gen_synthetic(class: DefectClass, count: usize, h: usize, seed: u64) -> Result<Tensor> {
    check_resolution(h)?;
    let mut data = Vec::with_capacity(count * h * h);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, class, i));
        data.extend_from_slice(gen_image(class, h, &mut rng)?.data());
    }
    Tensor::new(&[count, 1, h, h], data)
}

// ── Augmentations ────────────────────────────────────────────────────

/// Mirrors the width (last) axis. An involution.
pub fn augment_flip(img: &Tensor) -> Result<Tensor> {
    let shape = img.shape();
    let w = *shape
        .last()
        .ok_or_else(|| Error::shape("augment_flip", "rank-0 tensor"))?;
    if w == 0 {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(img.numel());
    for row in img.data().chunks_exact(w) {
        data.extend(row.iter().rev());
    }
    Tensor::new(shape, data)
}

fn hw_extents(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least (h, w), got {shape:?}")));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Replicate-pads the two trailing axes by `pad`, then crops an h×w window
/// whose top-left corner sits at `(dy, dx)` in padded coordinates. The
/// centered window `(pad, pad)` reproduces the input exactly.
pub fn augment_edge_pad_crop(img: &Tensor, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    let (h, w) = hw_extents(img, "augment_edge_pad")?;
    if dy > 2 * pad || dx > 2 * pad {
        return Err(Error::param(format!(
            "crop offset ({dy}, {dx}) outside 0..={} for pad {pad}",
            2 * pad
        )));
    }
    if h == 0 || w == 0 {
        return Ok(img.clone());
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(img.numel());
    for src in img.data().chunks_exact(plane) {
        for y in 0..h {
            // Position in the virtual padded image, clamped back into the
            // source (replicate semantics).
            let sy = (y + dy).saturating_sub(pad).min(h - 1);
            for x in 0..w {
                let sx = (x + dx).saturating_sub(pad).min(w - 1);
                data.push(src[sy * w + sx]);
            }
        }
    }
    Tensor::new(img.shape(), data)
}

/// Replicate-pad then center-crop back to the original extents — the
/// centered window makes this the identity for every pad.
pub fn augment_edge_pad(img: &Tensor, pad: usize) -> Result<Tensor> {
    augment_edge_pad_crop(img, pad, pad, pad)
}

/// Scales deviations from the per-image mean by `factor`, clamping back
/// into [−1, 1]. Factor 1 is the identity for in-range inputs.
pub fn augment_contrast(img: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::param(format!("contrast factor must be positive and finite, got {factor}")));
    }
    if img.numel() == 0 {
        return Ok(img.clone());
    }
    let mean = img.data().iter().sum::<f64>() / img.numel() as f64;
    img.map(|v| (mean + factor * (v - mean)).clamp(-1.0, 1.0))
}

/// One random contrast view: flip with probability ½, random 4-pixel
/// replicate-pad crop, then contrast in [0.7, 1.3]. Draws a fixed number of
/// random values so view streams stay aligned.
pub fn augment_random(img: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=8usize);
    let dx = rng.gen_range(0..=8usize);
    let factor = rng.gen_range(0.7..1.3);
    let mut out = if flip { augment_flip(img)? } else { img.clone() };
    out = augment_edge_pad_crop(&out, 4, dy, dx)?;
    augment_contrast(&out, factor)
}

// ── Dataset assembly ─────────────────────────────────────────────────

/// Images, labels, and a deterministic stratified split.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `(n, 1, h, h)` batch in [−1, 1].
    pub images: Tensor,
    /// Class code per image.
    pub labels: Vec<usize>,
    /// Indices into `images`/`labels` forming the training set.
    pub train_idx: Vec<usize>,
    /// Indices forming the held-out set; disjoint from `train_idx`.
    pub test_idx: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copies the images at `indices` into a fresh `(k, 1, h, h)` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.images.shape();
        let chunk = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(indices.len() * chunk);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::param(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * chunk..(i + 1) * chunk]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(&[indices.len(), shape[1], shape[2], shape[3]], data)?;
        Ok((images, labels))
    }
}

/// Generates `counts[k]` images per class, shuffles them into one batch,
/// and splits stratified so each class contributes `train_frac` of its
/// images to the training set.
pub fn build_dataset(counts: &[usize; CLASS_COUNT], h: usize, seed: u64, train_frac: f64) -> Result<LabeledDataset> {
    check_resolution(h)?;
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::param(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::param("every class needs at least one image"));
    }
    let total: usize = counts.iter().sum();

    let mut per_class: Vec<Tensor> = Vec::with_capacity(CLASS_COUNT);
    for class in DefectClass::ALL {
        per_class.push(gen_synthetic(class, counts[class.code()], h, seed)?);
    }

    // Global deterministic shuffle of (class, within-class index) pairs.
    let mut order: Vec<(usize, usize)> = (0..CLASS_COUNT)
        .flat_map(|k| (0..counts[k]).map(move |i| (k, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xDA7A_5E7));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }

    let plane = h * h;
    let mut data = Vec::with_capacity(total * plane);
    let mut labels = Vec::with_capacity(total);
    for &(k, i) in &order {
        data.extend_from_slice(&per_class[k].data()[i * plane..(i + 1) * plane]);
        labels.push(k);
    }

    // Stratified split over the shuffled order: the first round(frac·count)
    // occurrences of each class go to train.
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut taken = [0usize; CLASS_COUNT];
    let quota: Vec<usize> = (0..CLASS_COUNT)
        .map(|k| (((counts[k] as f64) * train_frac).round() as usize).clamp(1, counts[k]))
        .collect();
    for (idx, &label) in labels.iter().enumerate() {
        if taken[label] < quota[label] {
            taken[label] += 1;
            train_idx.push(idx);
        } else {
            test_idx.push(idx);
        }
    }

    Ok(LabeledDataset {
        images: Tensor::new(&[total, 1, h, h], data)?,
        labels,
        train_idx,
        test_idx,
    })
}

// ── Directory I/O ────────────────────────────────────────────────────

/// Writes a dataset directory: one PGM per image under `class_<k>/`, a
/// `labels.csv` (path,class), a `split.csv` (index,train|test), and the
/// consolidated `dataset.dft` the pipeline stages load.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let dir = dir.as_ref();
    io::ensure_dir(dir)?;
    let shape = ds.images.shape();
    let (h, plane) = (shape[2], shape[2] * shape[3]);

    let mut per_class_seen = [0usize; CLASS_COUNT];
    let mut labels_csv = String::from("path,class\n");
    for (idx, &label) in ds.labels.iter().enumerate() {
        let class_dir = dir.join(format!("class_{label}"));
        io::ensure_dir(&class_dir)?;
        let name = format!("img_{}.pgm", per_class_seen[label]);
        per_class_seen[label] += 1;
        let img = Tensor::new(&[h, h], ds.images.data()[idx * plane..(idx + 1) * plane].to_vec())?;
        io::save_pgm(class_dir.join(&name), &img)?;
        labels_csv.push_str(&format!("class_{label}/{name},{label}\n"));
    }
    io::write_text(dir.join("labels.csv"), &labels_csv)?;

    let mut split_csv = String::from("index,split\n");
    let mut split = vec!["test"; ds.len()];
    for &i in &ds.train_idx {
        split[i] = "train";
    }
    for (i, s) in split.iter().enumerate() {
        split_csv.push_str(&format!("{i},{s}\n"));
    }
    io::write_text(dir.join("split.csv"), &split_csv)?;

    let as_f64 = |v: &[usize]| Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect());
    let sections = vec![
        ("images".to_string(), ds.images.clone()),
        ("labels".to_string(), as_f64(&ds.labels)?),
        ("train_idx".to_string(), as_f64(&ds.train_idx)?),
        ("test_idx".to_string(), as_f64(&ds.test_idx)?),
    ];
    io::save_dft(dir.join("dataset.dft"), &sections, io::DType::F32)
}

/// Loads the consolidated `dataset.dft` written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = dir.as_ref().join("dataset.dft");
    let sections = io::load_dft(&path)?;
    let find = |name: &str| -> Result<&Tensor> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::state(format!("dataset file is missing the '{name}' section")))
    };
    let images = find("images")?.clone();
    if images.shape().len() != 4 {
        return Err(Error::state(format!("dataset images must be rank 4, got {:?}", images.shape())));
    }
    let to_usize = |t: &Tensor| -> Vec<usize> { t.data().iter().map(|&v| v as usize).collect() };
    let labels = to_usize(find("labels")?);
    if labels.len() != images.shape()[0] {
        return Err(Error::state(format!(
            "{} labels for {} images",
            labels.len(),
            images.shape()[0]
        )));
    }
    if labels.iter().any(|&l| l >= CLASS_COUNT) {
        return Err(Error::state("label outside the 4 class codes"));
    }
    Ok(LabeledDataset {
        images,
        labels,
        train_idx: to_usize(find("train_idx")?),
        test_idx: to_usize(find("test_idx")?),
    })
}
