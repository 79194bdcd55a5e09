//! Dataset ingestion and synthesis.
//!
//! Instances carry stable ids 0..N-1 (their position in generation or file
//! order); batch shuffling permutes ids but never the storage, because the
//! memory banks address instances by id across epochs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images (N x C x H x W, row-major f64), labels, and implicit ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        split: Split,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::contract(format!(
                "dataset payload {} does not match {} labels x {per} values",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, id: usize) -> &[f64] {
        let per = self.pixels_per_image();
        &self.images[id * per..(id + 1) * per]
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Assemble a batch tensor `[len(ids), C, H, W]` in id order.
    pub fn batch_tensor(&self, ids: &[usize]) -> Result<Tensor> {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(ids.len() * per);
        for &id in ids {
            if id >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.image(id));
        }
        Tensor::new(&[ids.len(), self.channels, self.height, self.width], data)
    }

    pub fn batch_labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&id| self.labels[id]).collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic cluster images
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGeometry {
    /// Sinusoidal gratings at class-specific orientations.
    Bars,
    /// Gaussian bumps at class-specific positions.
    Blobs,
    /// Rings at class-specific radii.
    Rings,
    /// Rings whose class radii sit fractions of a pixel apart: a
    /// deliberately hard variant for experiments that need an unsaturated
    /// feature space.
    NarrowRings,
    /// Cycle through the bar/blob/ring families.
    Mixed,
}

const MIN_SYNTH_SIZE: usize = 8;

fn pattern_value(geometry: ClassGeometry, class: usize, n_classes: usize, x: f64, y: f64) -> f64 {
    // Coordinates arrive in [-1, 1].
    let kind = match geometry {
        ClassGeometry::Bars => 0,
        ClassGeometry::Blobs => 1,
        ClassGeometry::Rings => 2,
        ClassGeometry::NarrowRings => 3,
        ClassGeometry::Mixed => class % 3,
    };
    let t = (class as f64 + 1.0) / (n_classes as f64 + 1.0);
    match kind {
        0 => {
            let angle = std::f64::consts::PI * t;
            let axis = x * angle.cos() + y * angle.sin();
            let freq = 1.5 + 2.5 * t;
            0.5 + 0.45 * (std::f64::consts::PI * freq * axis).sin()
        }
        1 => {
            let angle = std::f64::consts::TAU * t;
            let (cx, cy) = (0.5 * angle.cos(), 0.5 * angle.sin());
            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            (-d2 / (2.0 * 0.18 * 0.18)).exp()
        }
        2 => {
            let radius = 0.15 + 0.7 * t;
            let d = (x * x + y * y).sqrt() - radius;
            (-d * d / (2.0 * 0.08 * 0.08)).exp()
        }
        _ => {
            let radius = 0.30 + 0.18 * t;
            let d = (x * x + y * y).sqrt() - radius;
            (-d * d / (2.0 * 0.08 * 0.08)).exp()
        }
    }
}

/// Seeded synthetic dataset: each class is a deterministic parametric
/// pattern plus per-pixel Gaussian noise. Ids run in generation order
/// (class-major), single channel.
pub fn synth_clusters(
    n_classes: usize,
    n_per_class: usize,
    image_size: usize,
    geometry: ClassGeometry,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be >= 1"));
    }
    if image_size < MIN_SYNTH_SIZE {
        return Err(Error::config(format!(
            "image size {image_size} too small for the class geometry (min {MIN_SYNTH_SIZE})"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::config("noise sigma must be >= 0"));
    }
    let mut rng = Rng::seed_from(seed);
    let per = image_size * image_size;
    let n = n_classes * n_per_class;
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let scale = 2.0 / (image_size - 1) as f64;
    for class in 0..n_classes {
        for _ in 0..n_per_class {
            for py in 0..image_size {
                for px in 0..image_size {
                    let x = px as f64 * scale - 1.0;
                    let y = py as f64 * scale - 1.0;
                    let mut v = pattern_value(geometry, class, n_classes, x, y);
                    if noise_sigma > 0.0 {
                        v += noise_sigma * rng.normal();
                    }
                    images.push(v);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(1, image_size, image_size, Split::Train, images, labels)
}

// ---------------------------------------------------------------------------
// IDX binary format
// ---------------------------------------------------------------------------

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, format!("truncated header at byte {offset}")))
}

/// Read an IDX image/label file pair (unsigned-byte payloads, big-endian
/// dimensions). Pixels are scaled to [0, 1]; ids follow file order.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();
    let ibytes = fs::read(images_path).map_err(|e| Error::io(&ipath, e))?;
    let lbytes = fs::read(labels_path).map_err(|e| Error::io(&lpath, e))?;

    let magic = read_u32_be(&ibytes, 0, &ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            &ipath,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&ibytes, 4, &ipath)? as usize;
    let h = read_u32_be(&ibytes, 8, &ipath)? as usize;
    let w = read_u32_be(&ibytes, 12, &ipath)? as usize;
    let expected = 16 + n * h * w;
    if ibytes.len() != expected {
        return Err(Error::parse(
            &ipath,
            format!("expected {expected} bytes ({n} images of {h}x{w}), found {}", ibytes.len()),
        ));
    }

    let lmagic = read_u32_be(&lbytes, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            &lpath,
            format!("bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let ln = read_u32_be(&lbytes, 4, &lpath)? as usize;
    let lexpected = 8 + ln;
    if lbytes.len() != lexpected {
        return Err(Error::parse(
            &lpath,
            format!("expected {lexpected} bytes ({ln} labels), found {}", lbytes.len()),
        ));
    }
    if ln != n {
        return Err(Error::parse(
            &lpath,
            format!("label count {ln} does not match image count {n}"),
        ));
    }

    let images: Vec<f64> = ibytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(1, h, w, Split::Train, images, labels)
}

/// Write a single-channel dataset as an IDX pair (values clamped to [0, 1]
/// and quantized to bytes). Reading the pair back is pixel-exact for data
/// that originated from bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.channels != 1 {
        return Err(Error::config("idx export supports single-channel data"));
    }
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let mut ibytes = Vec::with_capacity(16 + dataset.len() * dataset.pixels_per_image());
    ibytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ibytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    ibytes.extend_from_slice(&(dataset.height as u32).to_be_bytes());
    ibytes.extend_from_slice(&(dataset.width as u32).to_be_bytes());
    for &v in &dataset.images {
        ibytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }

    let mut lbytes = Vec::with_capacity(8 + dataset.len());
    lbytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &y in &dataset.labels {
        if y > u8::MAX as usize {
            return Err(Error::config("idx labels must fit in a byte"));
        }
        lbytes.push(y as u8);
    }

    let mut f = fs::File::create(images_path).map_err(|e| Error::io(&ipath, e))?;
    f.write_all(&ibytes).map_err(|e| Error::io(&ipath, e))?;
    let mut f = fs::File::create(labels_path).map_err(|e| Error::io(&lpath, e))?;
    f.write_all(&lbytes).map_err(|e| Error::io(&lpath, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel affine transform fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Result<Normalizer> {
        if train.is_empty() {
            return Err(Error::contract("cannot fit a normalizer on empty data"));
        }
        let c = train.channels;
        let hw = train.height * train.width;
        let count = (train.len() * hw) as f64;
        let mut mean = vec![0.0; c];
        for id in 0..train.len() {
            let img = train.image(id);
            for ch in 0..c {
                for px in 0..hw {
                    mean[ch] += img[ch * hw + px];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut var = vec![0.0; c];
        for id in 0..train.len() {
            let img = train.image(id);
            for ch in 0..c {
                for px in 0..hw {
                    let d = img[ch * hw + px] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count).sqrt().max(1e-12))
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, dataset: &mut Dataset) -> Result<()> {
        if self.mean.len() != dataset.channels {
            return Err(Error::contract("normalizer channel count mismatch"));
        }
        let c = dataset.channels;
        let hw = dataset.height * dataset.width;
        let per = c * hw;
        for i in 0..dataset.images.len() {
            let ch = (i % per) / hw;
            dataset.images[i] = (dataset.images[i] - self.mean[ch]) / self.std[ch];
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batch plans
// ---------------------------------------------------------------------------

/// One epoch's batches: a seeded permutation of all ids, chunked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch_seed: u64,
    pub batches: Vec<Vec<usize>>,
}

/// Reproducible from `(seed, epoch)` alone; the final short batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<BatchPlan> {
    let n = dataset.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!(
            "batch size {batch_size} invalid for {n} instances"
        )));
    }
    let epoch_seed = derive_seed(seed, epoch as u64);
    let mut rng = Rng::seed_from(epoch_seed);
    let mut ids: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ids);
    let batches = ids.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(BatchPlan { epoch_seed, batches })
}
