//! Dataset plumbing: the CIFAR-10 binary record format, a synthetic
//! dataset in the same layout for desk-scale runs, the deterministic
//! search-time split, and batch assembly with augmentation.
//!
//! Images are stored as raw bytes (label + 3 channel planes, row-major,
//! 3073 bytes per record) and converted to normalized f32 `[N, 3, 32, 32]`
//! tensors at batch time.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ndtensor::Tensor;
use crate::{Error, Result};

pub const IMG_C: usize = 3;
pub const IMG_H: usize = 32;
pub const IMG_W: usize = 32;
pub const IMG_PIXELS: usize = IMG_C * IMG_H * IMG_W;
pub const RECORD_BYTES: usize = 1 + IMG_PIXELS;
pub const NUM_CLASSES: usize = 10;

/// Community-standard CIFAR-10 channel statistics, applied after the
/// 1/255 scaling.
pub const NORM_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const NORM_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// An in-memory labeled image set, bytes in CIFAR record order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * IMG_PIXELS {
            return Err(Error::arg(
                "dataset",
                format!("{} image bytes vs {} labels", images.len(), labels.len()),
            ));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> u32 {
        self.labels[idx] as u32
    }

    /// One image as f32 in [0, 1], channel-plane order.
    pub fn image_f32(&self, idx: usize) -> Vec<f32> {
        self.images[idx * IMG_PIXELS..(idx + 1) * IMG_PIXELS]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect()
    }

    /// Retain `idxs` only, in the given order (subset fixtures).
    pub fn subset(&self, idxs: &[u32]) -> Dataset {
        let mut images = Vec::with_capacity(idxs.len() * IMG_PIXELS);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let i = i as usize;
            images.extend_from_slice(&self.images[i * IMG_PIXELS..(i + 1) * IMG_PIXELS]);
            labels.push(self.labels[i]);
        }
        Dataset { images, labels }
    }

    /// First `n` records (deterministic desk-scale subsets).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n * IMG_PIXELS].to_vec(), labels: self.labels[..n].to_vec() }
    }
}

fn parse_records(bytes: &[u8], path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    if bytes.len() % RECORD_BYTES != 0 {
        let offset = (bytes.len() / RECORD_BYTES) * RECORD_BYTES;
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("truncated record at byte {offset}: {} trailing bytes", bytes.len() - offset),
        });
    }
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("label {label} out of range at byte {}", r * RECORD_BYTES),
            });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn load_bin_file(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?
        .read_to_end(&mut bytes)?;
    parse_records(&bytes, path, images, labels)
}

/// Load the standard CIFAR-10 binary layout from `dir`: five train batches
/// plus one test batch, 10000 records each.
pub fn load_cifar10_bin(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        load_bin_file(&dir.join(format!("data_batch_{i}.bin")), &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    load_bin_file(&dir.join("test_batch.bin"), &mut test_images, &mut test_labels)?;
    let train = Dataset::new(train_images, train_labels)?;
    let test = Dataset::new(test_images, test_labels)?;
    if train.len() != 50000 || test.len() != 10000 {
        return Err(Error::Format {
            path: dir.display().to_string(),
            detail: format!("expected 50000/10000 records, found {}/{}", train.len(), test.len()),
        });
    }
    Ok((train, test))
}

/// Write a dataset in the CIFAR-10 record layout (pipeline reuse and
/// loader tests).
pub fn write_cifar10_records(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(&ds.images[i * IMG_PIXELS..(i + 1) * IMG_PIXELS]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Gaussian class-colored images: each class gets a fixed random template,
/// samples are template + pixel noise, quantized to bytes. High SNR makes
/// the classes linearly separable; labels cycle `i % classes`.
pub fn synthetic_blobs(classes: usize, n: usize, seed: u64) -> Dataset {
    const AMP: f32 = 0.2;
    const NOISE: f32 = 0.15;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut templates = vec![0.0f32; classes * IMG_PIXELS];
    for t in templates.iter_mut() {
        *t = normal(&mut rng);
    }
    let mut images = Vec::with_capacity(n * IMG_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        let tpl = &templates[class * IMG_PIXELS..(class + 1) * IMG_PIXELS];
        for &t in tpl {
            let v = 0.5 + AMP * t + NOISE * normal(&mut rng);
            images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Dataset { images, labels }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Deterministic index split: shuffle 0..n with the spec's own seed, then
/// cut at `fraction`. Search uses 0.5 (train half / val half).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub fraction: f64,
}

impl SplitSpec {
    pub fn split(&self, n: usize) -> (Vec<u32>, Vec<u32>) {
        let mut idx: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Fisher-Yates, fixed draw order
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let cut = (n as f64 * self.fraction).floor() as usize;
        let tail = idx.split_off(cut);
        (idx, tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentSet {
    None,
    FlipCrop,
    FlipCropJitter,
}

/// Horizontal mirror, in place.
pub(crate) fn flip_h(img: &mut [f32]) {
    for plane in img.chunks_exact_mut(IMG_H * IMG_W) {
        for row in plane.chunks_exact_mut(IMG_W) {
            row.reverse();
        }
    }
}

/// Pad 4 on each side by reflection, then crop a 32x32 window at (dy, dx)
/// of the 40x40 padded plane, dy/dx in 0..=8.
pub(crate) fn pad4_crop(img: &[f32], dy: usize, dx: usize) -> Vec<f32> {
    const P: usize = 4;
    let ph = IMG_H + 2 * P;
    let pw = IMG_W + 2 * P;
    let mut out = vec![0.0f32; IMG_PIXELS];
    for c in 0..IMG_C {
        let plane = &img[c * IMG_H * IMG_W..(c + 1) * IMG_H * IMG_W];
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let (py, px) = (y + dy, x + dx);
                // reflect index into [0, 32): pad-4 reflection without repeating the edge
                let sy = reflect(py as isize - P as isize, IMG_H);
                let sx = reflect(px as isize - P as isize, IMG_W);
                out[c * IMG_H * IMG_W + y * IMG_W + x] = plane[sy * IMG_W + sx];
            }
        }
    }
    debug_assert!(ph == 40 && pw == 40);
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Brightness/contrast/saturation scaling by the given factors, clamped
/// back to [0, 1].
pub(crate) fn jitter(img: &mut [f32], fb: f32, fc: f32, fs: f32) {
    let hw = IMG_H * IMG_W;
    for v in img.iter_mut() {
        *v *= fb;
    }
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    let m = mean as f32;
    for v in img.iter_mut() {
        *v = m + (*v - m) * fc;
    }
    for p in 0..hw {
        let gray = (img[p] + img[hw + p] + img[2 * hw + p]) / 3.0;
        for c in 0..IMG_C {
            img[c * hw + p] = gray + (img[c * hw + p] - gray) * fs;
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Apply one image's augmentation draws. Consumes a fixed number of rng
/// draws per set so batch streams stay reproducible.
fn augment_image(img: &mut Vec<f32>, set: AugmentSet, rng: &mut ChaCha8Rng) {
    if set == AugmentSet::None {
        return;
    }
    if rng.gen_bool(0.5) {
        flip_h(img);
    }
    let dy = rng.gen_range(0..=8usize);
    let dx = rng.gen_range(0..=8usize);
    *img = pad4_crop(img, dy, dx);
    if set == AugmentSet::FlipCropJitter {
        let fb = rng.gen_range(0.8f32..1.2);
        let fc = rng.gen_range(0.8f32..1.2);
        let fs = rng.gen_range(0.8f32..1.2);
        jitter(img, fb, fc, fs);
    }
}

/// A normalized training batch.
pub struct ImageBatch {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

/// Assemble `idxs` into a normalized batch, with augmentation applied
/// before normalization.
pub fn make_batch(ds: &Dataset, idxs: &[u32], set: AugmentSet, rng: &mut ChaCha8Rng) -> Result<ImageBatch> {
    let n = idxs.len();
    if n == 0 {
        return Err(Error::arg("make_batch", "empty index list"));
    }
    let mut data = Vec::with_capacity(n * IMG_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for &i in idxs {
        if i as usize >= ds.len() {
            return Err(Error::arg("make_batch", format!("index {i} out of {}", ds.len())));
        }
        let mut img = ds.image_f32(i as usize);
        augment_image(&mut img, set, rng);
        for c in 0..IMG_C {
            let (m, s) = (NORM_MEAN[c], NORM_STD[c]);
            for &v in &img[c * IMG_H * IMG_W..(c + 1) * IMG_H * IMG_W] {
                data.push((v - m) / s);
            }
        }
        labels.push(ds.label(i as usize));
    }
    Ok(ImageBatch { images: Tensor::new(vec![n, IMG_C, IMG_H, IMG_W], data)?, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn blobs_are_deterministic_and_sized() {
        let a = synthetic_blobs(10, 20, 9);
        let b = synthetic_blobs(10, 20, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(synthetic_blobs(10, 0, 1).is_empty());
        assert_ne!(a, synthetic_blobs(10, 20, 10));
    }

    #[test]
    fn record_round_trip_through_files() {
        let dir = tempdir().unwrap();
        let ds = synthetic_blobs(10, 10, 3);
        let path = dir.path().join("batch.bin");
        write_cifar10_records(&ds, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 10 * RECORD_BYTES as u64);

        let mut images = Vec::new();
        let mut labels = Vec::new();
        load_bin_file(&path, &mut images, &mut labels).unwrap();
        let back = Dataset::new(images, labels).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn loader_reports_truncation_with_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 2 * RECORD_BYTES - 5]).unwrap();
        let err = load_bin_file(&path, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("byte {}", RECORD_BYTES)), "{msg}");
    }

    #[test]
    fn loader_rejects_out_of_range_labels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad_label.bin");
        let mut rec = vec![255u8];
        rec.extend_from_slice(&[0u8; IMG_PIXELS]);
        std::fs::write(&path, rec).unwrap();
        let err = load_bin_file(&path, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        assert!(err.to_string().contains("label 255"));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let spec = SplitSpec { seed: 4, fraction: 0.5 };
        let (a1, b1) = spec.split(101);
        let (a2, b2) = spec.split(101);
        assert_eq!((&a1, &b1), (&a2, &b2));
        assert_eq!(a1.len(), 50);
        assert_eq!(b1.len(), 51);
        let mut all: Vec<u32> = a1.iter().chain(b1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<u32>>());
    }

    #[test]
    fn forced_double_flip_is_identity() {
        let ds = synthetic_blobs(10, 1, 0);
        let orig = ds.image_f32(0);
        let mut img = orig.clone();
        flip_h(&mut img);
        assert_ne!(img, orig);
        flip_h(&mut img);
        assert_eq!(img, orig);
    }

    #[test]
    fn centered_crop_is_identity() {
        let ds = synthetic_blobs(10, 1, 1);
        let img = ds.image_f32(0);
        assert_eq!(pad4_crop(&img, 4, 4), img);
    }

    #[test]
    fn jitter_stays_bounded_and_in_shape() {
        let ds = synthetic_blobs(10, 1, 2);
        let mut img = ds.image_f32(0);
        jitter(&mut img, 1.19, 0.81, 1.1);
        assert_eq!(img.len(), IMG_PIXELS);
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn none_augmentation_is_identity_and_normalization_applies() {
        let ds = synthetic_blobs(10, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_batch(&ds, &[0, 1, 2, 3], AugmentSet::None, &mut rng).unwrap();
        assert_eq!(batch.images.shape, [4, 3, 32, 32]);
        assert_eq!(batch.labels, [0, 1, 2, 3]);
        let raw = ds.image_f32(0);
        let want = (raw[0] - NORM_MEAN[0]) / NORM_STD[0];
        assert!((batch.images.data[0] - want).abs() < 1e-6);
    }

    #[test]
    fn augmented_batches_are_seed_deterministic() {
        let ds = synthetic_blobs(10, 8, 6);
        let idxs: Vec<u32> = (0..8).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let b1 = make_batch(&ds, &idxs, AugmentSet::FlipCropJitter, &mut r1).unwrap();
        let b2 = make_batch(&ds, &idxs, AugmentSet::FlipCropJitter, &mut r2).unwrap();
        assert_eq!(b1.images.data, b2.images.data);
    }
}
