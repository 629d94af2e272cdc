//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, per-channel
//! normalization, seeded batching and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};
use crate::tensor::FloatTensor;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_BATCH: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization `(p − mean) / std` over raw pixel values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of raw `N×C×H×W` bytes.
    pub fn from_pixels(pixels: &[u8], channels: usize, plane: usize) -> Result<Self> {
        if channels == 0
            || plane == 0
            || pixels.is_empty()
            || !pixels.len().is_multiple_of(channels * plane)
        {
            return Err(BnnError::invalid(
                "pixel buffer does not divide into channel planes",
            ));
        }
        let mut sum = vec![0f64; channels];
        let mut sq = vec![0f64; channels];
        for (i, chunk) in pixels.chunks(plane).enumerate() {
            let c = i % channels;
            for &p in chunk {
                let v = p as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let count = (pixels.len() / channels) as f64;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let m = sum[c] / count;
            let var = (sq[c] / count - m * m).max(0.0);
            mean.push(m as f32);
            // A constant channel keeps unit scale instead of dividing by zero.
            std.push(if var > 0.0 { var.sqrt() as f32 } else { 1.0 });
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, channel: usize, p: u8) -> f32 {
        (p as f32 - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f32) -> u8 {
        (v * self.std[channel] + self.mean[channel])
            .round()
            .clamp(0.0, 255.0) as u8
    }

    /// Normalizes an `N×C×H×W` byte buffer into a tensor.
    pub fn apply(&self, pixels: &[u8], shape: Vec<usize>) -> Result<FloatTensor> {
        let c = self.channels();
        if shape.len() != 4 || shape[1] != c {
            return Err(BnnError::shape(format!(
                "expected N×{c}×H×W pixels, got {shape:?}"
            )));
        }
        let plane = shape[2] * shape[3];
        let values = pixels
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let ch = i % c;
                chunk.iter().map(move |&p| self.normalize(ch, p))
            })
            .collect();
        FloatTensor::new(shape, values)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `N×C×H×W`, normalized.
    pub images: FloatTensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
    /// Statistics of the train split that produced `images`.
    pub norm: NormStats,
}

impl Dataset {
    /// Normalizes `pixels` with `norm` and checks labels.
    pub fn from_pixels(
        pixels: &[u8],
        item_shape: [usize; 3],
        labels: Vec<usize>,
        split: Split,
        class_count: usize,
        norm: NormStats,
    ) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(BnnError::invalid(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        let shape = vec![labels.len(), item_shape[0], item_shape[1], item_shape[2]];
        let images = norm.apply(pixels, shape)?;
        Ok(Dataset {
            images,
            labels,
            split,
            class_count,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Copies the listed items into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(FloatTensor, Vec<usize>)> {
        let item = self.images.item_len();
        let mut values = Vec::with_capacity(indices.len() * item);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(BnnError::invalid(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            values.extend_from_slice(&self.images.values()[i * item..(i + 1) * item]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((FloatTensor::new(shape, values)?, labels))
    }

    /// A dataset holding the listed items.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Ok(Dataset {
            images,
            labels,
            split: self.split,
            class_count: self.class_count,
            norm: self.norm.clone(),
        })
    }

    /// Raw bytes recovered from the normalized images.
    pub fn denormalized_pixels(&self) -> Vec<u8> {
        let c = self.images.dim(1);
        let plane: usize = self.images.shape()[2..].iter().product();
        self.images
            .values()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let ch = i % c;
                chunk.iter().map(move |&v| self.norm.denormalize(ch, v))
            })
            .collect()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| BnnError::format(offset as u64, "file ends inside the header"))
}

/// Parses an IDX image file into `(pixels, count, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(BnnError::format(
            0,
            format!("image magic {magic} (expected {MNIST_IMAGE_MAGIC})"),
        ));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(BnnError::format(
            bytes.len() as u64,
            format!("truncated image data: {} of {need} pixel bytes", body.len()),
        ));
    }
    if body.len() > need {
        return Err(BnnError::format(
            16 + need as u64,
            "trailing bytes after image data",
        ));
    }
    Ok((body.to_vec(), n, rows, cols))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(BnnError::format(
            0,
            format!("label magic {magic} (expected {MNIST_LABEL_MAGIC})"),
        ));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(BnnError::format(
            bytes.len() as u64,
            format!("truncated label data: {} of {n} bytes", body.len()),
        ));
    }
    if body.len() > n {
        return Err(BnnError::format(
            8 + n as u64,
            "trailing bytes after label data",
        ));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [MNIST_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn find_file(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            BnnError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("none of {names:?} found in {}", dir.display()),
            ))
        })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        BnnError::Format { offset, msg } => BnnError::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn load_mnist_split(dir: &Path, prefix: &str) -> Result<(Vec<u8>, Vec<usize>)> {
    let img_path = find_file(
        dir,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    )?;
    let lbl_path = find_file(
        dir,
        &[
            &format!("{prefix}-labels-idx1-ubyte"),
            &format!("{prefix}-labels.idx1-ubyte"),
        ],
    )?;
    let (pixels, n, rows, cols) = with_path(&img_path, parse_idx_images(&fs::read(&img_path)?))?;
    let labels = with_path(&lbl_path, parse_idx_labels(&fs::read(&lbl_path)?))?;
    if (rows, cols) != (28, 28) {
        return Err(BnnError::format(
            8,
            format!(
                "{}: images are {rows}×{cols}, expected 28×28",
                img_path.display()
            ),
        ));
    }
    if labels.len() != n {
        return Err(BnnError::format(
            4,
            format!(
                "{}: {} labels for {n} images",
                lbl_path.display(),
                labels.len()
            ),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(BnnError::format(
            8 + pos as u64,
            format!("{}: label {} > 9", lbl_path.display(), labels[pos]),
        ));
    }
    Ok((pixels, labels.into_iter().map(usize::from).collect()))
}

/// Loads the four MNIST IDX files from `dir`; test images are normalized
/// with the train statistics.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (train_px, train_lbl) = load_mnist_split(dir, "train")?;
    let (test_px, test_lbl) = load_mnist_split(dir, "t10k")?;
    let norm = NormStats::from_pixels(&train_px, 1, 28 * 28)?;
    let train = Dataset::from_pixels(
        &train_px,
        [1, 28, 28],
        train_lbl,
        Split::Train,
        10,
        norm.clone(),
    )?;
    let test = Dataset::from_pixels(&test_px, [1, 28, 28], test_lbl, Split::Test, 10, norm)?;
    Ok((train, test))
}

/// Splits a CIFAR-10 batch file into `(pixels, labels)`.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(Vec<u8>, Vec<usize>)> {
    let rem = bytes.len() % CIFAR_RECORD_BYTES;
    if rem != 0 {
        return Err(BnnError::format(
            (bytes.len() - rem) as u64,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(BnnError::format(
                (i * CIFAR_RECORD_BYTES) as u64,
                format!("label {} > 9", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Encodes records as a CIFAR-10 batch (label byte then R, G, B planes).
pub fn encode_cifar_batch(pixels: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    let item = CIFAR_RECORD_BYTES - 1;
    if pixels.len() != labels.len() * item {
        return Err(BnnError::invalid(format!(
            "{} pixel bytes for {} records",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD_BYTES);
    for (l, px) in labels.iter().zip(pixels.chunks(item)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    Ok(out)
}

fn read_cifar_file(path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    with_path(path, parse_cifar_batch(&fs::read(path)?))
}

/// Loads the five CIFAR-10 train batches and the test batch from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train_px = Vec::new();
    let mut train_lbl = Vec::new();
    for name in CIFAR_TRAIN_BATCHES {
        let (px, lbl) = read_cifar_file(&find_file(dir, &[name])?)?;
        train_px.extend(px);
        train_lbl.extend(lbl);
    }
    let (test_px, test_lbl) = read_cifar_file(&find_file(dir, &[CIFAR_TEST_BATCH])?)?;
    let norm = NormStats::from_pixels(&train_px, 3, 32 * 32)?;
    let train = Dataset::from_pixels(
        &train_px,
        [3, 32, 32],
        train_lbl,
        Split::Train,
        10,
        norm.clone(),
    )?;
    let test = Dataset::from_pixels(&test_px, [3, 32, 32], test_lbl, Split::Test, 10, norm)?;
    Ok((train, test))
}

/// A uniformly random permutation of `0..n` determined by `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub struct Batch {
    pub images: FloatTensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Seeded mini-batch iterator; the final partial batch is included.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.ds.gather(&indices).map(|(images, labels)| Batch {
            images,
            labels,
            indices,
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Batches in a seeded random order, or in dataset order when `seed` is
/// `None`.
pub fn batches(ds: &Dataset, batch_size: usize, seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(BnnError::invalid("batch size must be at least 1"));
    }
    let order = match seed {
        Some(s) => permutation(ds.len(), s),
        None => (0..ds.len()).collect(),
    };
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

/// Random horizontal flip plus zero-padded random crop, in normalized space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    pub pad: usize,
}

impl Augment {
    pub const CIFAR: Augment = Augment { flip: true, pad: 4 };

    pub fn apply(&self, images: &mut FloatTensor, rng: &mut impl Rng) {
        let (n, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
        let item = c * h * w;
        let mut scratch = vec![0f32; item];
        for img in images.values_mut().chunks_mut(item).take(n) {
            let flip = self.flip && rng.gen_bool(0.5);
            let dy = if self.pad > 0 {
                rng.gen_range(0..=2 * self.pad) as isize - self.pad as isize
            } else {
                0
            };
            let dx = if self.pad > 0 {
                rng.gen_range(0..=2 * self.pad) as isize - self.pad as isize
            } else {
                0
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = x as isize + dx;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        scratch[(ch * h + y) * w + x] =
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                img[(ch * h + sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
            img.copy_from_slice(&scratch);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_magic() {
        let px: Vec<u8> = (0..2 * 4).map(|i| i as u8 * 30).collect();
        let enc = encode_idx_images(&px, 2, 2, 2);
        let (back, n, r, c) = parse_idx_images(&enc).unwrap();
        assert_eq!((back, n, r, c), (px, 2, 2, 2));
        let mut bad = enc.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(BnnError::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx_images(&enc[..enc.len() - 1]),
            Err(BnnError::Format { .. })
        ));
        assert!(matches!(
            parse_idx_images(&enc[..6]),
            Err(BnnError::Format { offset: 4, .. })
        ));
        let lbl = encode_idx_labels(&[3, 1, 4]);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), vec![3, 1, 4]);
        assert!(parse_idx_labels(&enc).is_err());
    }

    #[test]
    fn cifar_size_must_be_record_multiple() {
        let err = parse_cifar_batch(&vec![0u8; CIFAR_RECORD_BYTES + 5]).unwrap_err();
        assert!(
            matches!(err, BnnError::Format { offset, .. } if offset == CIFAR_RECORD_BYTES as u64)
        );
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ds = Dataset::from_pixels(
            &(0..10u8).collect::<Vec<_>>(),
            [1, 1, 1],
            vec![0; 10],
            Split::Train,
            2,
            NormStats::identity(1),
        )
        .unwrap();
        let sizes: Vec<usize> = batches(&ds, 4, Some(1))
            .unwrap()
            .map(|b| b.unwrap().labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let a: Vec<usize> = batches(&ds, 4, Some(7))
            .unwrap()
            .flat_map(|b| b.unwrap().indices)
            .collect();
        let b: Vec<usize> = batches(&ds, 4, Some(7))
            .unwrap()
            .flat_map(|b| b.unwrap().indices)
            .collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(batches(&ds, 0, None).is_err());
    }

    #[test]
    fn flip_without_crop_mirrors_or_copies() {
        let aug = Augment { flip: true, pad: 0 };
        for seed in 0..8 {
            let mut t = FloatTensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flips = rng.clone().gen_bool(0.5);
            aug.apply(&mut t, &mut rng);
            let want: &[f32] = if flips {
                &[3.0, 2.0, 1.0]
            } else {
                &[1.0, 2.0, 3.0]
            };
            assert_eq!(t.values(), want);
        }
    }
}
