//! Dataset ingestion (IDX files), synthetic data generation, and IID /
//! non-IID partitioning across devices.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Batch;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory labelled dataset with features in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    inputs: Vec<f64>,
    shape: (usize, usize, usize),
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<f64>,
        shape: (usize, usize, usize),
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per_sample = shape.0 * shape.1 * shape.2;
        if per_sample == 0 || inputs.len() != per_sample * labels.len() {
            return Err(Error::structural(format!(
                "{} values cannot hold {} examples of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            shape,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn sample_dim(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    /// Reinterprets flat samples under a new (channels, height, width) shape.
    pub fn reshape(mut self, shape: (usize, usize, usize)) -> Result<Self> {
        if shape.0 * shape.1 * shape.2 != self.sample_dim() {
            return Err(Error::structural(format!(
                "cannot view {}-value samples as {shape:?}",
                self.sample_dim()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies the given examples into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.sample_dim();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, self.shape, labels, self.num_classes)
    }
}

struct IdxReader<R> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> IdxReader<R> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.offset,
            msg: format!("{}: {}", self.path, msg.into()),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let v = self
            .inner
            .read_u32::<BigEndian>()
            .map_err(|_| self.err("file truncated while reading a 32-bit field"))?;
        self.offset += 4;
        Ok(v)
    }

    fn read_bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.err(format!("file truncated; expected {n} more bytes")))?;
        self.offset += n as u64;
        Ok(buf)
    }
}

fn open_idx(path: &Path) -> Result<IdxReader<BufReader<File>>> {
    Ok(IdxReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
        path: path.display().to_string(),
    })
}

/// Loads an IDX image/label file pair (the MNIST container format):
/// big-endian magic 0x00000803 / 0x00000801, dimension sizes, then unsigned
/// bytes. Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = open_idx(images_path)?;
    let magic = images.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(images.err(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = images.read_u32()? as usize;
    let rows = images.read_u32()? as usize;
    let cols = images.read_u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(images.err("zero image dimensions"));
    }
    let pixels = images.read_bytes(count * rows * cols)?;

    let mut labels_file = open_idx(labels_path)?;
    let magic = labels_file.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(labels_file.err(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = labels_file.read_u32()? as usize;
    if label_count != count {
        return Err(labels_file.err(format!(
            "{label_count} labels for {count} images"
        )));
    }
    let raw_labels = labels_file.read_bytes(label_count)?;

    let inputs: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new("idx", inputs, (1, rows, cols), labels, num_classes)
}

/// Gaussian class clusters with unit noise and class means at pairwise
/// distance at least `separation`. Features are min-max scaled to [0, 1].
pub fn synth_blobs<R: Rng>(
    classes: usize,
    dims: usize,
    n: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::domain("synthetic blobs need at least 2 classes"));
    }
    if n < classes {
        return Err(Error::domain(format!(
            "{n} examples cannot cover {classes} classes"
        )));
    }
    if dims == 0 {
        return Err(Error::domain("dims must be positive"));
    }
    // Class c sits on axis (c mod dims) at magnitude separation * (1 + c/dims),
    // which keeps every pair of means at least `separation` apart.
    let mean = |class: usize, dim: usize| {
        if dim == class % dims {
            separation * (1.0 + (class / dims) as f64)
        } else {
            0.0
        }
    };
    let mut inputs = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dims {
            let noise: f64 = StandardNormal.sample(rng);
            inputs.push(mean(class, d) + noise);
        }
        labels.push(class);
    }
    normalize_unit(&mut inputs);
    Dataset::new("synth-blobs", inputs, (1, 1, dims), labels, classes)
}

/// Synthetic image classes: one smooth random 28x28 template per class,
/// each sample randomly shifted, intensity-jittered, and pixel-noised.
/// A stand-in for image data when no IDX files are available.
pub fn synth_images<R: Rng>(
    classes: usize,
    n: usize,
    shift_max: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Dataset> {
    const SIDE: usize = 28;
    const GRID: usize = 5;
    if classes < 2 {
        return Err(Error::domain("synthetic images need at least 2 classes"));
    }
    if n < classes {
        return Err(Error::domain(format!(
            "{n} examples cannot cover {classes} classes"
        )));
    }

    // Low-frequency class templates: a coarse random grid upsampled bilinearly.
    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut img = vec![0.0; SIDE * SIDE];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let gy = y as f64 * (GRID - 1) as f64 / (SIDE - 1) as f64;
                let gx = x as f64 * (GRID - 1) as f64 / (SIDE - 1) as f64;
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let top = grid[y0 * GRID + x0] * (1.0 - fx) + grid[y0 * GRID + x1] * fx;
                let bottom = grid[y1 * GRID + x0] * (1.0 - fx) + grid[y1 * GRID + x1] * fx;
                img[y * SIDE + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
        templates.push(img);
    }

    let mut inputs = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    let shift = shift_max as isize;
    for i in 0..n {
        let class = i % classes;
        let template = &templates[class];
        let dy = rng.gen_range(-shift..=shift);
        let dx = rng.gen_range(-shift..=shift);
        let gain = rng.gen_range(0.7..1.3);
        for y in 0..SIDE as isize {
            for x in 0..SIDE as isize {
                let (sy, sx) = (y - dy, x - dx);
                let base = if (0..SIDE as isize).contains(&sy) && (0..SIDE as isize).contains(&sx) {
                    template[sy as usize * SIDE + sx as usize]
                } else {
                    0.0
                };
                let noise: f64 = StandardNormal.sample(rng);
                inputs.push((base * gain + noise_sigma * noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Dataset::new("synth-images", inputs, (1, SIDE, SIDE), labels, classes)
}

fn normalize_unit(values: &mut [f64]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    for v in values.iter_mut() {
        *v = (*v - lo) / range;
    }
}

/// How examples are split across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Iid,
    /// Sort by label, cut into `devices * shards_per_device` equal shards,
    /// deal `shards_per_device` shards to each device.
    ShardNonIid { shards_per_device: usize },
}

/// Per-device example indices: disjoint, and together covering the dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub device_indices: Vec<Vec<usize>>,
}

pub fn partition<R: Rng>(
    dataset: &Dataset,
    devices: usize,
    mode: PartitionMode,
    rng: &mut R,
) -> Result<Partition> {
    if devices == 0 {
        return Err(Error::domain("need at least one device"));
    }
    if devices > dataset.len() {
        return Err(Error::domain(format!(
            "{devices} devices exceed {} examples",
            dataset.len()
        )));
    }
    let n = dataset.len();
    let device_indices = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let base = n / devices;
            let extra = n % devices;
            let mut out = Vec::with_capacity(devices);
            let mut at = 0;
            for d in 0..devices {
                let take = base + usize::from(d < extra);
                out.push(idx[at..at + take].to_vec());
                at += take;
            }
            out
        }
        PartitionMode::ShardNonIid { shards_per_device } => {
            if shards_per_device == 0 {
                return Err(Error::domain("shards_per_device must be positive"));
            }
            let shard_count = devices * shards_per_device;
            if n % shard_count != 0 {
                return Err(Error::domain(format!(
                    "{n} examples do not divide into {shard_count} equal shards"
                )));
            }
            let shard_size = n / shard_count;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| dataset.labels[i]);
            let mut shard_order: Vec<usize> = (0..shard_count).collect();
            shard_order.shuffle(rng);
            shard_order
                .chunks_exact(shards_per_device)
                .map(|shards| {
                    let mut own = Vec::with_capacity(shards_per_device * shard_size);
                    for &s in shards {
                        own.extend_from_slice(&idx[s * shard_size..(s + 1) * shard_size]);
                    }
                    own
                })
                .collect()
        }
    };
    Ok(Partition { device_indices })
}
