//! Image dataset loading: MNIST IDX files and CIFAR-10 binary batches.
//!
//! Pixels are scaled by 1/255 and stored as `f32`, channel-major per example.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::target::Batch;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: [usize; 3],
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], class_count: usize, split: Split) -> Result<Self> {
        let example = shape.iter().product::<usize>();
        if images.len() != labels.len() * example {
            return Err(Error::Data(format!(
                "{} pixel values do not fill {} examples of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= class_count) {
            return Err(Error::Data(format!(
                "label {} of example {i} is outside [0, {class_count})",
                labels[i]
            )));
        }
        if let Some(i) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("pixel value {} at {i} is outside [0, 1]", images[i])));
        }
        Ok(Self { images, labels, shape, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<'_> {
        Batch {
            inputs: indices.iter().map(|&i| self.image(i)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Every example, in file order.
    pub fn all(&self) -> Batch<'_> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: truncated header, need 4 bytes at offset {offset} but file has {}",
                path.display(),
                bytes.len()
            ))
        })
}

fn check_magic(found: u32, want: u32, path: &Path) -> Result<()> {
    if found != want {
        return Err(Error::Data(format!(
            "{}: bad magic 0x{found:08x} at offset 0, expected 0x{want:08x}",
            path.display()
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < offset + len {
        return Err(Error::Data(format!(
            "{}: truncated payload, expected {len} bytes from offset {offset} but file ends at {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(&bytes[offset..offset + len])
}

/// Loads an IDX image file and its matching label file.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    check_magic(be_u32(&image_bytes, 0, images_path)?, IDX_IMAGES_MAGIC, images_path)?;
    let count = be_u32(&image_bytes, 4, images_path)? as usize;
    let rows = be_u32(&image_bytes, 8, images_path)? as usize;
    let cols = be_u32(&image_bytes, 12, images_path)? as usize;
    let pixels = payload(&image_bytes, 16, count * rows * cols, images_path)?;

    check_magic(be_u32(&label_bytes, 0, labels_path)?, IDX_LABELS_MAGIC, labels_path)?;
    let label_count = be_u32(&label_bytes, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{} declares {label_count} labels at offset 4 but {} declares {count} images",
            labels_path.display(),
            images_path.display()
        )));
    }
    let raw_labels = payload(&label_bytes, 8, count, labels_path)?;
    if let Some(i) = raw_labels.iter().position(|&y| y > 9) {
        return Err(Error::Data(format!(
            "{}: label {} at offset {} is not a digit",
            labels_path.display(),
            raw_labels[i],
            8 + i
        )));
    }

    Dataset::new(
        pixels.iter().map(|&b| f32::from(b) / 255.0).collect(),
        raw_labels.iter().map(|&y| usize::from(y)).collect(),
        [1, rows, cols],
        10,
        Split::Train,
    )
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    Ok(load_mnist_idx(images, labels)?.with_split(split))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: length {} is not a multiple of the {CIFAR_RECORD}-byte record size (trailing record starts at offset {})",
                path.display(),
                bytes.len(),
                bytes.len() / CIFAR_RECORD * CIFAR_RECORD
            )));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0];
            if label > 9 {
                return Err(Error::Data(format!(
                    "{}: label {label} at offset {} is outside 0..=9",
                    path.display(),
                    r * CIFAR_RECORD
                )));
            }
            labels.push(usize::from(label));
            images.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    Dataset::new(images, labels, [3, 32, 32], 10, Split::Train)
}

pub fn cifar10_paths(dir: impl AsRef<Path>, split: Split) -> Vec<PathBuf> {
    let dir = dir.as_ref();
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(config_err!("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Keeps the first `per_class_cap` examples (in file order) of each listed
/// class and relabels the kept classes `0..k` in ascending original order.
pub fn subset(dataset: &Dataset, classes: &[usize], per_class_cap: usize) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::Domain("class subset is empty".into()));
    }
    let mut kept: Vec<usize> = classes.to_vec();
    kept.sort_unstable();
    kept.dedup();
    if let Some(&bad) = kept.iter().find(|&&c| c >= dataset.class_count) {
        return Err(Error::Domain(format!(
            "class {bad} does not exist in a {}-class dataset",
            dataset.class_count
        )));
    }
    let mut remap = vec![None; dataset.class_count];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = Some(new);
    }
    let mut taken = vec![0usize; kept.len()];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..dataset.len() {
        let Some(new) = remap[dataset.labels[i]] else { continue };
        if taken[new] >= per_class_cap {
            continue;
        }
        taken[new] += 1;
        labels.push(new);
        images.extend_from_slice(dataset.image(i));
    }
    Ok(Dataset {
        images,
        labels,
        shape: dataset.shape,
        class_count: kept.len(),
        split: dataset.split,
    })
}
