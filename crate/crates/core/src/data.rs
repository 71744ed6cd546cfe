//! MNIST (IDX) and CIFAR-10 (binary) readers plus deterministic batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, LoadError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const N_CLASSES: usize = 10;

/// Images as `[N, C, H, W]` reals in `[0, 1]` plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    /// First `n` examples (or all, if fewer).
    pub fn truncated(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
        self
    }

    /// Examples at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    file: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], LoadError> {
        if self.bytes.len() - self.pos < n {
            return Err(LoadError::Truncated {
                file: self.file.to_path_buf(),
                offset: self.bytes.len(),
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> std::result::Result<u32, LoadError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn check_magic(cur: &mut Cursor<'_>, expected: u32) -> std::result::Result<(), LoadError> {
    let found = cur.u32_be()?;
    if found != expected {
        return Err(LoadError::BadMagic {
            file: cur.file.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair (uncompressed). Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let mut cur = Cursor {
        file: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    check_magic(&mut cur, IDX_IMAGES_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    if rows == 0 || cols == 0 {
        return Err(LoadError::Geometry {
            file: images_path.to_path_buf(),
            offset: 8,
            dims: vec![rows, cols],
        }
        .into());
    }
    let pixels = cur.take(count * rows * cols)?;
    let images = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();

    let mut cur = Cursor {
        file: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    check_magic(&mut cur, IDX_LABELS_MAGIC)?;
    let label_count = cur.u32_be()? as usize;
    if label_count != count {
        return Err(LoadError::CountMismatch {
            images: images_path.to_path_buf(),
            image_count: count,
            labels: labels_path.to_path_buf(),
            label_count,
        }
        .into());
    }
    let labels = cur.take(label_count)?.to_vec();
    if let Some(pos) = labels.iter().position(|&l| usize::from(l) >= N_CLASSES) {
        return Err(LoadError::CorruptRecord {
            file: labels_path.to_path_buf(),
            record: pos,
            offset: 8 + pos,
            label: labels[pos],
        }
        .into());
    }

    Ok(Dataset {
        name: "mnist".into(),
        split: split_from_path(images_path),
        channels: 1,
        height: rows,
        width: cols,
        images,
        labels,
    })
}

/// Reads one or more CIFAR-10 binary batch files, in order.
pub fn load_cifar10_bin<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(LoadError::RecordSize {
                file: path.to_path_buf(),
                size: bytes.len(),
                record: CIFAR_RECORD_LEN,
            }
            .into());
        }
        for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            let label = chunk[0];
            if usize::from(label) >= N_CLASSES {
                return Err(LoadError::CorruptRecord {
                    file: path.to_path_buf(),
                    record,
                    offset: record * CIFAR_RECORD_LEN,
                    label,
                }
                .into());
            }
            labels.push(label);
            images.extend(chunk[1..].iter().map(|&p| f32::from(p) / 255.0));
        }
    }
    let split = batch_paths
        .first()
        .map(|p| split_from_path(p.as_ref()))
        .unwrap_or_default();
    Ok(Dataset {
        name: "cifar10".into(),
        split,
        channels: 3,
        height: 32,
        width: 32,
        images,
        labels,
    })
}

fn split_from_path(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    if name.contains("t10k") || name.contains("test") {
        "test".into()
    } else {
        "train".into()
    }
}

/// Standard file locations under a data root.
#[derive(Debug, Clone)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    pub fn mnist_dir(&self) -> PathBuf {
        self.root.join("mnist")
    }

    pub fn cifar_dir(&self) -> PathBuf {
        self.root.join("cifar-10-batches-bin")
    }

    pub fn mnist(&self, train: bool) -> Result<Dataset> {
        let prefix = if train { "train" } else { "t10k" };
        let dir = self.mnist_dir();
        load_mnist_idx(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }

    pub fn cifar10(&self, train: bool) -> Result<Dataset> {
        let dir = self.cifar_dir();
        if train {
            let paths: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            load_cifar10_bin(&paths)
        } else {
            load_cifar10_bin(&[dir.join("test_batch.bin")])
        }
    }
}

/// One epoch of shuffled mini-batches. The permutation depends only on
/// `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    pub epoch: u64,
    pub seed: u64,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be >= 1");
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        BatchIterator {
            order,
            batch_size,
            pos: 0,
            epoch,
            seed,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

/// Epoch-0 batches over `ds`.
pub fn batches(ds: &Dataset, size: usize, seed: u64) -> Result<BatchIterator> {
    if size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    Ok(BatchIterator::new(ds.len(), size, seed, 0))
}
