//! MNIST IDX and CIFAR-10 binary readers, normalisation to `[−1, 1]` and
//! seeded batch iteration.

pub mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::DatasetKind;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const CIFAR_TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_BATCH: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// `v ↦ v/127.5 − 1`.
pub fn normalize(byte: u8) -> f32 {
    byte as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding and saturating to a byte.
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Images `[N×C×H×W]` with values in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub split: Split,
    pub name: String,
}

impl Dataset {
    pub fn from_bytes(name: &str, split: Split, shape: [usize; 4], bytes: &[u8]) -> Result<Self> {
        let images = Tensor::new(shape, bytes.iter().map(|&b| normalize(b)).collect())?;
        Ok(Dataset {
            images,
            split,
            name: name.to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.images.data().iter().map(|&v| denormalize(v)).collect()
    }

    /// Seeded uniform sample of `n` images without replacement.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Config(format!("subset of {n} from {} images", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        Ok(Dataset {
            images: self.images.gather_rows(&order),
            split: self.split,
            name: self.name.clone(),
        })
    }

    /// Leading `n` images, in file order.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.slice_rows(0, n.min(self.len()))?,
            split: self.split,
            name: self.name.clone(),
        })
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIterator<'_>> {
        BatchIterator::new(self, batch_size, seed, epoch)
    }

    /// Unshuffled batches in file order.
    pub fn sequential(&self, batch_size: usize) -> Result<BatchIterator<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(BatchIterator {
            data: self,
            order: (0..self.len()).collect(),
            batch_size,
            pos: 0,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses an IDX image file: big-endian magic `0x00000803`, count, rows,
/// columns, then unsigned pixel bytes. Labels are not needed.
pub fn parse_mnist_idx(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    let word = |i: usize| -> Result<u32> {
        let b = bytes
            .get(i * 4..i * 4 + 4)
            .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    if (rows, cols) != (28, 28) {
        return Err(format_err(path, 8, format!("expected 28×28 images, header says {rows}×{cols}")));
    }
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() != expected {
        let what = if body.len() < expected { "truncated" } else { "trailing bytes after" };
        return Err(format_err(
            path,
            16 + body.len().min(expected),
            format!("{what} pixel data: header declares {n} images ({expected} bytes), found {}", body.len()),
        ));
    }
    Dataset::from_bytes("mnist", split, [n, 1, rows, cols], body)
}

pub fn load_mnist_idx(path: &Path, split: Split) -> Result<Dataset> {
    parse_mnist_idx(&read(path)?, path, split)
}

/// IDX image file for `images [N×1×28×28]`.
pub fn encode_mnist_idx(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + data.images.numel());
    for w in [IDX_IMAGES_MAGIC, data.len() as u32, 28, 28] {
        out.extend(w.to_be_bytes());
    }
    out.extend(data.to_bytes());
    out
}

/// Parses 3073-byte records: one label byte, then R, G, B planes of 32×32.
pub fn parse_cifar10_bin(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(format_err(
            path,
            whole,
            format!("length {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(CIFAR_RECORD_BYTES).flat_map(|r| &r[1..]).copied().collect())
}

pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    for p in paths {
        pixels.extend(parse_cifar10_bin(&read(p)?, p)?);
    }
    let n = pixels.len() / (CIFAR_RECORD_BYTES - 1);
    Dataset::from_bytes("cifar10", split, [n, 3, 32, 32], &pixels)
}

/// CIFAR-10 binary records for `images [N×3×32×32]`, with label 0.
pub fn encode_cifar10_bin(data: &Dataset) -> Vec<u8> {
    let bytes = data.to_bytes();
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_BYTES);
    for img in bytes.chunks_exact(CIFAR_RECORD_BYTES - 1) {
        out.push(0);
        out.extend_from_slice(img);
    }
    out
}

/// Loads one split from a directory holding the standard file names.
pub fn load_split(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => {
            let name = match split {
                Split::Train => MNIST_TRAIN_IMAGES,
                Split::Test => MNIST_TEST_IMAGES,
            };
            load_mnist_idx(&dir.join(name), split)
        }
        DatasetKind::Cifar10 => {
            let paths: Vec<PathBuf> = match split {
                Split::Train => CIFAR_TRAIN_BATCHES.iter().map(|n| dir.join(n)).collect(),
                Split::Test => vec![dir.join(CIFAR_TEST_BATCH)],
            };
            load_cifar10_bin(&paths, split)
        }
    }
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled batches of one epoch. The final batch may be short.
pub struct BatchIterator<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(BatchIterator {
            data,
            order: epoch_order(data.len(), seed, epoch),
            batch_size,
            pos: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Tensor<f32>;

    fn next(&mut self) -> Option<Tensor<f32>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.images.gather_rows(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numbered(n: usize) -> Dataset {
        let bytes: Vec<u8> = (0..n * 784).map(|i| (i / 784) as u8).collect();
        Dataset::from_bytes("t", Split::Train, [n, 1, 28, 28], &bytes).unwrap()
    }

    fn ids(batch: &Tensor<f32>) -> Vec<u8> {
        batch.data().chunks(784).map(|c| denormalize(c[0])).collect()
    }

    #[test]
    fn normalisation_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
    }

    proptest! {
        #[test]
        fn normalisation_round_trip(b in any::<u8>()) {
            prop_assert_eq!(denormalize(normalize(b)), b);
            prop_assert!((-1.0..=1.0).contains(&normalize(b)));
        }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let d = numbered(3);
        let bytes = encode_mnist_idx(&d);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let p = Path::new("x.idx");
        let back = parse_mnist_idx(&bytes, p, Split::Train).unwrap();
        assert_eq!(back.images, d.images);
        assert_eq!(&encode_mnist_idx(&back)[16..], &bytes[16..]);

        let mut bad = bytes.clone();
        bad[3] = 1;
        assert!(matches!(parse_mnist_idx(&bad, p, Split::Train), Err(Error::Format { offset: 0, .. })));
        match parse_mnist_idx(&bytes[..bytes.len() - 5], p, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_mnist_idx(&bytes[..10], p, Split::Train), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_mnist_idx(&extra, p, Split::Train).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![7u8];
        rec.extend(vec![0u8; 3072]);
        rec.extend(rec.clone());
        assert_eq!(rec.len(), 2 * 3073);
        let px = parse_cifar10_bin(&rec, Path::new("c")).unwrap();
        let d = Dataset::from_bytes("c", Split::Test, [2, 3, 32, 32], &px).unwrap();
        assert!(d.images.data().iter().all(|&v| v == -1.0));
        match parse_cifar10_bin(&rec[..3073 + 100], Path::new("c")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        let encoded = encode_cifar10_bin(&d);
        assert_eq!(parse_cifar10_bin(&encoded, Path::new("c")).unwrap(), px);
    }

    #[test]
    fn batch_sizes_and_partition() {
        let d = numbered(10);
        let it = d.batches(3, 5, 0).unwrap();
        assert_eq!(it.num_batches(), 4);
        let batches: Vec<_> = it.collect();
        assert_eq!(batches.iter().map(|b| b.shape()[0]).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut seen: Vec<u8> = batches.iter().flat_map(ids).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<u8>>());
    }

    #[test]
    fn shuffle_is_pure_in_seed_and_epoch() {
        let d = numbered(20);
        let order = |seed, epoch| -> Vec<u8> { d.batches(4, seed, epoch).unwrap().flat_map(|b| ids(&b)).collect() };
        assert_eq!(order(1, 2), order(1, 2));
        assert_ne!(order(1, 2), order(1, 3));
        assert_ne!(order(1, 2), order(2, 2));
        assert!(d.batches(0, 1, 0).is_err());
    }

    #[test]
    fn subsets() {
        let d = numbered(12);
        let full = d.subset(12, 4).unwrap();
        let mut all = ids(&full.images);
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<u8>>());
        assert_eq!(d.subset(0, 4).unwrap().len(), 0);
        assert_eq!(d.subset(5, 9).unwrap(), d.subset(5, 9).unwrap());
        assert!(d.subset(13, 0).is_err());
    }
}
