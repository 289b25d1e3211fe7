//! Procedural stand-ins for MNIST and CIFAR-10, written in the real file
//! formats. Used by tests and smoke runs when the datasets are not on disk.
//!
//! Digits are seven-segment glyphs with random offset, scale, slant and
//! stroke width; colour images are a gradient background with one soft
//! ellipse.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    encode_cifar10_bin, encode_mnist_idx, Dataset, Split, CIFAR_TEST_BATCH, CIFAR_TRAIN_BATCHES, MNIST_TEST_IMAGES,
    MNIST_TRAIN_IMAGES,
};
use crate::error::{Error, Result};

/// Segment endpoints in a unit box, y downwards: top, upper right, lower
/// right, bottom, lower left, upper left, middle.
const SEGMENTS: [((f32, f32), (f32, f32)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)),
    ((1.0, 0.0), (1.0, 0.5)),
    ((1.0, 0.5), (1.0, 1.0)),
    ((0.0, 1.0), (1.0, 1.0)),
    ((0.0, 0.5), (0.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.5)),
    ((0.0, 0.5), (1.0, 0.5)),
];

/// Lit segments per digit, as bits over [`SEGMENTS`].
const DIGITS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111, 0b1111111, 0b1101111,
];

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn digit<R: Rng>(rng: &mut R) -> Vec<u8> {
    let mask = DIGITS[rng.gen_range(0..10)];
    let w = rng.gen_range(8.0..12.0f32);
    let h = rng.gen_range(14.0..19.0f32);
    let x0 = 14.0 - w / 2.0 + rng.gen_range(-2.5..2.5f32);
    let y0 = 14.0 - h / 2.0 + rng.gen_range(-2.0..2.0f32);
    let slant = rng.gen_range(-0.25..0.25f32);
    let width = rng.gen_range(1.0..2.0f32);
    let place = |(u, v): (f32, f32)| (x0 + u * w + slant * (0.5 - v) * h, y0 + v * h);
    let segs: Vec<_> = (0..7)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| (place(SEGMENTS[i].0), place(SEGMENTS[i].1)))
        .collect();
    let mut img = vec![0u8; 784];
    for (i, px) in img.iter_mut().enumerate() {
        let p = ((i % 28) as f32 + 0.5, (i / 28) as f32 + 0.5);
        let d = segs.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f32::MAX, f32::min);
        let v = (width + 0.5 - d).clamp(0.0, 1.0);
        *px = (v * 255.0).round() as u8;
    }
    img
}

fn colour_image<R: Rng>(rng: &mut R) -> Vec<u8> {
    let mut colour = || [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
    let (top, bottom, blob) = (colour(), colour(), colour());
    let cx = rng.gen_range(8.0..24.0f32);
    let cy = rng.gen_range(8.0..24.0f32);
    let rx = rng.gen_range(4.0..10.0f32);
    let ry = rng.gen_range(4.0..10.0f32);
    let mut img = vec![0u8; 3072];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let t = y as f32 / 31.0;
                let bg = top[c] * (1.0 - t) + bottom[c] * t;
                let r = ((x as f32 - cx) / rx).powi(2) + ((y as f32 - cy) / ry).powi(2);
                let a = (1.5 - r).clamp(0.0, 1.0);
                img[c * 1024 + y * 32 + x] = ((bg * (1.0 - a) + blob[c] * a) * 255.0).round() as u8;
            }
        }
    }
    img
}

fn generate(n: usize, seed: u64, size: usize, f: impl Fn(&mut ChaCha8Rng) -> Vec<u8>) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(n * size);
    for _ in 0..n {
        bytes.extend(f(&mut rng));
    }
    bytes
}

pub fn mnist_like(n: usize, seed: u64, split: Split) -> Dataset {
    let bytes = generate(n, seed, 784, digit);
    Dataset::from_bytes("mnist", split, [n, 1, 28, 28], &bytes).expect("sizes agree")
}

pub fn cifar_like(n: usize, seed: u64, split: Split) -> Dataset {
    let bytes = generate(n, seed, 3072, colour_image);
    Dataset::from_bytes("cifar10", split, [n, 3, 32, 32], &bytes).expect("sizes agree")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `train-images-idx3-ubyte` and `t10k-images-idx3-ubyte` into `dir`.
pub fn write_mnist_dir(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(MNIST_TRAIN_IMAGES), &encode_mnist_idx(&mnist_like(n_train, seed, Split::Train)))?;
    write(
        &dir.join(MNIST_TEST_IMAGES),
        &encode_mnist_idx(&mnist_like(n_test, seed ^ 0x7e57, Split::Test)),
    )
}

/// Writes five training batch files and one test batch file into `dir`.
pub fn write_cifar_dir(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = cifar_like(n_train, seed, Split::Train);
    let per = n_train.div_ceil(CIFAR_TRAIN_BATCHES.len());
    for (i, name) in CIFAR_TRAIN_BATCHES.iter().enumerate() {
        let start = (i * per).min(n_train);
        let part = Dataset {
            images: train.images.slice_rows(start, per.min(n_train - start))?,
            ..train.clone()
        };
        write(&dir.join(name), &encode_cifar10_bin(&part))?;
    }
    write(
        &dir.join(CIFAR_TEST_BATCH),
        &encode_cifar10_bin(&cifar_like(n_test, seed ^ 0x7e57, Split::Test)),
    )
}
