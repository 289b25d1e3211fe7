//! Image grids as binary PGM (grayscale) and PPM (colour).

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{denormalize, Dataset};
use crate::error::{Error, Result};
use crate::models::Autoencoder;
use crate::tensor::Tensor;

use super::reconstruct_images;

/// Differences below one grey level are written unamplified, so a
/// near-exact reconstruction stays black instead of showing rounding noise.
pub const DIFF_AMPLIFY_THRESHOLD: f32 = 1.0 / 127.5;

/// Lays out `[N×C×H×W]` bytes on a near-square grid, row-major, with
/// unused cells left black. Returns `(width, height, bytes)` where colour
/// images are interleaved RGB.
pub fn tile(images: &[u8], shape: &[usize]) -> Result<(usize, usize, Vec<u8>)> {
    let (n, c, h, w) = match shape {
        [n, c @ (1 | 3), h, w] => (*n, *c, *h, *w),
        s => return Err(Error::Contract(format!("grids need [N×1|3×H×W], got {s:?}"))),
    };
    if n == 0 {
        return Err(Error::Contract("grid of zero images".into()));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut out = vec![0u8; gw * gh * c];
    for i in 0..n {
        let (r0, c0) = (i / cols * h, i % cols * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = ((i * c + ch) * h + y) * w + x;
                    out[((r0 + y) * gw + c0 + x) * c + ch] = images[src];
                }
            }
        }
    }
    Ok((gw, gh, out))
}

pub fn write_netpbm(path: &Path, channels: usize, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `|x − x̂|` as bytes: scaled so the largest difference is white, unless
/// it is below [`DIFF_AMPLIFY_THRESHOLD`].
pub fn difference_bytes(x: &Tensor<f32>, x_hat: &Tensor<f32>) -> Vec<u8> {
    let diff: Vec<f32> = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).abs()).collect();
    let max = diff.iter().copied().fold(0.0f32, f32::max);
    let scale = if max < DIFF_AMPLIFY_THRESHOLD { 127.5 } else { 255.0 / max };
    diff.iter().map(|d| (d * scale).round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes `inputs`, `reconstructions` and `differences` grids for `n`
/// test images chosen with `seed`.
pub fn dump_grids(model: &Autoencoder<f32>, test: &Dataset, n: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    let picked = test.subset(n, seed)?;
    let x = picked.images;
    let x_hat = reconstruct_images(model, &x)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let channels = x.shape()[1];
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    let bytes = |t: &Tensor<f32>| t.data().iter().map(|&v| denormalize(v)).collect::<Vec<u8>>();
    let mut written = Vec::new();
    for (name, data) in [
        ("inputs", bytes(&x)),
        ("reconstructions", bytes(&x_hat)),
        ("differences", difference_bytes(&x, &x_hat)),
    ] {
        let (w, h, grid) = tile(&data, x.shape())?;
        let path = out.join(format!("{name}.{ext}"));
        write_netpbm(&path, channels, w, h, &grid)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_places_images_row_major() {
        // Five 1×1×2 images on a 3×2 grid.
        let imgs: Vec<u8> = (1..=10).collect();
        let (w, h, g) = tile(&imgs, &[5, 1, 1, 2]).unwrap();
        assert_eq!((w, h), (6, 2));
        assert_eq!(g, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0, 0]);

        let rgb: Vec<u8> = vec![10, 20, 30];
        let (w, h, g) = tile(&rgb, &[1, 3, 1, 1]).unwrap();
        assert_eq!((w, h, g), (1, 1, vec![10, 20, 30]));
        assert!(tile(&rgb, &[1, 2, 1, 1]).is_err());
    }

    #[test]
    fn difference_scaling() {
        let x = Tensor::new([3], vec![0.0f32, 0.5, -1.0]).unwrap();
        let y = Tensor::new([3], vec![0.0f32, 0.25, -0.5]).unwrap();
        assert_eq!(difference_bytes(&x, &y), vec![0, 128, 255]);
        let tiny = Tensor::new([3], vec![1e-6f32, 0.5, -1.0]).unwrap();
        assert!(difference_bytes(&x, &tiny).iter().all(|&b| b == 0));
    }

    #[test]
    fn netpbm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_netpbm(&p, 1, 2, 1, &[0, 255]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }
}
