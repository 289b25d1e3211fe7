//! Tape-free numeric kernels shared by the forward and backward rules.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out = |extent: usize, k: usize| -> Result<usize> {
            let padded = extent + 2 * pad;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::Config(format!(
                    "conv2d output size ({extent} + 2·{pad} − {k})/{stride} + 1 is not a positive integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            pad,
            out_h: out(input[2], kernel[2])?,
            out_w: out(input[3], kernel[3])?,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Input offset for patch row `(c, i, j)` at output position `(oy, ox)`,
    /// or `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + i) as isize - self.pad as isize;
        let x = (ox * self.stride + j) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let positions = self.positions();
        for c in 0..self.in_channels {
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = ((c * self.kernel_h + i) * self.kernel_w + j) * positions;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            cols[row + oy * self.out_w + ox] = match self.source(c, i, j, oy, ox) {
                                Some(s) => image[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let positions = self.positions();
        for c in 0..self.in_channels {
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = ((c * self.kernel_h + i) * self.kernel_w + j) * positions;
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(c, i, j, oy, ox) {
                                image[s] += cols[row + oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (patch, positions) = (g.patch_len(), g.positions());
    let out_plane = g.filters * positions;
    let mut out = vec![T::zero(); g.batch * out_plane];
    let mut cols = vec![T::zero(); patch * positions];
    for n in 0..g.batch {
        g.im2col(&input[n * g.in_plane()..(n + 1) * g.in_plane()], &mut cols);
        let dst = &mut out[n * out_plane..(n + 1) * out_plane];
        for (f, row) in dst.chunks_mut(positions).enumerate() {
            row.fill(bias[f]);
        }
        T::gemm(
            g.filters,
            patch,
            positions,
            T::one(),
            kernel,
            (patch as isize, 1),
            &cols,
            (positions as isize, 1),
            T::one(),
            dst,
            (positions as isize, 1),
        );
    }
    out
}

/// Gradients of a cross-correlation with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (patch, positions) = (g.patch_len(), g.positions());
    let out_plane = g.filters * positions;
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_kernel = vec![T::zero(); kernel.len()];
    let mut d_bias = vec![T::zero(); g.filters];
    let mut cols = vec![T::zero(); patch * positions];
    let mut d_cols = vec![T::zero(); patch * positions];
    for n in 0..g.batch {
        let image = &input[n * g.in_plane()..(n + 1) * g.in_plane()];
        let d_out = &grad_out[n * out_plane..(n + 1) * out_plane];
        for (f, row) in d_out.chunks(positions).enumerate() {
            d_bias[f] += row.iter().copied().sum::<T>();
        }
        g.im2col(image, &mut cols);
        // dK += dOut · colsᵀ
        T::gemm(
            g.filters,
            positions,
            patch,
            T::one(),
            d_out,
            (positions as isize, 1),
            &cols,
            (1, positions as isize),
            T::one(),
            &mut d_kernel,
            (patch as isize, 1),
        );
        // dcols = Kᵀ · dOut
        T::gemm(
            patch,
            g.filters,
            positions,
            T::one(),
            kernel,
            (1, patch as isize),
            d_out,
            (positions as isize, 1),
            T::zero(),
            &mut d_cols,
            (positions as isize, 1),
        );
        g.col2im_add(&d_cols, &mut d_input[n * g.in_plane()..(n + 1) * g.in_plane()]);
    }
    (d_input, d_kernel, d_bias)
}

/// `(outer, extent, inner)` around `axis`.
pub fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn split_axis<T: Real>(data: &[T], shape: &[usize], axis: usize, at: usize) -> (Vec<T>, Vec<T>) {
    let (outer, extent, inner) = axis_blocks(shape, axis);
    let mut head = Vec::with_capacity(outer * at * inner);
    let mut tail = Vec::with_capacity(outer * (extent - at) * inner);
    for block in data.chunks(extent * inner) {
        head.extend_from_slice(&block[..at * inner]);
        tail.extend_from_slice(&block[at * inner..]);
    }
    (head, tail)
}

pub fn concat_axis<T: Real>(
    a: &[T],
    a_extent: usize,
    b: &[T],
    b_extent: usize,
    outer: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        out.extend_from_slice(&a[o * a_extent * inner..(o + 1) * a_extent * inner]);
        out.extend_from_slice(&b[o * b_extent * inner..(o + 1) * b_extent * inner]);
    }
    out
}

/// `out[.., k, ..] = in[.., perm[k], ..]` along `axis`.
pub fn permute_axis<T: Real>(data: &[T], shape: &[usize], axis: usize, perm: &[usize]) -> Vec<T> {
    let (outer, extent, inner) = axis_blocks(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        let base = o * extent * inner;
        for (k, &src) in perm.iter().enumerate() {
            out[base + k * inner..base + (k + 1) * inner]
                .copy_from_slice(&data[base + src * inner..base + (src + 1) * inner]);
        }
    }
    out
}

/// `[N,C,H,W] → [N,C·r²,H/r,W/r]`; output channel `c·r² + i·r + j` holds
/// sub-pixel `(i, j)` of every `r×r` block of input channel `c`.
pub fn space_to_depth<T: Real>(data: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let oc = ch * r * r + (y % r) * r + (x % r);
                    let dst = ((b * c * r * r + oc) * ho + y / r) * wo + x / r;
                    out[dst] = data[((b * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    out
}

/// Exact inverse of [`space_to_depth`]; `shape` is the depth-packed shape.
pub fn depth_to_space<T: Real>(data: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let [n, cr, ho, wo] = [shape[0], shape[1], shape[2], shape[3]];
    let c = cr / (r * r);
    let (h, w) = (ho * r, wo * r);
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let oc = ch * r * r + (y % r) * r + (x % r);
                    let src = ((b * cr + oc) * ho + y / r) * wo + x / r;
                    out[((b * c + ch) * h + y) * w + x] = data[src];
                }
            }
        }
    }
    out
}

/// Non-overlapping `r×r` mean pooling over `[N,C,H,W]`.
pub fn avg_pool<T: Real>(data: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (ho, wo) = (h / r, w / r);
    let scale = T::one() / T::from_usize(r * r).unwrap();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                out[(plane * ho + y / r) * wo + x / r] += data[(plane * h + y) * w + x] * scale;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]; `shape` is the pooled input's shape.
pub fn avg_pool_backward<T: Real>(grad: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (ho, wo) = (h / r, w / r);
    let scale = T::one() / T::from_usize(r * r).unwrap();
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                out[(plane * h + y) * w + x] = grad[(plane * ho + y / r) * wo + x / r] * scale;
            }
        }
    }
    out
}

/// Nearest-neighbour `×r` upsampling of `[N,C,H,W]`.
pub fn upsample_nearest<T: Real>(data: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); data.len() * r * r];
    for plane in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                out[(plane * ho + y) * wo + x] = data[(plane * h + y / r) * w + x / r];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]; `shape` is the upsampled input's shape.
pub fn upsample_nearest_backward<T: Real>(grad: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                out[(plane * h + y / r) * w + x / r] += grad[(plane * ho + y) * wo + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_rejects_fractional_output() {
        assert!(ConvGeometry::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 2, 0).is_err());
        let g = ConvGeometry::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 2, 0).unwrap();
        assert_eq!(g.output_shape(), [1, 1, 2, 2]);
    }

    #[test]
    fn direct_convolution_agrees_with_im2col() {
        let input: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..2 * 3 * 3 * 3).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let bias = [0.5, -1.0];
        let g = ConvGeometry::new(&[2, 3, 5, 4], &[2, 3, 3, 3], 1, 1).unwrap();
        let out = conv2d_forward(&g, &input, &kernel, &bias);
        for n in 0..2 {
            for f in 0..2 {
                for oy in 0..5 {
                    for ox in 0..4 {
                        let mut acc = bias[f];
                        for c in 0..3 {
                            for i in 0..3 {
                                for j in 0..3 {
                                    let (y, x) = (oy as isize + i as isize - 1, ox as isize + j as isize - 1);
                                    if (0..5).contains(&y) && (0..4).contains(&x) {
                                        acc += input[((n * 3 + c) * 5 + y as usize) * 4 + x as usize]
                                            * kernel[((f * 3 + c) * 3 + i) * 3 + j];
                                    }
                                }
                            }
                        }
                        assert_eq!(out[((n * 2 + f) * 5 + oy) * 4 + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn space_to_depth_ordering() {
        let out = space_to_depth(&[1.0f32, 2.0, 3.0, 4.0], &[1, 1, 2, 2], 2);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
        let x: Vec<f32> = (0..2 * 3 * 4 * 6).map(|i| i as f32).collect();
        let packed = space_to_depth(&x, &[2, 3, 4, 6], 2);
        assert_eq!(depth_to_space(&packed, &[2, 12, 2, 3], 2), x);
    }

    #[test]
    fn permute_axis_definition() {
        let out = permute_axis(&[10.0f32, 20.0, 30.0], &[1, 3], 1, &[2, 0, 1]);
        assert_eq!(out, vec![30.0, 10.0, 20.0]);
    }
}
