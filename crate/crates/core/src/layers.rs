//! Parameterised dense and convolutional layers.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights and bias uniform in `±1/√fan_in`.
    FanInUniform,
    Zero,
}

fn init_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::FanInUniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
        }
    }
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_tensor(rng, &[in_dim, out_dim], in_dim, init))?;
        let bias = store.add(format!("{name}.bias"), init_tensor(rng, &[out_dim], in_dim, init))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, &w)?;
        tape.add_bias(&h, &b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(rng, &[out_channels, in_channels, kernel, kernel], fan_in, init),
        )?;
        let bias = store.add(format!("{name}.bias"), init_tensor(rng, &[out_channels], fan_in, init))?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, &w, &b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_784_512_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 784, 512, Init::FanInUniform, &mut rng).unwrap();
        assert_eq!(l.param_count(), 401_920);
        assert_eq!(store.count(), 401_920);
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conv2d::new(&mut store, "c", 4, 8, 3, 1, 1, Init::FanInUniform, &mut rng).unwrap();
        let bound = 1.0 / 36f64.sqrt();
        assert!(store.get(c.weight).value().max_abs() < bound);
    }
}
