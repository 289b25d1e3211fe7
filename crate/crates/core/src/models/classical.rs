//! Classical encoder/decoder baselines.
//!
//! Every encoder layer is followed by a ReLU. The decoder mirrors the
//! encoder and ends in `tanh`, matching inputs normalised to `[−1, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init, Linear};
use crate::models::innae::Reconstruction;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassicVariant {
    /// Hidden sizes 512, 256, 128.
    Classic,
    /// Hidden sizes 1024 ×3.
    Classic1024,
    /// Hidden sizes 2048 ×3.
    Classic2048,
    /// Hidden sizes 1024 ×5.
    ClassicDeep,
    /// Five 3×3 convolutions and one dense layer, for 3×32×32 inputs.
    ConvCifar,
}

impl ClassicVariant {
    pub fn name(self) -> &'static str {
        match self {
            ClassicVariant::Classic => "classic",
            ClassicVariant::Classic1024 => "classic-1024",
            ClassicVariant::Classic2048 => "classic-2048",
            ClassicVariant::ClassicDeep => "classic-deep",
            ClassicVariant::ConvCifar => "conv-cifar",
        }
    }

    /// Dense hidden sizes of the MNIST variants.
    pub fn hidden_sizes(self) -> Option<&'static [usize]> {
        match self {
            ClassicVariant::Classic => Some(&[512, 256, 128]),
            ClassicVariant::Classic1024 => Some(&[1024, 1024, 1024]),
            ClassicVariant::Classic2048 => Some(&[2048, 2048, 2048]),
            ClassicVariant::ClassicDeep => Some(&[1024, 1024, 1024, 1024, 1024]),
            ClassicVariant::ConvCifar => None,
        }
    }
}

impl std::str::FromStr for ClassicVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "classic" => ClassicVariant::Classic,
            "classic-1024" => ClassicVariant::Classic1024,
            "classic-2048" => ClassicVariant::Classic2048,
            "classic-deep" => ClassicVariant::ClassicDeep,
            "conv-cifar" => ClassicVariant::ConvCifar,
            other => return Err(Error::Config(format!("unknown classical variant {other:?}"))),
        })
    }
}

/// Convolution channels of the CIFAR encoder, input first.
pub const CONV_CIFAR_CHANNELS: [usize; 6] = [3, 32, 64, 128, 128, 128];

#[derive(Clone, Debug)]
enum Stage {
    Dense(Linear),
    Conv(Conv2d),
    Relu,
    Tanh,
    AvgPool2,
    Upsample2,
    /// Per-sample target shape.
    Reshape(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct ClassicalAe<T> {
    pub variant: ClassicVariant,
    pub k: usize,
    input: [usize; 3],
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    params: ParamStore<T>,
}

impl<T: Real> ClassicalAe<T> {
    pub fn build(variant: ClassicVariant, k: usize, seed: u64) -> Result<Self> {
        match variant {
            ClassicVariant::ConvCifar => Self::conv_cifar(k, seed),
            _ => Self::dense_mnist(variant, k, seed),
        }
    }

    /// Dense autoencoder for `1×28×28` inputs.
    pub fn dense_mnist(variant: ClassicVariant, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("classical bottleneck must be at least 1".into()));
        }
        let hidden = variant
            .hidden_sizes()
            .ok_or_else(|| Error::Config(format!("{} is not a dense MNIST variant", variant.name())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut widths = vec![784];
        widths.extend_from_slice(hidden);
        widths.push(k);

        let mut encoder = vec![Stage::Reshape(vec![784])];
        for (i, w) in widths.windows(2).enumerate() {
            let l = Linear::new(&mut params, &format!("encoder.{i}"), w[0], w[1], Init::FanInUniform, &mut rng)?;
            encoder.push(Stage::Dense(l));
            encoder.push(Stage::Relu);
        }
        let mut decoder = Vec::new();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let last = rev.len() - 2;
        for (i, w) in rev.windows(2).enumerate() {
            let l = Linear::new(&mut params, &format!("decoder.{i}"), w[0], w[1], Init::FanInUniform, &mut rng)?;
            decoder.push(Stage::Dense(l));
            decoder.push(if i == last { Stage::Tanh } else { Stage::Relu });
        }
        decoder.push(Stage::Reshape(vec![1, 28, 28]));
        Ok(ClassicalAe {
            variant,
            k,
            input: [1, 28, 28],
            encoder,
            decoder,
            params,
        })
    }

    /// Convolutional autoencoder for `3×32×32` inputs: 3×3 stride-1
    /// convolutions over [`CONV_CIFAR_CHANNELS`] with 2×2 average pooling
    /// after the second and fourth, then a dense layer to `k`. The decoder
    /// mirrors it with nearest-neighbour upsampling.
    pub fn conv_cifar(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("classical bottleneck must be at least 1".into()));
        }
        let ch = CONV_CIFAR_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let flat = ch[5] * 8 * 8;

        let mut encoder = Vec::new();
        for i in 0..5 {
            let c = Conv2d::new(&mut params, &format!("encoder.conv{i}"), ch[i], ch[i + 1], 3, 1, 1, Init::FanInUniform, &mut rng)?;
            encoder.push(Stage::Conv(c));
            encoder.push(Stage::Relu);
            if i == 1 || i == 3 {
                encoder.push(Stage::AvgPool2);
            }
        }
        encoder.push(Stage::Reshape(vec![flat]));
        encoder.push(Stage::Dense(Linear::new(&mut params, "encoder.fc", flat, k, Init::FanInUniform, &mut rng)?));
        encoder.push(Stage::Relu);

        let mut decoder = vec![
            Stage::Dense(Linear::new(&mut params, "decoder.fc", k, flat, Init::FanInUniform, &mut rng)?),
            Stage::Relu,
            Stage::Reshape(vec![ch[5], 8, 8]),
        ];
        for i in (0..5).rev() {
            if i == 3 || i == 1 {
                decoder.push(Stage::Upsample2);
            }
            let c = Conv2d::new(&mut params, &format!("decoder.conv{i}"), ch[i + 1], ch[i], 3, 1, 1, Init::FanInUniform, &mut rng)?;
            decoder.push(Stage::Conv(c));
            decoder.push(if i == 0 { Stage::Tanh } else { Stage::Relu });
        }
        Ok(ClassicalAe {
            variant: ClassicVariant::ConvCifar,
            k,
            input: [3, 32, 32],
            encoder,
            decoder,
            params,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn run(&self, stages: &[Stage], tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for stage in stages {
            h = match stage {
                Stage::Dense(l) => l.forward(tape, &self.params, &h)?,
                Stage::Conv(c) => c.forward(tape, &self.params, &h)?,
                Stage::Relu => tape.relu(&h)?,
                Stage::Tanh => tape.tanh(&h)?,
                Stage::AvgPool2 => tape.avg_pool(&h, 2)?,
                Stage::Upsample2 => tape.upsample_nearest(&h, 2)?,
                Stage::Reshape(sample) => {
                    let mut shape = vec![h.shape()[0]];
                    shape.extend(sample);
                    tape.reshape(&h, &shape)?
                }
            };
        }
        Ok(h)
    }

    /// `[B,C,H,W] → [B×k]`.
    pub fn encode(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input {
            let mut expected = vec![0];
            expected.extend(self.input);
            return Err(Error::shape("classical input", s, &expected));
        }
        self.run(&self.encoder, tape, x)
    }

    /// Shape of the encoder activation entering the dense bottleneck layer.
    pub fn pre_bottleneck_shape(&self) -> Vec<usize> {
        let mut shape = self.input.to_vec();
        for stage in &self.encoder {
            match stage {
                Stage::Conv(c) => shape[0] = c.out_channels,
                Stage::AvgPool2 => {
                    shape[1] /= 2;
                    shape[2] /= 2;
                }
                Stage::Reshape(_) => break,
                _ => {}
            }
        }
        shape
    }

    pub fn decode(&self, tape: &mut Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        self.run(&self.decoder, tape, y)
    }

    pub fn reconstruct(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Reconstruction<T>> {
        let y = self.encode(tape, x)?;
        let x_hat = self.decode(tape, &y)?;
        Ok(Reconstruction { x_hat, y, z: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Dense layer shapes written out by hand, independent of the builder.
    fn dense_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn mirrored(hidden: &[usize], k: usize) -> usize {
        let mut enc = vec![784];
        enc.extend_from_slice(hidden);
        enc.push(k);
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        dense_count(&enc) + dense_count(&dec)
    }

    #[test]
    fn classic_k12_count() {
        let ae = ClassicalAe::<f32>::build(ClassicVariant::Classic, 12, 0).unwrap();
        assert_eq!(ae.params().count(), 1_136_156);
        assert_eq!(dense_count(&[784, 512, 256, 128, 12]), 567_692);
        assert_eq!(dense_count(&[12, 128, 256, 512, 784]), 568_464);
    }

    #[test]
    fn variant_counts_match_arithmetic() {
        for v in [ClassicVariant::Classic1024, ClassicVariant::Classic2048, ClassicVariant::ClassicDeep] {
            let ae = ClassicalAe::<f32>::build(v, 32, 0).unwrap();
            assert_eq!(ae.params().count(), mirrored(v.hidden_sizes().unwrap(), 32), "{}", v.name());
        }
    }

    #[test]
    fn count_grows_with_k() {
        let counts: Vec<usize> = [1, 4, 8, 12, 32, 64]
            .iter()
            .map(|&k| ClassicalAe::<f32>::build(ClassicVariant::Classic, k, 0).unwrap().params().count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn conv_cifar_shapes_and_count() {
        let ae = ClassicalAe::<f32>::conv_cifar(300, 0).unwrap();
        assert_eq!(ae.pre_bottleneck_shape(), vec![128, 8, 8]);
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let ch = [3, 32, 64, 128, 128, 128];
        let convs: usize = ch.windows(2).map(|w| conv(w[0], w[1]) + conv(w[1], w[0])).sum();
        let dense = (8192 * 300 + 300) + (300 * 8192 + 8192);
        assert_eq!(ae.params().count(), convs + dense);
    }

    #[test]
    fn decoder_output_in_tanh_range() {
        let ae = ClassicalAe::<f64>::build(ClassicVariant::Classic, 4, 1).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_fn([2, 1, 28, 28], |i| ((i % 17) as f64 - 8.0) * 10.0));
        let r = ae.reconstruct(&mut tape, &x).unwrap();
        assert_eq!(r.x_hat.shape(), &[2, 1, 28, 28]);
        assert!(r.x_hat.value().data().iter().all(|v| v.abs() < 1.0));

        let conv = ClassicalAe::<f32>::conv_cifar(8, 2).unwrap();
        let x = tape_input(&[1, 3, 32, 32]);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        let r = conv.reconstruct(&mut tape, &xv).unwrap();
        assert_eq!(r.y.shape(), &[1, 8]);
        assert_eq!(r.x_hat.shape(), &[1, 3, 32, 32]);
        assert!(r.x_hat.value().data().iter().all(|v| v.abs() < 1.0));
    }

    fn tape_input(shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |i| ((i * 31 % 255) as f32 / 127.5) - 1.0)
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(ClassicalAe::<f32>::build(ClassicVariant::Classic, 0, 0).is_err());
        assert!("classic-4096".parse::<ClassicVariant>().is_err());
        assert_eq!("classic-deep".parse::<ClassicVariant>().unwrap(), ClassicVariant::ClassicDeep);
    }
}
