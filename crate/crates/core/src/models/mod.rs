//! Autoencoders compared in the experiments: INNs with a zero-padded
//! bottleneck and classical encoder/decoder pairs.

pub mod bottleneck;
pub mod classical;
pub mod innae;

use std::fmt;
use std::str::FromStr;

pub use bottleneck::BottleneckSpec;
pub use classical::{ClassicVariant, ClassicalAe, CONV_CIFAR_CHANNELS};
pub use innae::{InnAutoencoder, Reconstruction};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::inn::{Clamp, InnArchitecture};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Per-sample `[C, H, W]`.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn dim(self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn inn_architecture(self) -> InnArchitecture {
        match self {
            DatasetKind::Mnist => InnArchitecture::mnist(),
            DatasetKind::Cifar10 => InnArchitecture::cifar(),
        }
    }

    /// Bottleneck sizes swept by default.
    pub fn default_bottlenecks(self) -> &'static [usize] {
        match self {
            DatasetKind::Mnist => &[1, 2, 4, 8, 12, 16, 24, 32, 48, 64],
            DatasetKind::Cifar10 => &[32, 64, 128, 256, 512, 768, 1024],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Inn,
    /// INN with the MMD prior-matching term on `y`.
    InnVae,
    Classical(ClassicVariant),
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Inn,
        ModelKind::InnVae,
        ModelKind::Classical(ClassicVariant::Classic),
        ModelKind::Classical(ClassicVariant::Classic1024),
        ModelKind::Classical(ClassicVariant::Classic2048),
        ModelKind::Classical(ClassicVariant::ClassicDeep),
        ModelKind::Classical(ClassicVariant::ConvCifar),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Inn => "inn",
            ModelKind::InnVae => "inn-vae",
            ModelKind::Classical(v) => v.name(),
        }
    }

    pub fn is_inn(self) -> bool {
        matches!(self, ModelKind::Inn | ModelKind::InnVae)
    }

    pub fn supports(self, dataset: DatasetKind) -> bool {
        match (self, dataset) {
            (ModelKind::Inn | ModelKind::InnVae, _) => true,
            (ModelKind::Classical(ClassicVariant::ConvCifar), d) => d == DatasetKind::Cifar10,
            (ModelKind::Classical(_), d) => d == DatasetKind::Mnist,
        }
    }

    /// The classical baseline used for a dataset by default.
    pub fn baseline(dataset: DatasetKind) -> Self {
        match dataset {
            DatasetKind::Mnist => ModelKind::Classical(ClassicVariant::Classic),
            DatasetKind::Cifar10 => ModelKind::Classical(ClassicVariant::ConvCifar),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inn" => Ok(ModelKind::Inn),
            "inn-vae" => Ok(ModelKind::InnVae),
            other => other.parse().map(ModelKind::Classical),
        }
    }
}

/// Everything needed to rebuild a model with identical initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub dataset: DatasetKind,
    pub kind: ModelKind,
    pub k: usize,
    pub clamp: Clamp,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(dataset: DatasetKind, kind: ModelKind, k: usize, seed: u64) -> Self {
        ModelSpec {
            dataset,
            kind,
            k,
            clamp: Clamp::default(),
            seed,
        }
    }

    pub fn inn_architecture(&self) -> InnArchitecture {
        InnArchitecture {
            clamp: self.clamp,
            ..self.dataset.inn_architecture().with_seeds(self.seed, self.seed)
        }
    }

    pub fn build<T: Real>(&self) -> Result<Autoencoder<T>> {
        if !self.kind.supports(self.dataset) {
            return Err(Error::Config(format!(
                "model {} is not defined for {}",
                self.kind, self.dataset
            )));
        }
        match self.kind {
            ModelKind::Inn | ModelKind::InnVae => {
                Ok(Autoencoder::Inn(InnAutoencoder::build(self.inn_architecture(), self.k)?))
            }
            ModelKind::Classical(v) => Ok(Autoencoder::Classical(ClassicalAe::build(v, self.k, self.seed)?)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Autoencoder<T> {
    Inn(InnAutoencoder<T>),
    Classical(ClassicalAe<T>),
}

impl<T: Real> Autoencoder<T> {
    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Autoencoder::Inn(m) => m.params(),
            Autoencoder::Classical(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Autoencoder::Inn(m) => m.params_mut(),
            Autoencoder::Classical(m) => m.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    pub fn bottleneck(&self) -> usize {
        match self {
            Autoencoder::Inn(m) => m.bottleneck.k(),
            Autoencoder::Classical(m) => m.k,
        }
    }

    pub fn reconstruct(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Reconstruction<T>> {
        match self {
            Autoencoder::Inn(m) => m.reconstruct(tape, x),
            Autoencoder::Classical(m) => m.reconstruct(tape, x),
        }
    }

    /// Largest pre-clamp coupling scale seen since the last reset.
    pub fn max_scale(&self) -> Option<f64> {
        match self {
            Autoencoder::Inn(m) => Some(m.inn.scale_monitor().max_abs()),
            Autoencoder::Classical(_) => None,
        }
    }
}

/// Parameter count of a model without keeping its weights.
pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    Ok(spec.build::<f32>()?.param_count())
}
