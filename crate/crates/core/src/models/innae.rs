//! An INN used as an autoencoder: the forward pass encodes, the inverse of
//! the zero-padded bottleneck code decodes.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::inn::{InnArchitecture, InnModel};
use crate::models::bottleneck::BottleneckSpec;
use crate::tensor::Real;

/// Outputs of one encode/decode pass.
pub struct Reconstruction<T> {
    pub x_hat: Var<T>,
    /// Bottleneck code `[B×k]`.
    pub y: Var<T>,
    /// Discarded latent block `[B×(D−k)]`; `None` for classical models.
    pub z: Option<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct InnAutoencoder<T> {
    pub inn: InnModel<T>,
    pub bottleneck: BottleneckSpec,
}

impl<T: Real> InnAutoencoder<T> {
    pub fn new(inn: InnModel<T>, k: usize) -> Result<Self> {
        let bottleneck = BottleneckSpec::new(k, inn.latent_dim())?;
        Ok(InnAutoencoder { inn, bottleneck })
    }

    pub fn build(arch: InnArchitecture, k: usize) -> Result<Self> {
        Self::new(InnModel::build(arch)?, k)
    }

    /// Same weights, different split between `y` and `z`.
    pub fn with_bottleneck(mut self, k: usize) -> Result<Self> {
        self.bottleneck = BottleneckSpec::new(k, self.inn.latent_dim())?;
        Ok(self)
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.inn.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.inn.params_mut()
    }

    /// `x → [y, z]`.
    pub fn encode(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let latent = self.inn.forward(tape, x)?;
        self.bottleneck.split_latent(tape, &latent)
    }

    /// `[y, 0] → x̂`.
    pub fn decode(&self, tape: &mut Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        let padded = self.bottleneck.zero_pad(tape, y)?;
        self.inn.inverse(tape, &padded)
    }

    /// Runs the forward and the inverse pass. Both visit the same weights,
    /// so a loss on `x̂` and a loss on `z` both reach every parameter.
    pub fn reconstruct(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Reconstruction<T>> {
        let (y, z) = self.encode(tape, x)?;
        let x_hat = self.decode(tape, &y)?;
        Ok(Reconstruction { x_hat, y, z: Some(z) })
    }
}
