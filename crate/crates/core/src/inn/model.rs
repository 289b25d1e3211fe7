//! Stacks of invertible blocks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::inn::clamp::{Clamp, ScaleMonitor};
use crate::inn::coupling::{AffineCoupling, SubnetKind};
use crate::tensor::Real;

/// Fixed reordering of axis 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPermutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
    pub seed: Option<u64>,
}

impl ChannelPermutation {
    /// `out[k] = in[perm[k]]`.
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(Error::Contract(format!("{perm:?} is not a permutation")));
            }
            inverse[p] = k;
        }
        Ok(ChannelPermutation {
            perm,
            inverse,
            seed: None,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new((0..n).collect()).expect("identity is a permutation")
    }

    pub fn seeded(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut p = Self::new(perm).expect("shuffle is a permutation");
        p.seed = Some(seed);
        p
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.permute_axis(x, 1, &self.perm)
    }

    pub fn backward<T: Real>(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.permute_axis(x, 1, &self.inverse)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Coupling(AffineCoupling),
    Permutation(ChannelPermutation),
    /// Invertible `r×r` space-to-depth rearrangement.
    SpaceToDepth(usize),
    /// `[B, ...sample] ↔ [B, D]`.
    Flatten(Vec<usize>),
}

/// Layer sizes and seeds of an image INN.
///
/// The pipeline is `SpaceToDepth(2)`, then `conv_couplings` ×
/// (convolutional coupling + seeded channel permutation), then a flatten
/// and one fully connected coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct InnArchitecture {
    /// Per-sample `[C, H, W]`.
    pub input: [usize; 3],
    pub conv_couplings: usize,
    pub conv_hidden: usize,
    pub fc_hidden: usize,
    pub clamp: Clamp,
    pub init_seed: u64,
    pub permutation_seed: u64,
}

impl InnArchitecture {
    pub fn mnist() -> Self {
        InnArchitecture {
            input: [1, 28, 28],
            conv_couplings: 3,
            conv_hidden: 100,
            fc_hidden: 180,
            clamp: Clamp::default(),
            init_seed: 0,
            permutation_seed: 0,
        }
    }

    pub fn cifar() -> Self {
        InnArchitecture {
            input: [3, 32, 32],
            conv_hidden: 128,
            fc_hidden: 1000,
            ..Self::mnist()
        }
    }

    /// `2×2×2` input, latent dimension 8. For gradient oracles.
    pub fn tiny() -> Self {
        InnArchitecture {
            input: [2, 2, 2],
            conv_couplings: 1,
            conv_hidden: 3,
            fc_hidden: 5,
            ..Self::mnist()
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn with_seeds(mut self, init_seed: u64, permutation_seed: u64) -> Self {
        self.init_seed = init_seed;
        self.permutation_seed = permutation_seed;
        self
    }
}

/// An invertible network `x ↔ latent` with its weights.
#[derive(Clone, Debug)]
pub struct InnModel<T> {
    pub arch: InnArchitecture,
    blocks: Vec<Block>,
    params: ParamStore<T>,
    monitor: ScaleMonitor,
}

impl<T: Real> InnModel<T> {
    pub fn build(arch: InnArchitecture) -> Result<Self> {
        let [c, h, w] = arch.input;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("input {:?} is not divisible by 2 spatially", arch.input)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(arch.init_seed);
        let mut params = ParamStore::new();
        let mut blocks = vec![Block::SpaceToDepth(2)];
        let channels = c * 4;
        for i in 0..arch.conv_couplings {
            blocks.push(Block::Coupling(AffineCoupling::new(
                &mut params,
                &format!("coupling{i}"),
                SubnetKind::Conv,
                channels,
                arch.conv_hidden,
                arch.clamp,
                &mut rng,
            )?));
            blocks.push(Block::Permutation(ChannelPermutation::seeded(
                channels,
                arch.permutation_seed.wrapping_add(i as u64),
            )));
        }
        blocks.push(Block::Flatten(vec![channels, h / 2, w / 2]));
        blocks.push(Block::Coupling(AffineCoupling::new(
            &mut params,
            &format!("coupling{}", arch.conv_couplings),
            SubnetKind::Fc,
            arch.latent_dim(),
            arch.fc_hidden,
            arch.clamp,
            &mut rng,
        )?));
        Ok(InnModel {
            arch,
            blocks,
            params,
            monitor: ScaleMonitor::default(),
        })
    }

    pub fn mnist() -> Result<Self> {
        Self::build(InnArchitecture::mnist())
    }

    pub fn cifar() -> Result<Self> {
        Self::build(InnArchitecture::cifar())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Largest `|clamped scale|` seen since the last reset.
    pub fn scale_monitor(&self) -> &ScaleMonitor {
        &self.monitor
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            let mut expected = vec![0];
            expected.extend(self.arch.input);
            return Err(Error::shape("inn input", s, &expected));
        }
        Ok(())
    }

    /// `[B,C,H,W] → [B,D]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = match block {
                Block::Coupling(c) => c.forward(tape, &self.params, &h, Some(&self.monitor))?,
                Block::Permutation(p) => p.forward(tape, &h)?,
                Block::SpaceToDepth(r) => tape.space_to_depth(&h, *r)?,
                Block::Flatten(sample) => {
                    let batch = h.shape()[0];
                    tape.reshape(&h, &[batch, sample.iter().product()])?
                }
            };
        }
        Ok(h)
    }

    /// `[B,D] → [B,C,H,W]`, applying block inverses in reverse order.
    pub fn inverse(&self, tape: &mut Tape<T>, latent: &Var<T>) -> Result<Var<T>> {
        let s = latent.shape();
        if s.len() != 2 || s[1] != self.latent_dim() {
            return Err(Error::shape("inn latent", s, &[0, self.latent_dim()]));
        }
        let mut h = latent.clone();
        for block in self.blocks.iter().rev() {
            h = match block {
                Block::Coupling(c) => c.inverse(tape, &self.params, &h, Some(&self.monitor))?,
                Block::Permutation(p) => p.backward(tape, &h)?,
                Block::SpaceToDepth(r) => tape.depth_to_space(&h, *r)?,
                Block::Flatten(sample) => {
                    let mut shape = vec![h.shape()[0]];
                    shape.extend(sample);
                    tape.reshape(&h, &shape)?
                }
            };
        }
        Ok(h)
    }
}
