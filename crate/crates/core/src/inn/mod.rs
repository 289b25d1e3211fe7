//! Invertible building blocks and the networks assembled from them.

pub mod clamp;
pub mod coupling;
pub mod model;

pub use clamp::{soft_clamp, Clamp, ScaleMonitor, DEFAULT_CLAMP};
pub use coupling::{AffineCoupling, CouplingSubnet, SubnetKind, LEAKY_SLOPE};
pub use model::{Block, ChannelPermutation, InnArchitecture, InnModel};
