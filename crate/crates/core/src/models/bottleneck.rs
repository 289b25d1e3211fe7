use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Keeps the first `k` of `d` latent coordinates (`y`); the rest (`z`) are
/// replaced by zeros before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    k: usize,
    d: usize,
}

impl BottleneckSpec {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if k > d {
            return Err(Error::Config(format!("bottleneck {k} exceeds latent dimension {d}")));
        }
        Ok(BottleneckSpec { k, d })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn check_rows<T: Real>(&self, v: &Var<T>, width: usize, what: &str) -> Result<usize> {
        match v.shape() {
            [b, w] if *w == width => Ok(*b),
            s => Err(Error::Contract(format!("{what} must be [B×{width}], got {s:?}"))),
        }
    }

    /// `latent [B×D] → (y [B×k], z [B×(D−k)])`.
    pub fn split_latent<T: Real>(&self, tape: &mut Tape<T>, latent: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.check_rows(latent, self.d, "latent")?;
        tape.split(latent, 1, self.k)
    }

    /// `y [B×k] → [y, 0] [B×D]`. The zero block is a constant.
    pub fn zero_pad<T: Real>(&self, tape: &mut Tape<T>, y: &Var<T>) -> Result<Var<T>> {
        let batch = self.check_rows(y, self.k, "y")?;
        let zeros = tape.constant(Tensor::zeros([batch, self.d - self.k]));
        tape.concat(y, &zeros, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape<f64>, v: &[f64]) -> Var<f64> {
        tape.leaf(Tensor::new([1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn split_and_pad() {
        let spec = BottleneckSpec::new(2, 4).unwrap();
        let mut tape = Tape::new();
        let latent = row(&mut tape, &[1.0, 2.0, 3.0, 4.0]);
        let (y, z) = spec.split_latent(&mut tape, &latent).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);
        assert_eq!(z.value().data(), &[3.0, 4.0]);

        let padded = spec.zero_pad(&mut tape, &y).unwrap();
        assert_eq!(padded.value().data(), &[1.0, 2.0, 0.0, 0.0]);
        let (y2, z2) = spec.split_latent(&mut tape, &padded).unwrap();
        assert_eq!(y2.value(), y.value());
        assert!(z2.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extreme_bottlenecks() {
        let mut tape = Tape::new();
        let latent = row(&mut tape, &[1.0, 2.0, 3.0]);
        let full = BottleneckSpec::new(3, 3).unwrap();
        let (y, z) = full.split_latent(&mut tape, &latent).unwrap();
        assert_eq!(z.value().numel(), 0);
        assert_eq!(full.zero_pad(&mut tape, &y).unwrap().value(), latent.value());

        let none = BottleneckSpec::new(0, 3).unwrap();
        let (y, _) = none.split_latent(&mut tape, &latent).unwrap();
        assert_eq!(y.value().numel(), 0);
        assert!(BottleneckSpec::new(4, 3).is_err());
    }

    #[test]
    fn padding_blocks_gradient_into_zeros() {
        let spec = BottleneckSpec::new(1, 3).unwrap();
        let mut tape = Tape::new();
        let y = row(&mut tape, &[2.0]);
        let padded = spec.zero_pad(&mut tape, &y).unwrap();
        let loss = tape.sum(&padded).unwrap();
        let grads = tape.backward(&loss, &mut Default::default()).unwrap();
        assert_eq!(grads.get(&y).unwrap().data(), &[1.0]);
    }

    #[test]
    fn size_mismatch_is_contract_error() {
        let spec = BottleneckSpec::new(2, 4).unwrap();
        let mut tape = Tape::new();
        let y = row(&mut tape, &[1.0, 2.0, 3.0]);
        assert!(matches!(spec.zero_pad(&mut tape, &y), Err(Error::Contract(_))));
    }
}
