//! Affine coupling layers.
//!
//! The input is split in two halves along axis 1. Each half is scaled and
//! shifted by subnets that read the other half:
//!
//! ```text
//! y1 = x1 ⊙ exp(s2(x2)) + t2(x2)
//! y2 = x2 ⊙ exp(s1(y1)) + t1(y1)
//! ```
//!
//! and inverted in the opposite order, recovering `x2` from `y1` first.
//! Scale outputs pass through a [`Clamp`] before exponentiation.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::inn::clamp::{Clamp, ScaleMonitor};
use crate::layers::{Conv2d, Init, Linear};
use crate::tensor::Real;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubnetKind {
    /// `in-ch → hidden-ch → out-ch`, kernel 3, pad 1, stride 1.
    Conv,
    /// `in-dim → hidden → out-dim`.
    Fc,
}

#[derive(Clone, Debug)]
enum SubnetLayers {
    Conv(Conv2d, Conv2d),
    Fc(Linear, Linear),
}

/// Two-layer coupling function with a leaky ReLU in between.
#[derive(Clone, Debug)]
pub struct CouplingSubnet {
    pub kind: SubnetKind,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    layers: SubnetLayers,
}

impl CouplingSubnet {
    /// The hidden layer gets fan-in uniform weights; the output layer starts
    /// at zero so a fresh subnet outputs zeros.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: SubnetKind,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = match kind {
            SubnetKind::Conv => SubnetLayers::Conv(
                Conv2d::new(store, &format!("{name}.0"), in_dim, hidden, 3, 1, 1, Init::FanInUniform, rng)?,
                Conv2d::new(store, &format!("{name}.1"), hidden, out_dim, 3, 1, 1, Init::Zero, rng)?,
            ),
            SubnetKind::Fc => SubnetLayers::Fc(
                Linear::new(store, &format!("{name}.0"), in_dim, hidden, Init::FanInUniform, rng)?,
                Linear::new(store, &format!("{name}.1"), hidden, out_dim, Init::Zero, rng)?,
            ),
        };
        Ok(CouplingSubnet {
            kind,
            in_dim,
            hidden,
            out_dim,
            layers,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        match &self.layers {
            SubnetLayers::Conv(a, b) => {
                let h = a.forward(tape, store, x)?;
                let h = tape.leaky_relu(&h, LEAKY_SLOPE)?;
                b.forward(tape, store, &h)
            }
            SubnetLayers::Fc(a, b) => {
                let h = a.forward(tape, store, x)?;
                let h = tape.leaky_relu(&h, LEAKY_SLOPE)?;
                b.forward(tape, store, &h)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.layers {
            SubnetLayers::Conv(a, b) => a.param_count() + b.param_count(),
            SubnetLayers::Fc(a, b) => a.param_count() + b.param_count(),
        }
    }
}

/// One invertible coupling block acting on axis 1 of its input.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub name: String,
    pub s1: CouplingSubnet,
    pub t1: CouplingSubnet,
    pub s2: CouplingSubnet,
    pub t2: CouplingSubnet,
    /// Extent of axis 1.
    pub extent: usize,
    /// Length of the first half.
    pub split: usize,
    pub clamp: Clamp,
}

impl AffineCoupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: SubnetKind,
        extent: usize,
        hidden: usize,
        clamp: Clamp,
        rng: &mut R,
    ) -> Result<Self> {
        if extent < 2 {
            return Err(Error::Config(format!("coupling over extent {extent} cannot be split")));
        }
        if let Clamp::Soft(c) = clamp {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clamp magnitude {c} must be positive")));
            }
        }
        let split = extent / 2;
        let rest = extent - split;
        let mut sub = |tag: &str, from: usize, to: usize| {
            CouplingSubnet::new(store, &format!("{name}.{tag}"), kind, from, hidden, to, rng)
        };
        let s2 = sub("s2", rest, split)?;
        let t2 = sub("t2", rest, split)?;
        let s1 = sub("s1", split, rest)?;
        let t1 = sub("t1", split, rest)?;
        Ok(AffineCoupling {
            name: name.to_string(),
            s1,
            t1,
            s2,
            t2,
            extent,
            split,
            clamp,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.s1, &self.t1, &self.s2, &self.t2].iter().map(|s| s.param_count()).sum()
    }

    fn check<T: Real>(&self, x: &Var<T>) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1] != self.extent {
            return Err(Error::shape("coupling input", x.shape(), &[0, self.extent]));
        }
        Ok(())
    }

    fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        subnet: &CouplingSubnet,
        tag: &str,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        subnet
            .forward(tape, store, x)
            .map_err(|e| e.in_context(&format!("{} subnet {tag}", self.name)))
    }

    /// Clamped scale `s(x)`, reported to `monitor`.
    fn scale<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        subnet: &CouplingSubnet,
        tag: &str,
        x: &Var<T>,
        monitor: Option<&ScaleMonitor>,
    ) -> Result<Var<T>> {
        let raw = self.run(tape, store, subnet, tag, x)?;
        let s = self.clamp.apply(tape, &raw)?;
        if let Some(m) = monitor {
            m.observe(s.value().max_abs().to_f64().unwrap_or(f64::NAN));
        }
        Ok(s)
    }

    fn affine<T: Real>(&self, tape: &mut Tape<T>, x: &Var<T>, s: &Var<T>, t: &Var<T>, sign: f64) -> Result<Var<T>> {
        let ctx = |e: Error| e.in_context(&self.name);
        if sign > 0.0 {
            let e = tape.exp(s).map_err(ctx)?;
            let scaled = tape.mul(x, &e).map_err(ctx)?;
            tape.add(&scaled, t).map_err(ctx)
        } else {
            let neg = tape.neg(s)?;
            let e = tape.exp(&neg).map_err(ctx)?;
            let shifted = tape.sub(x, t).map_err(ctx)?;
            tape.mul(&shifted, &e).map_err(ctx)
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        monitor: Option<&ScaleMonitor>,
    ) -> Result<Var<T>> {
        self.check(x)?;
        let (x1, x2) = tape.split(x, 1, self.split)?;
        let s2 = self.scale(tape, store, &self.s2, "s2", &x2, monitor)?;
        let t2 = self.run(tape, store, &self.t2, "t2", &x2)?;
        let y1 = self.affine(tape, &x1, &s2, &t2, 1.0)?;
        let s1 = self.scale(tape, store, &self.s1, "s1", &y1, monitor)?;
        let t1 = self.run(tape, store, &self.t1, "t1", &y1)?;
        let y2 = self.affine(tape, &x2, &s1, &t1, 1.0)?;
        tape.concat(&y1, &y2, 1)
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: &Var<T>,
        monitor: Option<&ScaleMonitor>,
    ) -> Result<Var<T>> {
        self.check(y)?;
        let (y1, y2) = tape.split(y, 1, self.split)?;
        // x2 depends only on y1, so it is recovered first.
        let s1 = self.scale(tape, store, &self.s1, "s1", &y1, monitor)?;
        let t1 = self.run(tape, store, &self.t1, "t1", &y1)?;
        let x2 = self.affine(tape, &y2, &s1, &t1, -1.0)?;
        let s2 = self.scale(tape, store, &self.s2, "s2", &x2, monitor)?;
        let t2 = self.run(tape, store, &self.t2, "t2", &x2)?;
        let x1 = self.affine(tape, &y1, &s2, &t2, -1.0)?;
        tape.concat(&x1, &x2, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn fc_layer(extent: usize, clamp: Clamp) -> (ParamStore<f64>, AffineCoupling) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = AffineCoupling::new(&mut store, "c0", SubnetKind::Fc, extent, 1, clamp, &mut rng).unwrap();
        (store, layer)
    }

    #[test]
    fn zero_output_layers_give_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = AffineCoupling::new(&mut store, "c", SubnetKind::Conv, 4, 6, Clamp::default(), &mut rng).unwrap();
        let x = Tensor::from_fn([2, 4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &store, &xv, None).unwrap();
        assert_eq!(y.value(), &x);
        let back = layer.inverse(&mut tape, &store, &xv, None).unwrap();
        assert_eq!(back.value(), &x);
    }

    /// Stub subnets with constant outputs, via a hidden width of 1 whose
    /// output layer is all bias.
    #[test]
    fn scalar_halves_match_hand_evaluation() {
        let (mut store, layer) = fc_layer(2, Clamp::Off);
        let set_bias = |store: &mut ParamStore<f64>, name: &str, v: f64| {
            let id = store.id_of(&format!("c0.{name}.1.bias")).unwrap();
            store.value_mut(id).data_mut()[0] = v;
        };
        set_bias(&mut store, "s2", 0.5);
        set_bias(&mut store, "t2", 1.0);

        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let y = layer.forward(&mut tape, &store, &x, None).unwrap();
        let expected = 0.5f64.exp() + 1.0;
        assert!((y.value().data()[0] - expected).abs() < 1e-12);
        assert!((y.value().data()[0] - 2.648721).abs() < 1e-6);
        assert_eq!(y.value().data()[1], 2.0);

        let back = layer.inverse(&mut tape, &store, &y, None).unwrap();
        assert!((back.value().data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(back.value().data()[1], 2.0);
    }

    #[test]
    fn random_round_trips() {
        for seed in 0..5u64 {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = AffineCoupling::new(&mut store, "c", SubnetKind::Conv, 6, 5, Clamp::default(), &mut rng).unwrap();
            randomize(&mut store, seed + 100, 0.5);
            let x = Tensor::from_fn([3, 6, 4, 4], |_| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &store, &xv, None).unwrap();
            assert!(y.value().max_abs_diff(&x) > 1e-3, "layer should not be the identity");
            let back = layer.inverse(&mut tape, &store, &y, None).unwrap();
            assert!(back.value().max_abs_diff(&x) < 1e-10);
            let again = layer.forward(&mut tape, &store, &back, None).unwrap();
            assert!(again.value().max_abs_diff(y.value()) < 1e-10);
        }
    }

    #[test]
    fn odd_extent_splits_unevenly() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = AffineCoupling::new(&mut store, "c", SubnetKind::Fc, 5, 4, Clamp::default(), &mut rng).unwrap();
        randomize(&mut store, 9, 0.5);
        let x = Tensor::from_fn([2, 5], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &store, &xv, None).unwrap();
        let back = layer.inverse(&mut tape, &store, &y, None).unwrap();
        assert!(back.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn monitor_sees_bounded_scales() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = AffineCoupling::new(&mut store, "c", SubnetKind::Fc, 8, 16, Clamp::Soft(2.0), &mut rng).unwrap();
        randomize(&mut store, 5, 20.0);
        let monitor = ScaleMonitor::default();
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_fn([4, 8], |i| i as f64 - 16.0));
        layer.forward(&mut tape, &store, &x, Some(&monitor)).unwrap();
        assert!(monitor.max_abs() > 1.0);
        assert!(monitor.max_abs() < 2.0);
    }

    #[test]
    fn wrong_extent_is_rejected() {
        let (store, layer) = fc_layer(4, Clamp::default());
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros([1, 6]));
        assert!(layer.forward(&mut tape, &store, &x, None).is_err());
    }
}
