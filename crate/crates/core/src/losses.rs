//! Reconstruction, zero-padding and distribution-matching losses.
//!
//! The INN autoencoder objective is `L1(x, x̂) + L2(z, 0)`; the variational
//! variant adds `MMD²(q(y), p(y))` against a standard normal prior, using a
//! sum of inverse multiquadratic kernels `c / (c + ‖a − b‖²)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Kernel scales summed by the MMD term.
pub const DEFAULT_MMD_SCALES: [f64; 3] = [0.2, 1.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Adds the MMD term between `y` and prior samples.
    pub mmd: bool,
    pub mmd_scales: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mmd: false,
            mmd_scales: DEFAULT_MMD_SCALES.to_vec(),
        }
    }
}

impl LossConfig {
    pub fn vae() -> Self {
        LossConfig {
            mmd: true,
            ..Self::default()
        }
    }
}

/// Mean absolute error.
pub fn l1_recon<T: Real>(tape: &mut Tape<T>, x: &Var<T>, x_hat: &Var<T>) -> Result<Var<T>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("l1_recon", x.shape(), x_hat.shape()));
    }
    let d = tape.sub(x_hat, x)?;
    let a = tape.abs(&d)?;
    tape.mean(&a)
}

/// Mean of `z²`; zero for an empty `z`.
pub fn l2_zero<T: Real>(tape: &mut Tape<T>, z: &Var<T>) -> Result<Var<T>> {
    if z.value().numel() == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let sq = tape.mul(z, z)?;
    tape.mean(&sq)
}

pub fn imq_kernel<T: Real>(a: &[T], b: &[T], c: T) -> T {
    debug_assert_eq!(a.len(), b.len());
    let d2: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    c / (c + d2)
}

fn sample_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] if *n > 0 => Ok((*n, *k)),
        [0, _] => Err(Error::Domain(format!("empty {what} sample set"))),
        s => Err(Error::Contract(format!("{what} samples must be [n×k], got {s:?}"))),
    }
}

/// Biased (V-statistic) squared MMD between the rows of `a` and `b`,
/// summed over kernel scales. Non-negative, and exactly zero for identical
/// sample sets.
pub fn mmd2<T: Real>(a: &Tensor<T>, b: &Tensor<T>, scales: &[f64]) -> Result<T> {
    let (n, k) = sample_matrix(a, "first")?;
    let (m, kb) = sample_matrix(b, "second")?;
    if k != kb {
        return Err(Error::shape("mmd2", a.shape(), b.shape()));
    }
    let row = |t: &Tensor<T>, i: usize| -> Vec<T> { t.data()[i * k..(i + 1) * k].to_vec() };
    let ra: Vec<_> = (0..n).map(|i| row(a, i)).collect();
    let rb: Vec<_> = (0..m).map(|i| row(b, i)).collect();
    let mean_kernel = |xs: &[Vec<T>], ys: &[Vec<T>], c: T| -> T {
        let mut acc = T::zero();
        for x in xs {
            for y in ys {
                acc += imq_kernel(x, y, c);
            }
        }
        acc / T::from_usize(xs.len() * ys.len()).unwrap()
    };
    let mut total = T::zero();
    for &c in scales {
        let c = T::lit(c);
        total += mean_kernel(&ra, &ra, c) + mean_kernel(&rb, &rb, c) - T::lit(2.0) * mean_kernel(&ra, &rb, c);
    }
    // Rounding can leave a tiny negative residue for near-identical sets.
    Ok(total.max(T::zero()))
}

/// Gradients of [`mmd2`] with respect to both sample sets.
pub fn mmd2_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, scales: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, k) = sample_matrix(a, "first")?;
    let (m, _) = sample_matrix(b, "second")?;
    let (ad, bd) = (a.data(), b.data());
    let mut da = vec![T::zero(); n * k];
    let mut db = vec![T::zero(); m * k];
    let two = T::lit(2.0);

    // ∂/∂x c/(c + ‖x − y‖²) = −2c (x − y) / (c + ‖x − y‖²)²
    let pair = |x: &[T], y: &[T], c: T, weight: T, out: &mut [T]| {
        let d2: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let denom = c + d2;
        let f = -two * c / (denom * denom) * weight;
        for ((o, &p), &q) in out.iter_mut().zip(x).zip(y) {
            *o += f * (p - q);
        }
    };

    let nn = T::from_usize(n * n).unwrap();
    let mm = T::from_usize(m * m).unwrap();
    let nm = T::from_usize(n * m).unwrap();
    for &c in scales {
        let c = T::lit(c);
        for i in 0..n {
            let ai = &ad[i * k..(i + 1) * k];
            let mut gi = vec![T::zero(); k];
            for j in 0..n {
                // Each unordered pair appears twice in the double sum.
                pair(ai, &ad[j * k..(j + 1) * k], c, two / nn, &mut gi);
            }
            for j in 0..m {
                pair(ai, &bd[j * k..(j + 1) * k], c, -two / nm, &mut gi);
            }
            for (d, g) in da[i * k..(i + 1) * k].iter_mut().zip(gi) {
                *d += g;
            }
        }
        for i in 0..m {
            let bi = &bd[i * k..(i + 1) * k];
            let mut gi = vec![T::zero(); k];
            for j in 0..m {
                pair(bi, &bd[j * k..(j + 1) * k], c, two / mm, &mut gi);
            }
            for j in 0..n {
                pair(bi, &ad[j * k..(j + 1) * k], c, -two / nm, &mut gi);
            }
            for (d, g) in db[i * k..(i + 1) * k].iter_mut().zip(gi) {
                *d += g;
            }
        }
    }
    Ok((Tensor::new(a.shape(), da)?, Tensor::new(b.shape(), db)?))
}

/// `n` draws from the `k`-dimensional standard normal.
pub fn sample_prior<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Tensor<T> {
    Tensor::from_fn([n, k], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Total loss with its terms. The terms are the exact operands of the sum.
pub struct LossBreakdown<T> {
    pub total: Var<T>,
    pub recon: T,
    pub zero_pad: T,
    pub mmd: Option<T>,
}

/// `L1(x, x̂) + L2(z, 0)`, plus `MMD²(y, prior)` when `config.mmd` is set.
/// `y` is `[B×k]`; prior samples are drawn fresh from `rng`.
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    x_hat: &Var<T>,
    z: &Var<T>,
    y: &Var<T>,
    config: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown<T>> {
    let recon = l1_recon(tape, x, x_hat)?;
    let zero_pad = l2_zero(tape, z)?;
    let mut total = tape.add(&recon, &zero_pad)?;
    let mut mmd = None;
    if config.mmd {
        let (n, k) = match y.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::Contract(format!("y must be [B×k], got {s:?}"))),
        };
        let term = if k == 0 {
            tape.constant(Tensor::scalar(T::zero()))
        } else {
            let prior = tape.constant(sample_prior(rng, n, k));
            tape.mmd2(y, &prior, &config.mmd_scales)?
        };
        mmd = Some(term.value().item());
        total = tape.add(&total, &term)?;
    }
    Ok(LossBreakdown {
        recon: recon.value().item(),
        zero_pad: zero_pad.value().item(),
        mmd,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn l1_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let xh = tape.leaf(t(&[2], &[0.0, 0.0]));
        let l = l1_recon(&mut tape, &x, &xh).unwrap();
        assert_eq!(l.value().item(), 1.0);
        let g = tape.backward(&l, &mut Default::default()).unwrap();
        assert_eq!(g.get(&xh).unwrap().data(), &[-0.5, 0.5]);

        let same = l1_recon(&mut tape, &x, &x).unwrap();
        assert_eq!(same.value().item(), 0.0);
    }

    #[test]
    fn l1_tie_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let xh = tape.leaf(t(&[2], &[1.0, 3.0]));
        let l = l1_recon(&mut tape, &x, &xh).unwrap();
        let g = tape.backward(&l, &mut Default::default()).unwrap();
        assert_eq!(g.get(&xh).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn l2_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2], &[3.0, 4.0]));
        assert_eq!(l2_zero(&mut tape, &z).unwrap().value().item(), 12.5);
        let zero = tape.leaf(Tensor::zeros([5]));
        assert_eq!(l2_zero(&mut tape, &zero).unwrap().value().item(), 0.0);
        let empty = tape.leaf(Tensor::zeros([3, 0]));
        assert_eq!(l2_zero(&mut tape, &empty).unwrap().value().item(), 0.0);
    }

    #[test]
    fn imq_kernel_values() {
        assert_eq!(imq_kernel(&[0.3, 0.1], &[0.3, 0.1], 1.0), 1.0);
        assert_eq!(imq_kernel(&[0.0], &[1.0], 1.0), 0.5);
        let (a, b) = ([0.2, -1.0, 3.0], [1.5, 0.5, -0.25]);
        assert_eq!(imq_kernel(&a, &b, 0.7), imq_kernel(&b, &a, 0.7));
    }

    #[test]
    fn mmd_hand_computed() {
        let a = t(&[1, 1], &[0.0]);
        let b = t(&[1, 1], &[1.0]);
        assert_eq!(mmd2(&a, &b, &[1.0]).unwrap(), 1.0);
        assert_eq!(mmd2(&a, &a, &DEFAULT_MMD_SCALES).unwrap(), 0.0);
    }

    #[test]
    fn mmd_rejects_empty_and_mismatched() {
        let a = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(mmd2(&a, &Tensor::zeros([0, 2]), &[1.0]), Err(Error::Domain(_))));
        assert!(mmd2(&a, &Tensor::zeros([2, 3]), &[1.0]).is_err());
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::from_fn([5, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([4, 3], |_| rng.gen_range(-1.0..1.0));
        let bb = b.clone();
        let err = grad_check(
            move |tape, v| {
                let other = tape.constant(bb.clone());
                tape.mmd2(v, &other, &DEFAULT_MMD_SCALES)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let aa = a.clone();
        let err = grad_check(
            move |tape, v| {
                let other = tape.constant(aa.clone());
                tape.mmd2(&other, v, &DEFAULT_MMD_SCALES)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn total_loss_components_sum() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.leaf(t(&[2, 2], &[0.5, -0.5, 0.25, 1.0]));
        let zero = tape.leaf(Tensor::zeros([2, 2]));
        let y = tape.leaf(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let perfect = total_loss(&mut tape, &x, &x, &zero, &y, &LossConfig::default(), &mut rng).unwrap();
        assert_eq!(perfect.total.value().item(), 0.0);

        let xh = tape.leaf(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let z = tape.leaf(t(&[2, 1], &[1.0, -2.0]));
        let out = total_loss(&mut tape, &x, &xh, &z, &y, &LossConfig::vae(), &mut rng).unwrap();
        let expected = out.recon + out.zero_pad + out.mmd.unwrap();
        assert_eq!(out.total.value().item(), expected);
    }
}
