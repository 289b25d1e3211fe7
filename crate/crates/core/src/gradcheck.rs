//! Central finite-difference checks of tape gradients.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::inn::InnArchitecture;
use crate::losses::{total_loss, LossConfig};
use crate::models::InnAutoencoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Largest relative error between the tape gradient of scalar `f` at `x`
/// and central differences with step `eps`.
///
/// Entries where both gradients are below `1e-8` in magnitude are compared
/// absolutely, so exact zeros do not inflate the ratio.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &Var<T>) -> Result<Var<T>>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, &input)?;
    let grads = tape.backward(&out, &mut ParamStore::new())?;
    let analytic = grads
        .get(&input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf(probe);
        let out = f(&mut tape, &v)?;
        if !out.value().is_scalar() {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        Ok(out.value().item().to_f64().unwrap())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i].to_f64().unwrap();
        worst = worst.max(relative_error(a, numeric, 1e-8));
    }
    Ok(worst)
}

/// As [`grad_check`], but perturbs every parameter of `store` instead of an
/// input. `f` builds the loss from the store's current weights.
pub fn grad_check_params<T, F>(f: F, store: &ParamStore<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var<T>>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(&loss, &mut work)?;
    drop(tape);
    let analytic: Vec<Tensor<T>> = work.iter().map(|(_, p)| p.grad().clone()).collect();

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        Ok(f(&mut tape, s)?.value().item().to_f64().unwrap())
    };

    let ids: Vec<_> = work.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..work.get(id).value().numel() {
            let orig = work.get(id).value().data()[i];
            work.value_mut(id).data_mut()[i] = orig + T::lit(eps);
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - T::lit(eps);
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[i].to_f64().unwrap();
            worst = worst.max(relative_error(a, numeric, 1e-8));
        }
    }
    Ok(worst)
}

/// One named entry of [`suite`].
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_error: f64,
}

type Check = (&'static str, Vec<usize>, fn(&mut Tape<f64>, &Var<f64>) -> Result<Var<f64>>);

/// Fixed pseudo-random weights so that `Σ w·y` has a non-trivial gradient
/// in every coordinate of `y`.
fn probe(tape: &mut Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let w = Tensor::from_fn(y.shape(), |i| ((i * 7919 % 23) as f64 - 11.0) / 9.0);
    let w = tape.constant(w);
    let p = tape.mul(y, &w)?;
    tape.sum(&p)
}

/// Splits a flat input into two operands of the given shapes.
fn operands(tape: &mut Tape<f64>, x: &Var<f64>, a: &[usize], b: &[usize]) -> Result<(Var<f64>, Var<f64>)> {
    let na: usize = a.iter().product();
    let (xa, xb) = tape.split(x, 0, na)?;
    Ok((tape.reshape(&xa, a)?, tape.reshape(&xb, b)?))
}

fn checks() -> Vec<Check> {
    vec![
        ("matmul", vec![3 * 4 + 4 * 2], |t, x| {
            let (a, b) = operands(t, x, &[3, 4], &[4, 2])?;
            let y = t.matmul(&a, &b)?;
            probe(t, &y)
        }),
        ("add_bias", vec![3 * 4 + 4], |t, x| {
            let (a, b) = operands(t, x, &[3, 4], &[4])?;
            let y = t.add_bias(&a, &b)?;
            probe(t, &y)
        }),
        ("conv2d", vec![2 * 2 * 5 * 5 + 3 * 2 * 3 * 3 + 3], |t, x| {
            let (img, rest) = t.split(x, 0, 100)?;
            let (w, b) = operands(t, &rest, &[3, 2, 3, 3], &[3])?;
            let img = t.reshape(&img, &[2, 2, 5, 5])?;
            let y = t.conv2d(&img, &w, &b, 1, 1)?;
            probe(t, &y)
        }),
        ("conv2d_stride2", vec![2 * 5 * 5 + 2 * 2 * 3 * 3 + 2], |t, x| {
            let (img, rest) = t.split(x, 0, 50)?;
            let (w, b) = operands(t, &rest, &[2, 2, 3, 3], &[2])?;
            let img = t.reshape(&img, &[1, 2, 5, 5])?;
            let y = t.conv2d(&img, &w, &b, 2, 0)?;
            probe(t, &y)
        }),
        ("exp", vec![7], |t, x| {
            let y = t.exp(x)?;
            probe(t, &y)
        }),
        ("tanh", vec![7], |t, x| {
            let y = t.tanh(x)?;
            probe(t, &y)
        }),
        ("atan", vec![7], |t, x| {
            let y = t.atan(x)?;
            probe(t, &y)
        }),
        ("leaky_relu", vec![7], |t, x| {
            let y = t.leaky_relu(x, 0.1)?;
            probe(t, &y)
        }),
        ("relu", vec![7], |t, x| {
            let y = t.relu(x)?;
            probe(t, &y)
        }),
        ("abs", vec![7], |t, x| {
            let y = t.abs(x)?;
            probe(t, &y)
        }),
        ("neg", vec![7], |t, x| {
            let y = t.neg(x)?;
            probe(t, &y)
        }),
        ("scale", vec![7], |t, x| {
            let y = t.scale(x, -2.5)?;
            probe(t, &y)
        }),
        ("add", vec![8], |t, x| {
            let (a, b) = operands(t, x, &[2, 2], &[2, 2])?;
            let y = t.add(&a, &b)?;
            probe(t, &y)
        }),
        ("sub", vec![8], |t, x| {
            let (a, b) = operands(t, x, &[2, 2], &[2, 2])?;
            let y = t.sub(&a, &b)?;
            probe(t, &y)
        }),
        ("mul", vec![8], |t, x| {
            let (a, b) = operands(t, x, &[2, 2], &[2, 2])?;
            let y = t.mul(&a, &b)?;
            probe(t, &y)
        }),
        ("mul_scalar_broadcast", vec![5], |t, x| {
            let (a, b) = operands(t, x, &[4], &[])?;
            let y = t.mul(&a, &b)?;
            probe(t, &y)
        }),
        ("mean", vec![6], |t, x| {
            let y = t.exp(x)?;
            t.mean(&y)
        }),
        ("reshape", vec![6], |t, x| {
            let y = t.reshape(x, &[2, 3])?;
            let y = t.tanh(&y)?;
            probe(t, &y)
        }),
        ("concat", vec![2 * 3 + 2 * 2], |t, x| {
            let (a, b) = operands(t, x, &[2, 3], &[2, 2])?;
            let y = t.concat(&a, &b, 1)?;
            let y = t.tanh(&y)?;
            probe(t, &y)
        }),
        ("split", vec![12], |t, x| {
            let x = t.reshape(x, &[2, 6])?;
            let (a, b) = t.split(&x, 1, 2)?;
            let a = t.exp(&a)?;
            let pa = probe(t, &a)?;
            let pb = probe(t, &b)?;
            t.add(&pa, &pb)
        }),
        ("permute_axis", vec![2 * 4 * 2], |t, x| {
            let x = t.reshape(x, &[2, 4, 2])?;
            let y = t.permute_axis(&x, 1, &[2, 0, 3, 1])?;
            probe(t, &y)
        }),
        ("space_to_depth", vec![2 * 4 * 4], |t, x| {
            let x = t.reshape(x, &[1, 2, 4, 4])?;
            let y = t.space_to_depth(&x, 2)?;
            probe(t, &y)
        }),
        ("depth_to_space", vec![8 * 2 * 2], |t, x| {
            let x = t.reshape(x, &[1, 8, 2, 2])?;
            let y = t.depth_to_space(&x, 2)?;
            probe(t, &y)
        }),
        ("avg_pool", vec![2 * 4 * 4], |t, x| {
            let x = t.reshape(x, &[1, 2, 4, 4])?;
            let y = t.avg_pool(&x, 2)?;
            probe(t, &y)
        }),
        ("upsample_nearest", vec![2 * 2 * 2], |t, x| {
            let x = t.reshape(x, &[1, 2, 2, 2])?;
            let y = t.upsample_nearest(&x, 2)?;
            probe(t, &y)
        }),
        ("mmd2", vec![4 * 3 + 5 * 3], |t, x| {
            let (a, b) = operands(t, x, &[4, 3], &[5, 3])?;
            t.mmd2(&a, &b, &crate::losses::DEFAULT_MMD_SCALES)
        }),
        ("soft_clamp", vec![7], |t, x| {
            let s = t.scale(x, 3.0)?;
            let y = crate::inn::soft_clamp(t, &s, 2.0)?;
            probe(t, &y)
        }),
    ]
}

/// Inputs kept away from the kinks of `abs` and the rectifiers.
fn check_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Tiny INN autoencoder (`D = 8`) with small random weights everywhere.
fn tiny_autoencoder(k: usize, seed: u64) -> Result<InnAutoencoder<f64>> {
    let mut ae = InnAutoencoder::build(InnArchitecture::tiny().with_seeds(seed, seed), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = ae.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in ae.params_mut().value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(ae)
}

/// Gradient of the full INN autoencoder loss with respect to every weight,
/// for `D = 8`, `k = 4`. With `vae` the MMD term uses a fixed prior sample.
pub fn check_tiny_autoencoder(vae: bool, eps: f64) -> Result<f64> {
    let ae = tiny_autoencoder(4, 17)?;
    let x = check_input(&[3, 2, 2, 2], 23);
    let config = if vae { LossConfig::vae() } else { LossConfig::default() };
    grad_check_params(
        |tape, store| {
            let mut m = ae.clone();
            *m.params_mut() = store.clone();
            let xv = tape.constant(x.clone());
            let r = m.reconstruct(tape, &xv)?;
            let z = r.z.expect("inn reconstruction has z");
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            Ok(total_loss(tape, &xv, &r.x_hat, &z, &r.y, &config, &mut rng)?.total)
        },
        ae.params(),
        eps,
    )
}

/// Step for the whole-network checks. Smaller steps are dominated by
/// rounding in the summed loss.
pub const AUTOENCODER_EPS: f64 = 1e-4;

/// Finite-difference check of every differentiable op and of the tiny INN
/// autoencoder loss, at `f64`.
pub fn suite() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (i, (name, shape, f)) in checks().into_iter().enumerate() {
        let x = check_input(&shape, i as u64);
        out.push(CheckReport {
            name,
            max_rel_error: grad_check(f, &x, 1e-6)?,
        });
    }
    out.push(CheckReport {
        name: "inn_autoencoder",
        max_rel_error: check_tiny_autoencoder(false, AUTOENCODER_EPS)?,
    });
    out.push(CheckReport {
        name: "inn_vae",
        max_rel_error: check_tiny_autoencoder(true, AUTOENCODER_EPS)?,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::from_fn([5], |i| i as f64 * 0.3 - 1.0);
        let err = grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn exp_sum_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn([6], |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(
            |t, v| {
                let e = t.exp(v)?;
                t.sum(&e)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
