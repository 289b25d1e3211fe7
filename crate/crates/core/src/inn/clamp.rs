use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Real;

pub const DEFAULT_CLAMP: f64 = 2.0;

/// Bound applied to scale-subnet outputs before exponentiation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clamp {
    /// `(2C/π)·atan(s)`, strictly inside `(−C, C)`.
    Soft(f64),
    /// Raw scale outputs. Only for tests that need exact scalar arithmetic.
    Off,
}

impl Default for Clamp {
    fn default() -> Self {
        Clamp::Soft(DEFAULT_CLAMP)
    }
}

impl Clamp {
    pub fn magnitude(self) -> Option<f64> {
        match self {
            Clamp::Soft(c) => Some(c),
            Clamp::Off => None,
        }
    }

    pub fn apply<T: Real>(self, tape: &mut Tape<T>, s: &Var<T>) -> Result<Var<T>> {
        match self {
            Clamp::Soft(c) => soft_clamp(tape, s, c),
            Clamp::Off => Ok(s.clone()),
        }
    }
}

pub fn soft_clamp<T: Real>(tape: &mut Tape<T>, s: &Var<T>, c: f64) -> Result<Var<T>> {
    let a = tape.atan(s)?;
    tape.scale(&a, 2.0 * c / PI)
}

/// Running maximum of `|clamped scale|` across every coupling evaluation.
#[derive(Debug, Default)]
pub struct ScaleMonitor(AtomicU64);

impl ScaleMonitor {
    pub fn observe(&self, value: f64) {
        // Non-negative doubles order the same as their bit patterns.
        self.0.fetch_max(value.abs().to_bits(), Ordering::Relaxed);
    }

    pub fn max_abs(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for ScaleMonitor {
    fn clone(&self) -> Self {
        ScaleMonitor(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}
