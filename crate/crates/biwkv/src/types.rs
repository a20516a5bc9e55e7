use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("non-finite value in {which} at flat index {index}")]
    NonFinite { which: &'static str, index: usize },
    #[error("shape mismatch: {what} has {got} elements, expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("empty sequence: T must be >= 1")]
    EmptySequence,
    #[error("channel count must be >= 1")]
    NoChannels,
    #[error("denominator underflowed to zero at token {token}, channel {channel}")]
    DegenerateDenominator { token: usize, channel: usize },
    #[error("recurrence produced a non-finite state at token {token}, channel {channel} ({stage})")]
    NumericalOverflow {
        token: usize,
        channel: usize,
        stage: &'static str,
    },
    #[error("FLOPs count overflows u64 for T={t}, C={c}")]
    FlopsOverflow { t: u64, c: u64 },
}

/// Per-channel spatial decay `w` and current-token bonus `u`.
///
/// `w` is intentionally unconstrained in sign: a negative entry makes the
/// attention grow toward distant tokens instead of decaying.
#[derive(Debug, Clone)]
pub struct DecayParams<F> {
    w: Vec<F>,
    u: Vec<F>,
}

impl<F: Real> DecayParams<F> {
    pub fn new(w: Vec<F>, u: Vec<F>) -> Result<Self, KernelError> {
        if w.len() != u.len() {
            return Err(KernelError::ShapeMismatch {
                what: "u",
                got: u.len(),
                expected: w.len(),
            });
        }
        check_finite("w", &w)?;
        check_finite("u", &u)?;
        Ok(Self { w, u })
    }

    pub fn channels(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self) -> &[F] {
        &self.w
    }

    pub fn u(&self) -> &[F] {
        &self.u
    }
}

/// A `T x C` key matrix and matching value matrix, row-major.
#[derive(Debug, Clone)]
pub struct KvSequence<F> {
    tokens: usize,
    channels: usize,
    k: Vec<F>,
    v: Vec<F>,
}

impl<F: Real> KvSequence<F> {
    pub fn new(tokens: usize, channels: usize, k: Vec<F>, v: Vec<F>) -> Result<Self, KernelError> {
        if tokens == 0 {
            return Err(KernelError::EmptySequence);
        }
        if channels == 0 {
            return Err(KernelError::NoChannels);
        }
        let expected = tokens * channels;
        if k.len() != expected {
            return Err(KernelError::ShapeMismatch {
                what: "K",
                got: k.len(),
                expected,
            });
        }
        if v.len() != expected {
            return Err(KernelError::ShapeMismatch {
                what: "V",
                got: v.len(),
                expected,
            });
        }
        check_finite("K", &k)?;
        check_finite("V", &v)?;
        Ok(Self {
            tokens,
            channels,
            k,
            v,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn k(&self) -> &[F] {
        &self.k
    }

    pub fn v(&self) -> &[F] {
        &self.v
    }
}

/// Gradients returned by the backward pass: `gw`/`gu` are reduced over the
/// token dimension, `gk`/`gv` match the input shapes.
#[derive(Debug, Clone)]
pub struct WkvGradients<F> {
    pub gw: Vec<F>,
    pub gu: Vec<F>,
    pub gk: Vec<F>,
    pub gv: Vec<F>,
}

pub(crate) fn check_finite<F: Real>(which: &'static str, data: &[F]) -> Result<(), KernelError> {
    for (index, x) in data.iter().enumerate() {
        if !x.is_finite() {
            return Err(KernelError::NonFinite { which, index });
        }
    }
    Ok(())
}
