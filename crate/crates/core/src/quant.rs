//! Quantization proxies used in forward passes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Values pass through unchanged.
    Identity,
    /// Additive uniform noise on `[-0.5, 0.5)`.
    Noise,
    /// Rounding with an identity gradient.
    StraightThrough,
    /// Rounding; the result carries no gradient.
    Round,
}

pub struct Quantizer {
    pub mode: QuantMode,
    rng: ChaCha8Rng,
}

impl Quantizer {
    pub fn new(mode: QuantMode, seed: u64) -> Self {
        Quantizer { mode, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn round() -> Self {
        Self::new(QuantMode::Round, 0)
    }

    pub fn identity() -> Self {
        Self::new(QuantMode::Identity, 0)
    }

    pub fn apply<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self.mode {
            QuantMode::Identity => x,
            QuantMode::Round => tape.round(x),
            QuantMode::StraightThrough => tape.round_straight_through(x),
            QuantMode::Noise => {
                let shape = tape.shape(x);
                let rng = &mut self.rng;
                let noise = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-0.5..0.5)));
                let n = tape.constant(noise);
                tape.add(x, n).expect("noise matches input shape")
            }
        }
    }
}
