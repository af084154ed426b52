//! Parameterized layers built on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Lower bound on the GDN offset after reparametrization.
pub const GDN_BETA_MIN: f64 = 1e-6;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: [usize; 4], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Strided `k × k` convolution with `k / 2` zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, [c_out, c_in, k, k], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, [1, c_out, 1, 1], bound));
        Conv { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn c_in<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).channels()
    }
}

/// Transposed convolution that scales extents exactly by `stride`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl ConvT {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, [c_in, c_out, k, k], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, [1, c_out, 1, 1], bound));
        ConvT { weight, bias, stride, pad: k / 2, output_padding: stride - 1 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.output_padding)
    }
}

/// Generalized divisive normalization and its inverse.
///
/// `y_i = x_i / sqrt(β_i + Σ_j γ_ij x_j²)` (or `x_i ·` for the inverse), with
/// `β = β_raw² + GDN_BETA_MIN` and `γ = γ_raw²`.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta_raw: ParamId,
    pub gamma_raw: ParamId,
    pub inverse: bool,
}

impl Gdn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, inverse: bool) -> Self {
        let beta0 = (1.0 - GDN_BETA_MIN).sqrt();
        let gamma0 = 0.1f64.sqrt();
        let beta_raw = store.add(format!("{name}.beta"), Tensor::full([1, channels, 1, 1], T::lit(beta0)));
        let gamma_raw = store.add(
            format!("{name}.gamma"),
            Tensor::from_fn([channels, channels, 1, 1], |[o, i, _, _]| T::lit(if o == i { gamma0 } else { 0.0 })),
        );
        Gdn { beta_raw, gamma_raw, inverse }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let br = tape.param(self.beta_raw);
        let gr = tape.param(self.gamma_raw);
        let beta = tape.square_plus(br, T::lit(GDN_BETA_MIN));
        let gamma = tape.square_plus(gr, T::zero());
        gdn(tape, x, beta, gamma, self.inverse)
    }
}

/// GDN with explicit (already reparametrized) `beta` of shape `(1, C, 1, 1)`
/// and `gamma` of shape `(C, C, 1, 1)`.
pub fn gdn<T: Real>(tape: &mut Tape<'_, T>, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
    if tape.value(beta).data().iter().any(|&b| !(b > T::zero())) {
        return Err(Error::InvalidArgument("GDN beta must be positive".into()));
    }
    if tape.value(gamma).data().iter().any(|&g| g < T::zero()) {
        return Err(Error::InvalidArgument("GDN gamma must be non-negative".into()));
    }
    let sq = tape.square(x);
    let energy = tape.conv2d(sq, gamma, Some(beta), 1, 0)?;
    let norm = tape.sqrt(energy);
    if inverse {
        tape.mul(x, norm)
    } else {
        tape.div(x, norm)
    }
}

/// `k × k` convolution whose output at a position sees only inputs strictly
/// before it in raster order.
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub conv: Conv,
    pub kernel: usize,
}

impl MaskedConv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        MaskedConv { conv: Conv::new(store, rng, name, c_in, c_out, k, 1), kernel: k }
    }

    /// Whether tap `(ky, kx)` reads a position strictly before the centre.
    #[inline]
    pub fn tap_is_causal(kernel: usize, ky: usize, kx: usize) -> bool {
        let c = kernel / 2;
        ky < c || (ky == c && kx < c)
    }

    pub fn tap_mask<T: Real>(&self, c_out: usize, c_in: usize) -> Tensor<T> {
        let k = self.kernel;
        Tensor::from_fn(
            [c_out, c_in, k, k],
            |[_, _, ky, kx]| {
                if Self::tap_is_causal(k, ky, kx) {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.conv.weight);
        let [co, ci, _, _] = tape.shape(w);
        let mask = tape.constant(self.tap_mask(co, ci));
        let wm = tape.mul(w, mask)?;
        let b = tape.param(self.conv.bias);
        tape.conv2d(x, wm, Some(b), 1, self.conv.pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gdn_scalar(x: f64, beta: f64, gamma: f64, inverse: bool) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::scalar(x));
        let b = tape.constant(Tensor::scalar(beta));
        let g = tape.constant(Tensor::scalar(gamma));
        let y = gdn(&mut tape, xv, b, g, inverse).unwrap();
        tape.value(y).data()[0]
    }

    #[test]
    fn unit_denominator_is_identity() {
        assert_eq!(gdn_scalar(0.7, 1.0, 0.0, false), 0.7);
        assert_eq!(gdn_scalar(0.7, 1.0, 0.0, true), 0.7);
    }

    #[test]
    fn scalar_gdn_value() {
        let y = gdn_scalar(2.0, 1.0, 0.5, false);
        assert!((y - 2.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((y - 1.15470).abs() < 1e-5);
    }

    #[test]
    fn input_independent_denominator_cancels() {
        for &beta in &[0.3, 1.0, 4.5] {
            let x = -1.3;
            let y = gdn_scalar(x, beta, 0.0, false);
            let back = gdn_scalar(y, beta, 0.0, true);
            assert!((back - x).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_positive_beta() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.0));
        let g = tape.constant(Tensor::scalar(0.0));
        assert!(gdn(&mut tape, xv, b, g, false).is_err());
    }

    #[test]
    fn reparametrized_beta_stays_positive() {
        let mut store = ParamStore::<f64>::new();
        let layer = Gdn::new(&mut store, "g", 2, false);
        store.get_mut(layer.beta_raw).value.data_mut().fill(0.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::ones([1, 2, 2, 2]));
        let y = layer.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn masked_conv_is_causal() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mc = MaskedConv::new(&mut store, &mut rng, "ctx", 2, 3, 5);
        let base = Tensor::<f64>::from_fn([1, 2, 6, 6], |[_, c, y, x]| ((c * 37 + y * 11 + x * 5) % 7) as f64 - 3.0);
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::inference(&store);
            let x = tape.constant(t.clone());
            let y = mc.forward(&mut tape, x).unwrap();
            tape.value(y).clone()
        };
        let out = run(&base);
        let p = 3 * 6 + 2;
        let mut changed = base.clone();
        for c in 0..2 {
            for q in p..36 {
                changed.data_mut()[c * 36 + q] += 5.0;
            }
        }
        let out2 = run(&changed);
        for c in 0..3 {
            for q in 0..=p {
                assert_eq!(out.data()[c * 36 + q], out2.data()[c * 36 + q]);
            }
        }
    }

    use rand::SeedableRng;
}
