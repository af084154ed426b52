//! Conditional entropy model for one latent level: a hyperprior, a causal
//! context model, and a mixture head, optionally conditioned on the upsampled
//! reconstruction of the next coarser level.

use rand::Rng;

use super::gmm::{GmmParams, MIXTURE_COMPONENTS};
use crate::error::Result;
use crate::nn::{Conv, ConvT, MaskedConv, DEFAULT_LEAKY_SLOPE};
use crate::quant::Quantizer;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const CONTEXT_KERNEL: usize = 5;
const K: usize = MIXTURE_COMPONENTS;

#[derive(Clone, Debug)]
pub struct EntropyModel {
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub conditioned: bool,
    hyper_analysis: [Conv; 3],
    hyper_synthesis: [ConvT; 2],
    hyper_out: Conv,
    context: MaskedConv,
    head_hidden: Conv,
    head_out: Conv,
    prior_logits: ParamId,
    prior_means: ParamId,
    prior_scale_raw: ParamId,
}

/// Batched rate terms for one level.
pub struct LevelRate {
    /// Bits of the latent at transmitted positions.
    pub latent_bits: Var,
    /// Bits of the hyper latent.
    pub hyper_bits: Var,
    /// Quantized hyper latent.
    pub hyper: Var,
    /// Hyper-decoder features the mixture head consumes.
    pub features: Var,
}

fn leaky<T: Real>(tape: &mut Tape<'_, T>, x: Var) -> Var {
    tape.leaky_relu(x, T::lit(DEFAULT_LEAKY_SLOPE))
}

fn leaky_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * T::lit(DEFAULT_LEAKY_SLOPE)
    }
}

impl EntropyModel {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        latent_channels: usize,
        hidden: usize,
        conditioned: bool,
    ) -> Self {
        let n = latent_channels;
        let l = hidden;
        let cond = if conditioned { n } else { 0 };
        let hyper_analysis = [
            Conv::new(store, rng, &format!("{name}.ha0"), n + cond, l, 3, 1),
            Conv::new(store, rng, &format!("{name}.ha1"), l, l, 3, 2),
            Conv::new(store, rng, &format!("{name}.ha2"), l, l, 3, 2),
        ];
        let hyper_synthesis = [
            ConvT::new(store, rng, &format!("{name}.hs0"), l, l, 3, 2),
            ConvT::new(store, rng, &format!("{name}.hs1"), l, l, 3, 2),
        ];
        let hyper_out = Conv::new(store, rng, &format!("{name}.hs2"), l + cond, l, 3, 1);
        let context = MaskedConv::new(store, rng, &format!("{name}.context"), n, l, CONTEXT_KERNEL);
        let head_hidden = Conv::new(store, rng, &format!("{name}.head0"), 2 * l, l, 1, 1);
        let head_out = Conv::new(store, rng, &format!("{name}.head1"), l, 3 * K * n, 1, 1);
        let prior_logits = store.add(format!("{name}.prior.logits"), Tensor::zeros([1, K * l, 1, 1]));
        let prior_means = store.add(
            format!("{name}.prior.means"),
            Tensor::from_fn([1, K * l, 1, 1], |[_, c, _, _]| T::lit((c / l) as f64 - 1.0)),
        );
        let prior_scale_raw = store.add(format!("{name}.prior.scale"), Tensor::full([1, K * l, 1, 1], T::lit(1.0)));
        EntropyModel {
            latent_channels,
            hyper_channels: l,
            conditioned,
            hyper_analysis,
            hyper_synthesis,
            hyper_out,
            context,
            head_hidden,
            head_out,
            prior_logits,
            prior_means,
            prior_scale_raw,
        }
    }

    /// Hyper analysis of the unquantized transmitted latent.
    pub fn hyper_encode<T: Real>(&self, tape: &mut Tape<'_, T>, latent: Var, cond: Option<Var>) -> Result<Var> {
        let mut x = match (self.conditioned, cond) {
            (true, Some(c)) => tape.concat_channels(latent, c)?,
            _ => latent,
        };
        for (i, conv) in self.hyper_analysis.iter().enumerate() {
            x = conv.forward(tape, x)?;
            if i + 1 < self.hyper_analysis.len() {
                x = leaky(tape, x);
            }
        }
        Ok(x)
    }

    /// Features at latent resolution derived from the quantized hyper latent.
    pub fn hyper_decode<T: Real>(&self, tape: &mut Tape<'_, T>, hyper: Var, cond: Option<Var>) -> Result<Var> {
        let mut x = hyper;
        for conv in &self.hyper_synthesis {
            x = conv.forward(tape, x)?;
            x = leaky(tape, x);
        }
        if let (true, Some(c)) = (self.conditioned, cond) {
            x = tape.concat_channels(x, c)?;
        }
        self.hyper_out.forward(tape, x)
    }

    /// Raw mixture outputs `(logits, means, scale_raw)` for every position.
    pub fn mixture_params<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var, values: Var) -> Result<[Var; 3]> {
        let ctx = self.context.forward(tape, values)?;
        let x = tape.concat_channels(features, ctx)?;
        let x = self.head_hidden.forward(tape, x)?;
        let x = leaky(tape, x);
        let raw = self.head_out.forward(tape, x)?;
        let m = K * self.latent_channels;
        Ok([tape.slice_channels(raw, 0, m)?, tape.slice_channels(raw, m, m)?, tape.slice_channels(raw, 2 * m, m)?])
    }

    fn prior<T: Real>(&self, tape: &mut Tape<'_, T>, shape: [usize; 4]) -> Result<[Var; 3]> {
        let [b, _, h, w] = shape;
        let mut out = [self.prior_logits, self.prior_means, self.prior_scale_raw].map(|id| tape.param(id));
        for v in &mut out {
            *v = tape.expand(*v, b, h, w)?;
        }
        Ok(out)
    }

    /// Rate of `values` (the quantized or noisy transmitted latent) and of the
    /// hyper latent derived from `latent`. Only positions where `mask` is one
    /// contribute latent bits.
    pub fn rate<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        latent: Var,
        values: Var,
        mask: Var,
        cond: Option<Var>,
        quantizer: &mut Quantizer,
    ) -> Result<LevelRate> {
        let h = self.hyper_encode(tape, latent, cond)?;
        let hyper = quantizer.apply(tape, h);
        let features = self.hyper_decode(tape, hyper, cond)?;
        let [lg, mu, sr] = self.mixture_params(tape, features, values)?;
        let bits = tape.gmm_bits(values, lg, mu, sr)?;
        let bits = tape.mask_channels(bits, mask)?;
        let latent_bits = tape.sum(bits);
        let shape = tape.shape(hyper);
        let [plg, pmu, psr] = self.prior(tape, shape)?;
        let hbits = tape.gmm_bits(hyper, plg, pmu, psr)?;
        let hyper_bits = tape.sum(hbits);
        Ok(LevelRate { latent_bits, hyper_bits, hyper, features })
    }

    /// Per-channel factorized distributions of the hyper latent.
    pub fn hyper_distributions<T: Real>(&self, store: &ParamStore<T>) -> Vec<GmmParams> {
        let l = self.hyper_channels;
        let (lg, mu, sr) =
            (store.value(self.prior_logits), store.value(self.prior_means), store.value(self.prior_scale_raw));
        (0..l)
            .map(|c| {
                let pick = |t: &Tensor<T>| std::array::from_fn(|k| t.data()[k * l + c].as_f64());
                GmmParams::from_raw(pick(lg), pick(mu), pick(sr))
            })
            .collect()
    }

    /// Mixture parameters for every channel at `(y, x)` of batch item 0,
    /// evaluated one position at a time so that encoder and decoder compute
    /// identical values from the causally available part of `values`.
    pub fn position_distributions<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        values: &Tensor<T>,
        y: usize,
        x: usize,
    ) -> Vec<GmmParams> {
        let n = self.latent_channels;
        let l = self.hyper_channels;
        let [_, _, h, w] = values.shape();
        let kk = self.context.kernel;
        let half = kk / 2;
        let cw = store.value(self.context.conv.weight).data();
        let cb = store.value(self.context.conv.bias).data();

        let mut input = Vec::with_capacity(2 * l);
        for c in 0..l {
            input.push(features.at(0, c, y, x));
        }
        for o in 0..l {
            let mut acc = cb[o];
            for i in 0..n {
                for ky in 0..kk {
                    for kx in 0..kk {
                        if !MaskedConv::tap_is_causal(kk, ky, kx) {
                            continue;
                        }
                        let (sy, sx) =
                            (y as isize + ky as isize - half as isize, x as isize + kx as isize - half as isize);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += cw[((o * n + i) * kk + ky) * kk + kx] * values.at(0, i, sy as usize, sx as usize);
                    }
                }
            }
            input.push(acc);
        }

        let hw = store.value(self.head_hidden.weight).data();
        let hb = store.value(self.head_hidden.bias).data();
        let hidden: Vec<T> = (0..l)
            .map(|o| {
                let mut acc = hb[o];
                for (i, &v) in input.iter().enumerate() {
                    acc += hw[o * 2 * l + i] * v;
                }
                leaky_scalar(acc)
            })
            .collect();

        let ow = store.value(self.head_out.weight).data();
        let ob = store.value(self.head_out.bias).data();
        let raw: Vec<f64> = (0..3 * K * n)
            .map(|o| {
                let mut acc = ob[o];
                for (i, &v) in hidden.iter().enumerate() {
                    acc += ow[o * l + i] * v;
                }
                acc.as_f64()
            })
            .collect();

        let m = K * n;
        (0..n)
            .map(|c| {
                let pick = |base: usize| std::array::from_fn(|k| raw[base + k * n + c]);
                GmmParams::from_raw(pick(0), pick(m), pick(2 * m))
            })
            .collect()
    }
}
