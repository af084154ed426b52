//! Three-component Gaussian mixture over integer symbols.
//!
//! A symbol `s` owns the interval `[s - 0.5, s + 0.5)`; its probability is the
//! mixture mass on that interval. All arithmetic here is `f64` regardless of
//! the tensor precision of the caller, so encoder and decoder derive the same
//! coding tables from the same `f32` network outputs.

use std::f64::consts::{LN_2, SQRT_2};

use crate::error::{Error, Result};

pub const MIXTURE_COMPONENTS: usize = 3;
/// Lower bound on every component scale.
pub const SIGMA_MIN: f64 = 1e-3;
/// Probability floor used for rate estimates (matches the 16-bit table resolution).
pub const P_MIN: f64 = 1.0 / 32768.0;

const K: usize = MIXTURE_COMPONENTS;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of the standard normal on `[a, b]`, taken from whichever tail keeps
/// precision.
#[inline]
fn normal_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: [f64; K]) -> [f64; K] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; K];
    let mut total = 0.0;
    for k in 0..K {
        e[k] = (logits[k] - m).exp();
        total += e[k];
    }
    for v in &mut e {
        *v /= total;
    }
    e
}

/// Mixture parameters for one symbol position and channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: [f64; K],
    pub means: [f64; K],
    pub scales: [f64; K],
}

impl GmmParams {
    pub fn new(weights: [f64; K], means: [f64; K], scales: [f64; K]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("mixture weights {weights:?} are not on the simplex")));
        }
        if scales.iter().any(|&s| !(s >= SIGMA_MIN) || !s.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid means {means:?} / scales {scales:?}")));
        }
        Ok(GmmParams { weights, means, scales })
    }

    /// Maps unconstrained network outputs to valid parameters: softmax weights
    /// and `σ = SIGMA_MIN + softplus(raw)`.
    pub fn from_raw(logits: [f64; K], means: [f64; K], scale_raw: [f64; K]) -> Self {
        let mut scales = [0.0; K];
        for k in 0..K {
            scales[k] = SIGMA_MIN + softplus(scale_raw[k]);
        }
        GmmParams { weights: softmax(logits), means, scales }
    }

    pub fn single(mean: f64, scale: f64) -> Self {
        GmmParams { weights: [1.0, 0.0, 0.0], means: [mean; K], scales: [scale.max(SIGMA_MIN); K] }
    }

    /// Mixture CDF at `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for k in 0..K {
            acc += self.weights[k] * normal_cdf((t - self.means[k]) / self.scales[k]);
        }
        acc
    }

    /// Probability of integer symbol `s` (unfloored).
    pub fn interval_prob(&self, s: f64) -> f64 {
        let mut p = 0.0;
        for k in 0..K {
            let a = (s - 0.5 - self.means[k]) / self.scales[k];
            let b = (s + 0.5 - self.means[k]) / self.scales[k];
            p += self.weights[k] * normal_mass(a, b);
        }
        p
    }

    /// `-log2(max(p, P_MIN))`.
    pub fn bits(&self, s: f64) -> f64 {
        -self.interval_prob(s).max(P_MIN).log2()
    }
}

/// Code length of a (possibly noisy) value and its gradients with respect to
/// the value and the raw mixture outputs.
#[derive(Clone, Copy, Debug)]
pub struct BitsGrad {
    pub bits: f64,
    pub d_value: f64,
    pub d_logits: [f64; K],
    pub d_means: [f64; K],
    pub d_scale_raw: [f64; K],
}

pub fn bits_with_grad(value: f64, logits: [f64; K], means: [f64; K], scale_raw: [f64; K]) -> BitsGrad {
    let params = GmmParams::from_raw(logits, means, scale_raw);
    let mut masses = [0.0; K];
    let mut p = 0.0;
    for k in 0..K {
        let a = (value - 0.5 - means[k]) / params.scales[k];
        let b = (value + 0.5 - means[k]) / params.scales[k];
        masses[k] = normal_mass(a, b);
        p += params.weights[k] * masses[k];
    }
    let mut out = BitsGrad {
        bits: -p.max(P_MIN).log2(),
        d_value: 0.0,
        d_logits: [0.0; K],
        d_means: [0.0; K],
        d_scale_raw: [0.0; K],
    };
    if p <= P_MIN {
        return out;
    }
    let dbits_dp = -1.0 / (p * LN_2);
    for k in 0..K {
        let sigma = params.scales[k];
        let a = (value - 0.5 - means[k]) / sigma;
        let b = (value + 0.5 - means[k]) / sigma;
        let (pa, pb) = (normal_pdf(a), normal_pdf(b));
        let w = params.weights[k];
        out.d_value += dbits_dp * w * (pb - pa) / sigma;
        out.d_means[k] = dbits_dp * w * (pa - pb) / sigma;
        let dsigma = w * (a * pa - b * pb) / sigma;
        out.d_scale_raw[k] = dbits_dp * dsigma * sigmoid(scale_raw[k]);
        out.d_logits[k] = dbits_dp * w * (masses[k] - p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_single_component_matches_density() {
        let g = GmmParams::single(0.0, 100.0);
        let p = g.interval_prob(0.0);
        assert!((p - 0.003_989_42).abs() < 1e-6, "{p}");
    }

    #[test]
    fn symmetric_about_zero_mean() {
        let g = GmmParams::new([0.2, 0.5, 0.3], [0.0; 3], [0.7, 2.0, 5.0]).unwrap();
        for s in 0..40 {
            let s = s as f64;
            assert!((g.interval_prob(s) - g.interval_prob(-s)).abs() < 1e-15);
        }
    }

    #[test]
    fn masses_telescope_to_one() {
        let g = GmmParams::single(0.0, 1.0);
        let total: f64 = (-1000..=1000).map(|s| g.interval_prob(s as f64)).sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn tail_mass_keeps_precision() {
        let g = GmmParams::single(0.0, 1.0);
        // Far in the upper tail the naive CDF difference would round to zero.
        let p = g.interval_prob(12.0);
        assert!(p > 0.0 && p < 1e-30);
    }

    #[test]
    fn raw_mapping_is_valid() {
        let g = GmmParams::from_raw([3.0, -40.0, 0.1], [0.0, 1.0, -2.0], [-60.0, 0.0, 5.0]);
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.scales.iter().all(|&s| s >= SIGMA_MIN));
        assert!(GmmParams::new(g.weights, g.means, g.scales).is_ok());
        assert!(GmmParams::new([0.5, 0.6, -0.1], [0.0; 3], [1.0; 3]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let logits = [0.3, -0.4, 1.1];
        let means = [0.2, -1.3, 2.5];
        let raw = [0.1, -0.5, 0.8];
        let value = 0.37;
        let g = bits_with_grad(value, logits, means, raw);
        let f = |v: f64, l: [f64; 3], m: [f64; 3], r: [f64; 3]| bits_with_grad(v, l, m, r).bits;
        let h = 1e-6;
        let fd = (f(value + h, logits, means, raw) - f(value - h, logits, means, raw)) / (2.0 * h);
        assert!((fd - g.d_value).abs() < 1e-6);
        for k in 0..3 {
            let (mut lp, mut lm) = (logits, logits);
            lp[k] += h;
            lm[k] -= h;
            let fd = (f(value, lp, means, raw) - f(value, lm, means, raw)) / (2.0 * h);
            assert!((fd - g.d_logits[k]).abs() < 1e-6);
            let (mut mp, mut mm) = (means, means);
            mp[k] += h;
            mm[k] -= h;
            let fd = (f(value, logits, mp, raw) - f(value, logits, mm, raw)) / (2.0 * h);
            assert!((fd - g.d_means[k]).abs() < 1e-6);
            let (mut rp, mut rm) = (raw, raw);
            rp[k] += h;
            rm[k] -= h;
            let fd = (f(value, logits, means, rp) - f(value, logits, means, rm)) / (2.0 * h);
            assert!((fd - g.d_scale_raw[k]).abs() < 1e-6);
        }
    }
}
