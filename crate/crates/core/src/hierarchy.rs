//! Two-level masked latent hierarchy.
//!
//! A chain of latent-space units hangs off the end of an analysis stack. Unit
//! `n` halves the incoming features, emits a latent through its head, and
//! hands its features to unit `n + 1`. Synthesis runs deepest first: each unit
//! merges its masked latent with the upsampled output of the unit below and
//! doubles the extents again.

use rand::Rng;

use crate::entropy::EntropyModel;
use crate::error::{shape_err, Result};
use crate::nn::{Conv, ConvT, Gdn, DEFAULT_LEAKY_SLOPE};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const NUM_LEVELS: usize = 2;

/// Per-level latent tensors; index 0 is level 1 (finest).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> LatentHierarchy<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(shape_err!("expected {NUM_LEVELS} latent levels, got {}", levels.len()));
        }
        for n in 1..levels.len() {
            let [b0, c0, h0, w0] = levels[n - 1].shape();
            let [b1, c1, h1, w1] = levels[n].shape();
            if b0 != b1 || c0 != c1 || h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(shape_err!(
                    "level {} latent {:?} is not half of level {} latent {:?}",
                    n + 1,
                    levels[n].shape(),
                    n,
                    levels[n - 1].shape()
                ));
            }
        }
        Ok(LatentHierarchy { levels })
    }

    pub fn zeros(shape_level1: [usize; 4]) -> Self {
        let [b, c, h, w] = shape_level1;
        LatentHierarchy { levels: vec![Tensor::zeros([b, c, h, w]), Tensor::zeros([b, c, h / 2, w / 2])] }
    }
}

/// Multiplies a latent by a `(b, 1, h, w)` binary mask, broadcast over channels.
pub fn apply_mask<T: Real>(tape: &mut Tape<'_, T>, latent: Var, mask: Var) -> Result<Var> {
    let [b, _, h, w] = tape.shape(latent);
    let m = tape.shape(mask);
    if m != [b, 1, h, w] {
        return Err(shape_err!("mask {:?} does not cover latent {:?}", m, tape.shape(latent)));
    }
    tape.mask_channels(latent, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// Downsampling only.
    A,
    /// Downsampling plus a conditional entropy model.
    B,
}

#[derive(Clone, Debug)]
pub struct LsUnit {
    pub kind: UnitKind,
    down: Conv,
    down_gdn: Gdn,
    latent_head: Conv,
    merge_head: Conv,
    up: ConvT,
    up_gdn: Gdn,
    pub entropy: Option<EntropyModel>,
}

impl LsUnit {
    /// `deepest` units merge only their own latent; others also take the
    /// upsampled features of the unit below.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kind: UnitKind,
        transform: usize,
        latent: usize,
        deepest: bool,
    ) -> Self {
        let (l, n) = (transform, latent);
        let down = Conv::new(store, rng, &format!("{name}.down"), l, l, 3, 2);
        let down_gdn = Gdn::new(store, &format!("{name}.down_gdn"), l, false);
        let latent_head = Conv::new(store, rng, &format!("{name}.latent_head"), l, n, 3, 1);
        let merge_in = if deepest { n } else { n + l };
        let merge_head = Conv::new(store, rng, &format!("{name}.merge_head"), merge_in, l, 3, 1);
        let up = ConvT::new(store, rng, &format!("{name}.up"), l, l, 3, 2);
        let up_gdn = Gdn::new(store, &format!("{name}.up_gdn"), l, true);
        let entropy =
            (kind == UnitKind::B).then(|| EntropyModel::new(store, rng, &format!("{name}.entropy"), n, l, !deepest));
        LsUnit { kind, down, down_gdn, latent_head, merge_head, up, up_gdn, entropy }
    }
}

/// Units ordered from level 1 to the deepest level.
#[derive(Clone, Debug)]
pub struct LsChain {
    pub units: Vec<LsUnit>,
}

impl LsChain {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kind: UnitKind,
        transform: usize,
        latent: usize,
    ) -> Self {
        let units = (0..NUM_LEVELS)
            .map(|i| {
                LsUnit::new(store, rng, &format!("{name}.unit{}", i + 1), kind, transform, latent, i + 1 == NUM_LEVELS)
            })
            .collect();
        LsChain { units }
    }

    /// Masked per-level latents and the deepest features.
    pub fn analyze<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var, masks: &[Var]) -> Result<(Vec<Var>, Var)> {
        check_levels(masks.len())?;
        let mut f = features;
        let mut latents = Vec::with_capacity(self.units.len());
        for (unit, &mask) in self.units.iter().zip(masks) {
            f = unit.down.forward(tape, f)?;
            f = unit.down_gdn.forward(tape, f)?;
            let lat = unit.latent_head.forward(tape, f)?;
            latents.push(apply_mask(tape, lat, mask)?);
        }
        Ok((latents, f))
    }

    /// Features at the chain's input resolution rebuilt from masked latents.
    pub fn synthesize<T: Real>(&self, tape: &mut Tape<'_, T>, latents: &[Var], masks: &[Var]) -> Result<Var> {
        check_levels(masks.len())?;
        check_levels(latents.len())?;
        let mut deeper: Option<Var> = None;
        for (i, unit) in self.units.iter().enumerate().rev() {
            let lat = apply_mask(tape, latents[i], masks[i])?;
            let input = match deeper {
                Some(d) => tape.concat_channels(lat, d)?,
                None => lat,
            };
            let g = unit.merge_head.forward(tape, input)?;
            let g = unit.up.forward(tape, g)?;
            deeper = Some(unit.up_gdn.forward(tape, g)?);
        }
        Ok(deeper.expect("chain has units"))
    }
}

fn check_levels(n: usize) -> Result<()> {
    if n != NUM_LEVELS {
        return Err(shape_err!("expected {NUM_LEVELS} levels, got {n}"));
    }
    Ok(())
}

/// Invertible split of a single latent into a full-resolution detail part and
/// a half-resolution coarse part.
#[derive(Clone, Debug)]
pub struct SplitNet {
    enc_down: Conv,
    enc_out: Conv,
    dec_up: ConvT,
    dec_out: Conv,
}

impl SplitNet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        transform: usize,
        latent: usize,
    ) -> Self {
        let (l, n) = (transform, latent);
        SplitNet {
            enc_down: Conv::new(store, rng, &format!("{name}.le0"), n, l, 3, 2),
            enc_out: Conv::new(store, rng, &format!("{name}.le1"), l, n, 3, 1),
            dec_up: ConvT::new(store, rng, &format!("{name}.ld0"), n, l, 3, 2),
            dec_out: Conv::new(store, rng, &format!("{name}.ld1"), l, n, 3, 1),
        }
    }

    pub fn encoder<T: Real>(&self, tape: &mut Tape<'_, T>, z1: Var) -> Result<Var> {
        let h = self.enc_down.forward(tape, z1)?;
        let h = tape.leaky_relu(h, T::lit(DEFAULT_LEAKY_SLOPE));
        self.enc_out.forward(tape, h)
    }

    pub fn decoder<T: Real>(&self, tape: &mut Tape<'_, T>, z12: Var) -> Result<Var> {
        let h = self.dec_up.forward(tape, z12)?;
        let h = tape.leaky_relu(h, T::lit(DEFAULT_LEAKY_SLOPE));
        self.dec_out.forward(tape, h)
    }

    /// `z12 = l_e(z1)`, `z11 = z1 - l_d(z12)`.
    pub fn split<T: Real>(&self, tape: &mut Tape<'_, T>, z1: Var) -> Result<(Var, Var)> {
        let [_, _, h, w] = tape.shape(z1);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("latent extents {h}x{w} must be even to split"));
        }
        let z12 = self.encoder(tape, z1)?;
        let pred = self.decoder(tape, z12)?;
        let z11 = tape.sub(z1, pred)?;
        Ok((z11, z12))
    }

    /// `z1 = z11 + l_d(z12)`.
    pub fn merge<T: Real>(&self, tape: &mut Tape<'_, T>, z11: Var, z12: Var) -> Result<Var> {
        let [b, c, h, w] = tape.shape(z11);
        let s = tape.shape(z12);
        if s != [b, c, h / 2, w / 2] || h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("cannot merge {:?} with {:?}", [b, c, h, w], s));
        }
        let pred = self.decoder(tape, z12)?;
        tape.add(z11, pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mask_semantics() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::inference(&store);
        let x = tape.constant(random([1, 3, 4, 4], 1));
        let ones = tape.constant(Tensor::ones([1, 1, 4, 4]));
        let zeros = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let half = tape.constant(Tensor::from_fn([1, 1, 4, 4], |[_, _, y, _]| if y < 2 { 1.0 } else { 0.0 }));
        let a = apply_mask(&mut tape, x, ones).unwrap();
        assert_eq!(tape.value(a), tape.value(x));
        let z = apply_mask(&mut tape, x, zeros).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let once = apply_mask(&mut tape, x, half).unwrap();
        let twice = apply_mask(&mut tape, once, half).unwrap();
        assert_eq!(tape.value(once), tape.value(twice));
        let wrong = tape.constant(Tensor::ones([1, 1, 2, 2]));
        assert!(apply_mask(&mut tape, x, wrong).is_err());
    }

    fn chain(kind: UnitKind) -> (ParamStore<f64>, LsChain) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = LsChain::new(&mut store, &mut rng, "c", kind, 4, 3);
        (store, c)
    }

    #[test]
    fn chain_shapes_and_masking() {
        let (store, c) = chain(UnitKind::A);
        let mut tape = Tape::inference(&store);
        let f = tape.constant(random([1, 4, 16, 16], 2));
        let m1 = tape.constant(Tensor::ones([1, 1, 8, 8]));
        let m2 = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let (lat, deep) = c.analyze(&mut tape, f, &[m1, m2]).unwrap();
        assert_eq!(tape.shape(deep), [1, 4, 4, 4]);
        assert_eq!(tape.shape(lat[0]), [1, 3, 8, 8]);
        assert!(tape.value(lat[1]).data().iter().all(|&v| v == 0.0));
        let out = c.synthesize(&mut tape, &lat, &[m1, m2]).unwrap();
        assert_eq!(tape.shape(out), [1, 4, 16, 16]);
        let bad = tape.constant(Tensor::ones([1, 1, 4, 4]));
        assert!(c.analyze(&mut tape, f, &[bad, m2]).is_err());
    }

    #[test]
    fn level2_perturbation_under_level1_mask_is_invisible() {
        let (store, c) = chain(UnitKind::B);
        let mut tape = Tape::inference(&store);
        let m1 = tape.constant(Tensor::ones([1, 1, 8, 8]));
        let m2 = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let l1 = tape.constant(random([1, 3, 8, 8], 4));
        let l2a = tape.constant(random([1, 3, 4, 4], 5));
        let l2b = tape.constant(random([1, 3, 4, 4], 6));
        let a = c.synthesize(&mut tape, &[l1, l2a], &[m1, m2]).unwrap();
        let b = c.synthesize(&mut tape, &[l1, l2b], &[m1, m2]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    fn split_net(seed: u64) -> (ParamStore<f64>, SplitNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = SplitNet::new(&mut store, &mut rng, "split", 5, 4);
        (store, s)
    }

    #[test]
    fn split_merge_is_exact() {
        let (store, s) = split_net(8);
        let mut tape = Tape::inference(&store);
        let z = random([1, 4, 16, 16], 9).map(|v| v * 50.0);
        let zv = tape.constant(z.clone());
        let (z11, z12) = s.split(&mut tape, zv).unwrap();
        assert_eq!(tape.shape(z11), [1, 4, 16, 16]);
        assert_eq!(tape.shape(z12), [1, 4, 8, 8]);
        let back = s.merge(&mut tape, z11, z12).unwrap();
        assert!(tape.value(back).max_abs_diff(&z).unwrap() < 1e-6);
        let odd = tape.constant(Tensor::zeros([1, 4, 5, 6]));
        assert!(s.split(&mut tape, odd).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_coarse_part() {
        let (mut store, s) = split_net(10);
        for id in [s.enc_out.weight, s.enc_out.bias] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::inference(&store);
        let z = random([1, 4, 8, 8], 11);
        let zv = tape.constant(z.clone());
        let (z11, z12) = s.split(&mut tape, zv).unwrap();
        assert!(tape.value(z12).data().iter().all(|&v| v == 0.0));
        let zero = tape.constant(Tensor::zeros([1, 4, 4, 4]));
        let pred = s.decoder(&mut tape, zero).unwrap();
        let expect = z.zip_map(tape.value(pred), |a, b| a - b).unwrap();
        assert!(tape.value(z11).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn round_trip_is_parameter_independent() {
        let (store, s) = split_net(12);
        let z = random([1, 4, 8, 8], 13);
        let mut tape = Tape::new(&store);
        let zv = tape.constant(z.clone());
        let (a, b) = s.split(&mut tape, zv).unwrap();
        let back = s.merge(&mut tape, a, b).unwrap();
        let d = tape.sub(back, zv).unwrap();
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                assert!(g.max_abs() < 1e-12);
            }
        }
    }
}
