//! Two-layer augmented normalizing flow with additive couplings.
//!
//! Each layer first adds its analysis of the image branch to the latent
//! branch and then subtracts its synthesis of the new latent from the image
//! branch. The second layer quantizes the latent between those two steps; what
//! is left on the image branch afterwards is the residual the receiver
//! replaces with zeros.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::model::LevelRate;
use crate::error::{shape_err, Error, Result};
use crate::hierarchy::{apply_mask, LatentHierarchy, LsChain, SplitNet, UnitKind, NUM_LEVELS};
use crate::mask::{MaskPyramid, BLOCK_SIZE};
use crate::nn::{Conv, ConvT, Gdn};
use crate::quant::Quantizer;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

/// Ratio between image extents and the coarsest latent extents.
pub const TOTAL_DOWNSAMPLING: usize = 16;
pub const NUM_FLOW_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Hierarchical latent units in both layers.
    MAnfic,
    /// Single-scale first layer followed by a latent split.
    MsAnfic,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::MAnfic => 1,
            ModelKind::MsAnfic => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(ModelKind::MAnfic),
            2 => Ok(ModelKind::MsAnfic),
            _ => Err(Error::Format(format!("unknown model kind {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MAnfic => "m-anfic",
            ModelKind::MsAnfic => "ms-anfic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "m-anfic" | "m_anfic" | "m" => Ok(ModelKind::MAnfic),
            "ms-anfic" | "ms_anfic" | "ms" => Ok(ModelKind::MsAnfic),
            _ => Err(Error::InvalidArgument(format!("unknown model kind {name:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    pub kind: ModelKind,
    pub transform_channels: usize,
    pub latent_channels: usize,
}

impl FlowConfig {
    pub fn new(kind: ModelKind, transform_channels: usize, latent_channels: usize) -> Result<Self> {
        if transform_channels == 0 || latent_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(FlowConfig { kind, transform_channels, latent_channels })
    }
}

/// Two stride-2 convolutions, each followed by GDN.
#[derive(Clone, Debug)]
pub struct AnalysisStack {
    convs: [Conv; 2],
    gdns: [Gdn; 2],
}

impl AnalysisStack {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, l: usize) -> Self {
        AnalysisStack {
            convs: [
                Conv::new(store, rng, &format!("{name}.conv0"), 3, l, 3, 2),
                Conv::new(store, rng, &format!("{name}.conv1"), l, l, 3, 2),
            ],
            gdns: [
                Gdn::new(store, &format!("{name}.gdn0"), l, false),
                Gdn::new(store, &format!("{name}.gdn1"), l, false),
            ],
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (c, g) in self.convs.iter().zip(&self.gdns) {
            h = c.forward(tape, h)?;
            h = g.forward(tape, h)?;
        }
        Ok(h)
    }
}

/// Mirror of [`AnalysisStack`]: transposed convolution, IGDN, transposed
/// convolution to three channels. Its input has already passed an IGDN.
#[derive(Clone, Debug)]
pub struct SynthesisStack {
    up0: ConvT,
    igdn: Gdn,
    up1: ConvT,
}

impl SynthesisStack {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, l: usize) -> Self {
        SynthesisStack {
            up0: ConvT::new(store, rng, &format!("{name}.tconv0"), l, l, 3, 2),
            igdn: Gdn::new(store, &format!("{name}.igdn0"), l, true),
            up1: ConvT::new(store, rng, &format!("{name}.tconv1"), l, 3, 3, 2),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let h = self.up0.forward(tape, h)?;
        let h = self.igdn.forward(tape, h)?;
        self.up1.forward(tape, h)
    }
}

/// One autoencoding transform pair of the flow.
pub trait AutoencodeLayer {
    /// Latent-branch increment computed from the image branch.
    fn analyze<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, masks: &[Var]) -> Result<Vec<Var>>;
    /// Image-branch decrement computed from the latent branch.
    fn synthesize<T: Real>(&self, tape: &mut Tape<'_, T>, z: &[Var], masks: &[Var]) -> Result<Var>;
}

/// Analysis stack feeding a chain of latent-space units.
#[derive(Clone, Debug)]
pub struct HierarchicalLayer {
    analysis: AnalysisStack,
    pub chain: LsChain,
    synthesis: SynthesisStack,
}

impl HierarchicalLayer {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: UnitKind,
        cfg: &FlowConfig,
    ) -> Self {
        let l = cfg.transform_channels;
        HierarchicalLayer {
            analysis: AnalysisStack::new(store, rng, &format!("{name}.analysis"), l),
            chain: LsChain::new(store, rng, &format!("{name}.chain"), kind, l, cfg.latent_channels),
            synthesis: SynthesisStack::new(store, rng, &format!("{name}.synthesis"), l),
        }
    }
}

impl AutoencodeLayer for HierarchicalLayer {
    fn analyze<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, masks: &[Var]) -> Result<Vec<Var>> {
        let f = self.analysis.forward(tape, x)?;
        Ok(self.chain.analyze(tape, f, masks)?.0)
    }

    fn synthesize<T: Real>(&self, tape: &mut Tape<'_, T>, z: &[Var], masks: &[Var]) -> Result<Var> {
        let f = self.chain.synthesize(tape, z, masks)?;
        self.synthesis.forward(tape, f)
    }
}

/// Analysis stack with a single stride-2 latent head; the latent is not masked.
#[derive(Clone, Debug)]
pub struct SingleScaleLayer {
    analysis: AnalysisStack,
    head: Conv,
    tail: ConvT,
    tail_igdn: Gdn,
    synthesis: SynthesisStack,
}

impl SingleScaleLayer {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &FlowConfig) -> Self {
        let (l, n) = (cfg.transform_channels, cfg.latent_channels);
        SingleScaleLayer {
            analysis: AnalysisStack::new(store, rng, &format!("{name}.analysis"), l),
            head: Conv::new(store, rng, &format!("{name}.head"), l, n, 3, 2),
            tail: ConvT::new(store, rng, &format!("{name}.tail"), n, l, 3, 2),
            tail_igdn: Gdn::new(store, &format!("{name}.tail_igdn"), l, true),
            synthesis: SynthesisStack::new(store, rng, &format!("{name}.synthesis"), l),
        }
    }
}

impl AutoencodeLayer for SingleScaleLayer {
    fn analyze<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, _masks: &[Var]) -> Result<Vec<Var>> {
        let f = self.analysis.forward(tape, x)?;
        Ok(vec![self.head.forward(tape, f)?])
    }

    fn synthesize<T: Real>(&self, tape: &mut Tape<'_, T>, z: &[Var], _masks: &[Var]) -> Result<Var> {
        if z.len() != 1 {
            return Err(shape_err!("single-scale layer takes one latent, got {}", z.len()));
        }
        let h = self.tail.forward(tape, z[0])?;
        let h = self.tail_igdn.forward(tape, h)?;
        self.synthesis.forward(tape, h)
    }
}

/// `z' = z + analysis(x)`, `x' = x - synthesis(z')`. `z = None` stands for zeros.
pub fn layer_encode<T: Real, L: AutoencodeLayer>(
    layer: &L,
    tape: &mut Tape<'_, T>,
    x: Var,
    z: Option<&[Var]>,
    masks: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let a = layer.analyze(tape, x, masks)?;
    let z_new = match z {
        None => a,
        Some(z) => {
            if z.len() != a.len() {
                return Err(shape_err!("latent state has {} levels, analysis produced {}", z.len(), a.len()));
            }
            z.iter().zip(&a).map(|(&zi, &ai)| tape.add(zi, ai)).collect::<Result<_>>()?
        }
    };
    let s = layer.synthesize(tape, &z_new, masks)?;
    let x_new = tape.sub(x, s)?;
    Ok((x_new, z_new))
}

/// `x = x' + synthesis(z')`, `z = z' - analysis(x)`.
pub fn layer_decode<T: Real, L: AutoencodeLayer>(
    layer: &L,
    tape: &mut Tape<'_, T>,
    x: Var,
    z: &[Var],
    masks: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let s = layer.synthesize(tape, z, masks)?;
    let x_old = tape.add(x, s)?;
    let a = layer.analyze(tape, x_old, masks)?;
    if a.len() != z.len() {
        return Err(shape_err!("latent state has {} levels, analysis produced {}", z.len(), a.len()));
    }
    let z_old = z.iter().zip(&a).map(|(&zi, &ai)| tape.sub(zi, ai)).collect::<Result<_>>()?;
    Ok((x_old, z_old))
}

#[derive(Clone, Debug)]
pub enum FirstLayer {
    Hierarchical(HierarchicalLayer),
    SingleScale { layer: SingleScaleLayer, split: SplitNet },
}

/// Everything the encoder side produces for one batch.
pub struct Encoded {
    /// Masked, quantized (or noisy) latents, level 1 first.
    pub latents: Vec<Var>,
    /// Transmitted latents before quantization.
    pub transmitted: Vec<Var>,
    /// Part of the latent state dropped by masking (zero for the hierarchical model).
    pub remainder: Vec<Var>,
    /// Image-branch residual after both layers.
    pub residual: Var,
    /// Per-level rate terms, level 1 first.
    pub rates: Vec<LevelRate>,
    /// Total estimated bits over the batch.
    pub rate_bits: Var,
}

#[derive(Clone, Debug)]
pub struct AnfModel {
    pub config: FlowConfig,
    pub first: FirstLayer,
    pub second: HierarchicalLayer,
}

impl AnfModel {
    /// Registers freshly initialized parameters in `store`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = match config.kind {
            ModelKind::MAnfic => {
                FirstLayer::Hierarchical(HierarchicalLayer::new(store, &mut rng, "layer1", UnitKind::A, &config))
            }
            ModelKind::MsAnfic => FirstLayer::SingleScale {
                layer: SingleScaleLayer::new(store, &mut rng, "layer1", &config),
                split: SplitNet::new(store, &mut rng, "split", config.transform_channels, config.latent_channels),
            },
        };
        let second = HierarchicalLayer::new(store, &mut rng, "layer2", UnitKind::B, &config);
        AnfModel { config, first, second }
    }

    pub fn check_input(&self, shape: [usize; 4], masks: &[Var], tape: &Tape<'_, impl Real>) -> Result<()> {
        let [b, c, h, w] = shape;
        if c != 3 {
            return Err(shape_err!("expected 3 colour channels, got {c}"));
        }
        if h == 0 || w == 0 || h % BLOCK_SIZE != 0 || w % BLOCK_SIZE != 0 {
            return Err(shape_err!("image extents {h}x{w} must be positive multiples of {BLOCK_SIZE}"));
        }
        if masks.len() != NUM_LEVELS {
            return Err(Error::Mask(format!("expected {NUM_LEVELS} level masks, got {}", masks.len())));
        }
        for (i, &m) in masks.iter().enumerate() {
            let f = crate::mask::LEVEL_STRIDES[i];
            if tape.shape(m) != [b, 1, h / f, w / f] {
                return Err(Error::Mask(format!(
                    "level {} mask {:?} does not fit a {h}x{w} image",
                    i + 1,
                    tape.shape(m)
                )));
            }
        }
        Ok(())
    }

    fn first_encode<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, masks: &[Var]) -> Result<(Var, Vec<Var>)> {
        match &self.first {
            FirstLayer::Hierarchical(l) => layer_encode(l, tape, x, None, masks),
            FirstLayer::SingleScale { layer, split } => {
                let (x1, z) = layer_encode(layer, tape, x, None, masks)?;
                let (z11, z12) = split.split(tape, z[0])?;
                Ok((x1, vec![z11, z12]))
            }
        }
    }

    fn first_decode<T: Real>(&self, tape: &mut Tape<'_, T>, x1: Var, z: &[Var], masks: &[Var]) -> Result<Var> {
        match &self.first {
            FirstLayer::Hierarchical(l) => Ok(layer_decode(l, tape, x1, z, masks)?.0),
            FirstLayer::SingleScale { layer, split } => {
                let z1 = split.merge(tape, z[0], z[1])?;
                Ok(layer_decode(layer, tape, x1, &[z1], masks)?.0)
            }
        }
    }

    /// Runs both layers on a batch `x` of shape `(B, 3, H, W)` with per-level
    /// masks of shape `(B, 1, H / stride, W / stride)`.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        masks: &[Var],
        quantizer: &mut Quantizer,
    ) -> Result<Encoded> {
        self.check_input(tape.shape(x), masks, tape)?;
        let (x1, z1) = self.first_encode(tape, x, masks)?;
        let a2 = self.second.analyze(tape, x1, masks)?;
        let mut transmitted = Vec::with_capacity(NUM_LEVELS);
        let mut remainder = Vec::with_capacity(NUM_LEVELS);
        let mut latents = Vec::with_capacity(NUM_LEVELS);
        for n in 0..NUM_LEVELS {
            let state = tape.add(z1[n], a2[n])?;
            let t = apply_mask(tape, state, masks[n])?;
            remainder.push(tape.sub(state, t)?);
            let q = quantizer.apply(tape, t);
            latents.push(apply_mask(tape, q, masks[n])?);
            transmitted.push(t);
        }
        let mut rates: Vec<Option<LevelRate>> = (0..NUM_LEVELS).map(|_| None).collect();
        for n in (0..NUM_LEVELS).rev() {
            let em = self.second.chain.units[n].entropy.as_ref().expect("second layer units carry entropy models");
            let cond = if n + 1 < NUM_LEVELS { Some(tape.upsample2x(latents[n + 1])) } else { None };
            rates[n] = Some(em.rate(tape, transmitted[n], latents[n], masks[n], cond, quantizer)?);
        }
        let rates: Vec<LevelRate> = rates.into_iter().map(Option::unwrap).collect();
        let mut rate_bits = tape.add(rates[0].latent_bits, rates[0].hyper_bits)?;
        for r in &rates[1..] {
            rate_bits = tape.add(rate_bits, r.latent_bits)?;
            rate_bits = tape.add(rate_bits, r.hyper_bits)?;
        }
        let s2 = self.second.synthesize(tape, &latents, masks)?;
        let residual = tape.sub(x1, s2)?;
        Ok(Encoded { latents, transmitted, remainder, residual, rates, rate_bits })
    }

    /// Inverts [`AnfModel::encode`]. Without `residual` and `remainder` this is
    /// the receiver's reconstruction.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        latents: &[Var],
        masks: &[Var],
        residual: Option<Var>,
        remainder: Option<&[Var]>,
    ) -> Result<Var> {
        if latents.len() != NUM_LEVELS {
            return Err(shape_err!("expected {NUM_LEVELS} latent levels, got {}", latents.len()));
        }
        for (n, (&l, &m)) in latents.iter().zip(masks).enumerate() {
            let [b, _, h, w] = tape.shape(l);
            if tape.shape(m) != [b, 1, h, w] {
                return Err(Error::Mask(format!("level {} mask does not match its latent", n + 1)));
            }
        }
        let s2 = self.second.synthesize(tape, latents, masks)?;
        let x1 = match residual {
            Some(r) => tape.add(r, s2)?,
            None => s2,
        };
        let states: Vec<Var> = match remainder {
            Some(r) => latents.iter().zip(r).map(|(&l, &ri)| tape.add(l, ri)).collect::<Result<_>>()?,
            None => latents.to_vec(),
        };
        let a2 = self.second.analyze(tape, x1, masks)?;
        let z1: Vec<Var> = states.iter().zip(&a2).map(|(&s, &a)| tape.sub(s, a)).collect::<Result<_>>()?;
        self.first_decode(tape, x1, &z1, masks)
    }
}

/// Per-level mask tensors for a batch of one image.
pub fn mask_tensors<T: Real>(mask: &MaskPyramid) -> Vec<Tensor<T>> {
    (1..=NUM_LEVELS as u8).map(|l| mask.level_tensor(l)).collect()
}

/// Convenience wrapper over tensors: encodes one batch and returns the
/// quantized hierarchy, the residual and the estimated rate in bits.
pub fn anf_encode<T: Real>(
    model: &AnfModel,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    masks: &[Tensor<T>],
    quantize: bool,
) -> Result<(LatentHierarchy<T>, LatentHierarchy<T>, Tensor<T>, f64)> {
    let mut tape = Tape::inference(store);
    let xv = tape.constant(x.clone());
    let mv: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();
    let mut q = if quantize { Quantizer::round() } else { Quantizer::identity() };
    let enc = model.encode(&mut tape, xv, &mv, &mut q)?;
    let lat = LatentHierarchy::new(enc.latents.iter().map(|&v| tape.value(v).clone()).collect())?;
    let rem = LatentHierarchy::new(enc.remainder.iter().map(|&v| tape.value(v).clone()).collect())?;
    let bits = tape.value(enc.rate_bits).data()[0].as_f64();
    Ok((lat, rem, tape.value(enc.residual).clone(), bits))
}

/// Reconstruction from a hierarchy; `residual` and `remainder` default to zero.
pub fn anf_decode<T: Real>(
    model: &AnfModel,
    store: &ParamStore<T>,
    latents: &LatentHierarchy<T>,
    masks: &[Tensor<T>],
    residual: Option<&Tensor<T>>,
    remainder: Option<&LatentHierarchy<T>>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference(store);
    let lv: Vec<Var> = latents.levels.iter().map(|t| tape.constant(t.clone())).collect();
    let mv: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();
    let rv = residual.map(|r| tape.constant(r.clone()));
    let remv: Option<Vec<Var>> = remainder.map(|r| r.levels.iter().map(|t| tape.constant(t.clone())).collect());
    let out = model.decode(&mut tape, &lv, &mv, rv, remv.as_deref())?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::random_mask;
    use rand::Rng;

    fn image(size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn build(kind: ModelKind) -> (ParamStore<f32>, AnfModel) {
        let mut store = ParamStore::new();
        let model = AnfModel::new(&mut store, FlowConfig::new(kind, 8, 6).unwrap(), 1);
        (store, model)
    }

    #[test]
    fn invertible_without_quantization() {
        for kind in [ModelKind::MAnfic, ModelKind::MsAnfic] {
            let (store, model) = build(kind);
            let x = image(128, 2);
            let masks = mask_tensors(&random_mask(2, 2, [0.5, 0.5], 3).unwrap());
            let (lat, rem, res, bits) = anf_encode(&model, &store, &x, &masks, false).unwrap();
            assert!(bits.is_finite() && bits > 0.0);
            let back = anf_decode(&model, &store, &lat, &masks, Some(&res), Some(&rem)).unwrap();
            let err = back.max_abs_diff(&x).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn hierarchical_model_has_no_remainder() {
        let (store, model) = build(ModelKind::MAnfic);
        let x = image(64, 4);
        let masks = mask_tensors(&MaskPyramid::uniform(1, 1, 2).unwrap());
        let (lat, rem, _, _) = anf_encode(&model, &store, &x, &masks, true).unwrap();
        assert!(rem.levels.iter().all(|t| t.max_abs() == 0.0));
        assert!(lat.levels[0].max_abs() == 0.0);
        assert!(lat.levels[1].data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn split_model_has_fewer_parameters() {
        let (m, _) = build(ModelKind::MAnfic);
        let (ms, _) = build(ModelKind::MsAnfic);
        assert!(ms.scalar_count() < m.scalar_count());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, model) = build(ModelKind::MAnfic);
        let x = image(96, 5);
        let masks = mask_tensors::<f32>(&MaskPyramid::uniform(1, 1, 1).unwrap());
        assert!(anf_encode(&model, &store, &x, &masks, true).is_err());
        let x = image(128, 5);
        assert!(anf_encode(&model, &store, &x, &masks, true).is_err());
    }
}
