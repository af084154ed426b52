//! Image ↔ bitstream using a trained model.
//!
//! Substreams are written deepest level first: level-2 hyper latent, level-2
//! latent, level-1 hyper latent, level-1 latent. Latent positions a mask
//! assigns to the other level are skipped by both sides.

use crate::entropy::bitstream::{read_bitstream, write_bitstream, Bitstream, Header, FORMAT_VERSION, HEADER_LEN};
use crate::entropy::range_coder::{RangeDecoder, RangeEncoder};
use crate::entropy::tables::{decode_value, encode_value, VALUE_MAX, VALUE_MIN};
use crate::entropy::{EntropyModel, GmmParams};
use crate::error::{Error, Result};
use crate::flow::{mask_tensors, AnfModel, FlowConfig, ModelKind};
use crate::hierarchy::{LatentHierarchy, NUM_LEVELS};
use crate::mask::{
    mask_deserialize, mask_serialize, rdo_mask_search, variance_mask, MaskPyramid, RdoOutcome, BLOCK_SIZE,
    DEFAULT_VARIANCE_THRESHOLD,
};
use crate::quant::Quantizer;
use crate::tensor::checkpoint::{checkpoint_hash, Checkpoint};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Rate-distortion trade-offs, indexed by the header's lambda index.
pub const LAMBDAS: [f64; 6] = [0.1, 0.05, 0.02, 0.01, 0.005, 0.002];

pub fn lambda_for_index(index: u8) -> Result<f64> {
    LAMBDAS
        .get(index as usize)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("lambda index {index} is outside 0..{}", LAMBDAS.len() - 1)))
}

/// Extents after replicate padding to whole mask blocks.
pub fn padded_extent(n: usize) -> usize {
    n.div_ceil(BLOCK_SIZE).max(1) * BLOCK_SIZE
}

/// Squared error on the 0–255 scale, averaged over all samples.
pub fn mse_255(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64 * 255.0 * 255.0)
}

/// Rounds to the 8-bit grid and maps back to `[0, 1]`.
pub fn quantize_to_8bit(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub const META_KIND: &str = "model_kind";
pub const META_TRANSFORM: &str = "transform_channels";
pub const META_LATENT: &str = "latent_channels";
pub const META_LAMBDA: &str = "lambda_index";

pub struct Codec {
    pub config: FlowConfig,
    pub store: ParamStore<f32>,
    pub model: AnfModel,
    pub hash: [u8; 8],
    pub lambda_index: Option<u8>,
}

/// How the encoder assigns blocks to hierarchy levels.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskMode {
    /// Luminance variance against a threshold.
    Variance(f64),
    /// Greedy Lagrangian search seeded with the variance mask.
    Rdo,
    /// Every block on one level.
    Uniform(u8),
    Given(MaskPyramid),
}

impl MaskMode {
    /// Parses `variance`, `rdo`, `fine`, `coarse` or `file:<path>`.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "variance" => Ok(MaskMode::Variance(DEFAULT_VARIANCE_THRESHOLD)),
            "rdo" => Ok(MaskMode::Rdo),
            "fine" => Ok(MaskMode::Uniform(1)),
            "coarse" => Ok(MaskMode::Uniform(2)),
            _ => match text.strip_prefix("file:") {
                Some(path) => Ok(MaskMode::Given(read_mask_file(std::path::Path::new(path))?)),
                None => Err(Error::InvalidArgument(format!("unknown mask mode {text:?}"))),
            },
        }
    }
}

/// Text mask: one row of block levels per line, `1` or `2` per block,
/// whitespace ignored.
pub fn parse_mask_text(text: &str) -> Result<MaskPyramid> {
    let rows: Vec<Vec<u8>> = text
        .lines()
        .map(|l| l.chars().filter(|c| !c.is_whitespace()).collect::<String>())
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.chars()
                .map(|c| match c {
                    '1' => Ok(1),
                    '2' => Ok(2),
                    _ => Err(Error::Mask(format!("mask level {c:?} is not 1 or 2"))),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Mask("mask rows are empty or ragged".into()));
    }
    MaskPyramid::from_blocks(BLOCK_SIZE, rows.len(), cols, rows.concat())
}

pub fn mask_text(mask: &MaskPyramid) -> String {
    let mut s = String::new();
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            s.push(if mask.level(r, c) == 1 { '1' } else { '2' });
        }
        s.push('\n');
    }
    s
}

pub fn read_mask_file(path: &std::path::Path) -> Result<MaskPyramid> {
    parse_mask_text(&std::fs::read_to_string(path)?)
}

pub struct EncodeResult {
    pub bytes: Vec<u8>,
    pub mask: MaskPyramid,
    /// Receiver-side reconstruction on the 8-bit grid, cropped to the input.
    pub reconstruction: Tensor<f32>,
    pub estimated_bits: f64,
    pub bpp: f64,
}

pub struct DecodeResult {
    pub image: Tensor<f32>,
    pub header: Header,
    pub mask: MaskPyramid,
}

/// Mixture parameters in the order the coder consumes them.
#[derive(Default)]
pub struct CodingTrace {
    pub params: Vec<GmmParams>,
}

/// Bits per pixel of a coded file, excluding the fixed header.
pub fn bpp_of_file(file_len: usize, width: usize, height: usize) -> Result<f64> {
    crate::eval::bpp(file_len.saturating_sub(HEADER_LEN), width, height)
}

fn integer_tensor(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.round() as i32).clamp(VALUE_MIN, VALUE_MAX) as f32)
}

impl Codec {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = AnfModel::new(&mut store, config, seed);
        Self::from_parts(config, store, model, None)
    }

    pub fn from_parts(
        config: FlowConfig,
        store: ParamStore<f32>,
        model: AnfModel,
        lambda_index: Option<u8>,
    ) -> Result<Self> {
        let mut c = Codec { config, store, model, hash: [0; 8], lambda_index };
        c.hash = checkpoint_hash(&c.checkpoint()?.to_bytes()?);
        Ok(c)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = vec![
            (META_KIND.to_string(), self.config.kind.name().to_string()),
            (META_TRANSFORM.to_string(), self.config.transform_channels.to_string()),
            (META_LATENT.to_string(), self.config.latent_channels.to_string()),
        ];
        if let Some(l) = self.lambda_index {
            meta.push((META_LAMBDA.to_string(), l.to_string()));
        }
        Ok(Checkpoint::from_store(&self.store, meta))
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        self.checkpoint()?.to_bytes()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let meta = |k: &str| ckpt.meta(k).ok_or_else(|| Error::Checkpoint(format!("missing metadata {k:?}")));
        let num = |k: &str| -> Result<usize> {
            meta(k)?.parse().map_err(|_| Error::Checkpoint(format!("metadata {k:?} is not an integer")))
        };
        let kind = ModelKind::from_name(meta(META_KIND)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = FlowConfig::new(kind, num(META_TRANSFORM)?, num(META_LATENT)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let lambda_index = match ckpt.meta(META_LAMBDA) {
            Some(v) => Some(v.parse().map_err(|_| Error::Checkpoint("bad lambda index".into()))?),
            None => None,
        };
        let mut store = ParamStore::new();
        let model = AnfModel::new(&mut store, config, 0);
        ckpt.load_into(&mut store)?;
        Ok(Codec { config, store, model, hash: checkpoint_hash(bytes), lambda_index })
    }

    /// Replicate-pads a `(1, 3, H, W)` image to whole blocks.
    pub fn pad(image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [b, c, h, w] = image.shape();
        if b != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("expected a non-empty (1, 3, H, W) image, got {:?}", image.shape())));
        }
        image.pad_replicate(padded_extent(h), padded_extent(w))
    }

    fn mask_vars(tape: &mut Tape<'_, f32>, mask: &MaskPyramid) -> Vec<Var> {
        mask_tensors::<f32>(mask).into_iter().map(|t| tape.constant(t)).collect()
    }

    /// Estimated rate in bits per padded pixel plus `lambda2` times the 0–255
    /// squared error of the receiver-side reconstruction.
    pub fn lagrangian_cost(&self, padded: &Tensor<f32>, mask: &MaskPyramid, lambda2: f64) -> Result<f64> {
        let mut tape = Tape::inference(&self.store);
        let x = tape.constant(padded.clone());
        let masks = Self::mask_vars(&mut tape, mask);
        let enc = self.model.encode(&mut tape, x, &masks, &mut Quantizer::round())?;
        let xhat = self.model.decode(&mut tape, &enc.latents, &masks, None, None)?;
        let pixels = (padded.height() * padded.width()) as f64;
        let rate = tape.value(enc.rate_bits).data()[0] as f64 / pixels;
        Ok(rate + lambda2 * mse_255(tape.value(xhat), padded)?)
    }

    pub fn rdo_mask(&self, padded: &Tensor<f32>, initial: &MaskPyramid, lambda2: f64) -> Result<RdoOutcome> {
        let mut cost = |m: &MaskPyramid| self.lagrangian_cost(padded, m, lambda2);
        rdo_mask_search(&mut cost, initial)
    }

    pub fn variance_mask(&self, padded: &Tensor<f32>, threshold: f64) -> Result<MaskPyramid> {
        variance_mask(padded, BLOCK_SIZE, threshold)
    }

    /// Mask for a padded image under `mode`.
    pub fn choose_mask(&self, padded: &Tensor<f32>, mode: &MaskMode, lambda_index: u8) -> Result<MaskPyramid> {
        let (rows, cols) = MaskPyramid::grid_for(padded.height(), padded.width())?;
        let mask = match mode {
            MaskMode::Variance(t) => self.variance_mask(padded, *t)?,
            MaskMode::Uniform(level) => MaskPyramid::uniform(rows, cols, *level)?,
            MaskMode::Rdo => {
                let initial = self.variance_mask(padded, DEFAULT_VARIANCE_THRESHOLD)?;
                self.rdo_mask(padded, &initial, lambda_for_index(lambda_index)?)?.mask
            }
            MaskMode::Given(m) => m.clone(),
        };
        if (mask.rows(), mask.cols()) != (rows, cols) {
            return Err(Error::Mask(format!(
                "{}x{} mask grid does not cover a {}x{} padded image",
                mask.rows(),
                mask.cols(),
                padded.height(),
                padded.width()
            )));
        }
        Ok(mask)
    }

    /// Pads, picks a mask and encodes.
    pub fn encode_with(&self, image: &Tensor<f32>, mode: &MaskMode, lambda_index: u8) -> Result<EncodeResult> {
        let padded = Self::pad(image)?;
        let mask = self.choose_mask(&padded, mode, lambda_index)?;
        self.encode(image, &mask, lambda_index)
    }

    fn entropy_model(&self, level: usize) -> &EntropyModel {
        self.model.second.chain.units[level].entropy.as_ref().expect("second layer units carry entropy models")
    }

    fn level_features(&self, level: usize, hyper: &Tensor<f32>, deeper: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference(&self.store);
        let h = tape.constant(hyper.clone());
        let cond = deeper.map(|d| {
            let v = tape.constant(d.clone());
            tape.upsample2x(v)
        });
        let f = self.entropy_model(level).hyper_decode(&mut tape, h, cond)?;
        Ok(tape.value(f).clone())
    }

    fn code_hyper(&self, level: usize, hyper: &Tensor<f32>, trace: &mut Option<&mut CodingTrace>) -> Vec<u8> {
        let dists = self.entropy_model(level).hyper_distributions(&self.store);
        let mut enc = RangeEncoder::new();
        let hw = hyper.height() * hyper.width();
        for (c, dist) in dists.iter().enumerate() {
            for &v in &hyper.plane(0, c)[..hw] {
                if let Some(t) = trace.as_deref_mut() {
                    t.params.push(*dist);
                }
                encode_value(&mut enc, dist, v as i32);
            }
        }
        enc.finish()
    }

    fn decode_hyper(
        &self,
        level: usize,
        bytes: &[u8],
        shape: [usize; 4],
        trace: &mut Option<&mut CodingTrace>,
    ) -> Result<Tensor<f32>> {
        let dists = self.entropy_model(level).hyper_distributions(&self.store);
        let mut dec = RangeDecoder::new(bytes);
        let mut out = Tensor::zeros(shape);
        for (c, dist) in dists.iter().enumerate() {
            for v in out.plane_mut(0, c) {
                if let Some(t) = trace.as_deref_mut() {
                    t.params.push(*dist);
                }
                *v = decode_value(&mut dec, dist)? as f32;
            }
        }
        Ok(out)
    }

    fn code_latent(
        &self,
        level: usize,
        features: &Tensor<f32>,
        values: &Tensor<f32>,
        grid: &[bool],
        trace: &mut Option<&mut CodingTrace>,
    ) -> Vec<u8> {
        let em = self.entropy_model(level);
        let [_, n, h, w] = values.shape();
        let mut enc = RangeEncoder::new();
        for y in 0..h {
            for x in 0..w {
                if !grid[y * w + x] {
                    continue;
                }
                let dists = em.position_distributions(&self.store, features, values, y, x);
                for c in 0..n {
                    if let Some(t) = trace.as_deref_mut() {
                        t.params.push(dists[c]);
                    }
                    encode_value(&mut enc, &dists[c], values.at(0, c, y, x) as i32);
                }
            }
        }
        enc.finish()
    }

    fn decode_latent(
        &self,
        level: usize,
        features: &Tensor<f32>,
        bytes: &[u8],
        shape: [usize; 4],
        grid: &[bool],
        trace: &mut Option<&mut CodingTrace>,
    ) -> Result<Tensor<f32>> {
        let em = self.entropy_model(level);
        let [_, n, h, w] = shape;
        let mut values = Tensor::zeros(shape);
        let mut dec = RangeDecoder::new(bytes);
        for y in 0..h {
            for x in 0..w {
                if !grid[y * w + x] {
                    continue;
                }
                let dists = em.position_distributions(&self.store, features, &values, y, x);
                for c in 0..n {
                    if let Some(t) = trace.as_deref_mut() {
                        t.params.push(dists[c]);
                    }
                    let v = decode_value(&mut dec, &dists[c])?;
                    values.set(0, c, y, x, v as f32);
                }
            }
        }
        Ok(values)
    }

    fn reconstruct(&self, latents: Vec<Tensor<f32>>, mask: &MaskPyramid) -> Result<Tensor<f32>> {
        let hier = LatentHierarchy::new(latents)?;
        crate::flow::anf_decode(&self.model, &self.store, &hier, &mask_tensors(mask), None, None)
    }

    /// Codes a `(1, 3, H, W)` image on `[0, 1]` under `mask`, which must
    /// cover the padded extents.
    pub fn encode(&self, image: &Tensor<f32>, mask: &MaskPyramid, lambda_index: u8) -> Result<EncodeResult> {
        self.encode_traced(image, mask, lambda_index, None)
    }

    pub fn encode_traced(
        &self,
        image: &Tensor<f32>,
        mask: &MaskPyramid,
        lambda_index: u8,
        mut trace: Option<&mut CodingTrace>,
    ) -> Result<EncodeResult> {
        lambda_for_index(lambda_index)?;
        let [_, _, h, w] = image.shape();
        let padded = Self::pad(image)?;
        let (ph, pw) = (padded.height(), padded.width());
        if MaskPyramid::grid_for(ph, pw)? != (mask.rows(), mask.cols()) {
            return Err(Error::Mask(format!(
                "{}x{} mask grid does not cover a {ph}x{pw} padded image",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut tape = Tape::inference(&self.store);
        let x = tape.constant(padded.clone());
        let masks = Self::mask_vars(&mut tape, mask);
        let enc = self.model.encode(&mut tape, x, &masks, &mut Quantizer::round())?;
        let estimated_bits = tape.value(enc.rate_bits).data()[0] as f64;
        if !estimated_bits.is_finite() {
            return Err(Error::NonFinite("rate estimate".into()));
        }
        let latents: Vec<Tensor<f32>> = enc.latents.iter().map(|&v| integer_tensor(tape.value(v))).collect();
        let hypers: Vec<Tensor<f32>> = enc.rates.iter().map(|r| integer_tensor(tape.value(r.hyper))).collect();
        drop(tape);

        let mut substreams = Vec::with_capacity(2 * NUM_LEVELS);
        for n in (0..NUM_LEVELS).rev() {
            substreams.push(self.code_hyper(n, &hypers[n], &mut trace));
            let deeper = latents.get(n + 1);
            let features = self.level_features(n, &hypers[n], deeper)?;
            let grid = mask.level_grid(n as u8 + 1);
            substreams.push(self.code_latent(n, &features, &latents[n], &grid, &mut trace));
        }
        let header = Header {
            version: FORMAT_VERSION,
            model_kind: self.config.kind.code(),
            lambda_index,
            width: w as u32,
            height: h as u32,
            padded_width: pw as u32,
            padded_height: ph as u32,
            checkpoint_hash: self.hash,
        };
        let bytes = write_bitstream(&Bitstream { header, mask: mask_serialize(mask), substreams })?;
        let recon = self.reconstruct(latents, mask)?;
        let reconstruction = quantize_to_8bit(&recon.crop(0, 0, h, w)?);
        let bpp = bpp_of_file(bytes.len(), w, h)?;
        Ok(EncodeResult { bytes, mask: mask.clone(), reconstruction, estimated_bits, bpp })
    }

    /// Checks a parsed header against this model before any decoding work.
    pub fn check_header(&self, header: &Header) -> Result<()> {
        if header.model_kind != self.config.kind.code() {
            return Err(Error::Checkpoint(format!(
                "stream was coded with model kind {}, checkpoint is {}",
                header.model_kind,
                self.config.kind.name()
            )));
        }
        if header.checkpoint_hash != self.hash {
            return Err(Error::Checkpoint("stream was coded with a different checkpoint".into()));
        }
        let (w, h, pw, ph) = (
            header.width as usize,
            header.height as usize,
            header.padded_width as usize,
            header.padded_height as usize,
        );
        if w == 0 || h == 0 || pw != padded_extent(w) || ph != padded_extent(h) {
            return Err(Error::Format(format!("inconsistent extents {w}x{h} padded to {pw}x{ph}")));
        }
        lambda_for_index(header.lambda_index).map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<DecodeResult> {
        self.decode_traced(bytes, None)
    }

    pub fn decode_traced(&self, bytes: &[u8], mut trace: Option<&mut CodingTrace>) -> Result<DecodeResult> {
        let stream = read_bitstream(bytes)?;
        let header = stream.header.clone();
        self.check_header(&header)?;
        let (pw, ph) = (header.padded_width as usize, header.padded_height as usize);
        let (rows, cols) = MaskPyramid::grid_for(ph, pw)?;
        let mask = mask_deserialize(&stream.mask, rows, cols)?;
        if stream.substreams.len() != 2 * NUM_LEVELS {
            return Err(Error::Format(format!(
                "expected {} substreams, got {}",
                2 * NUM_LEVELS,
                stream.substreams.len()
            )));
        }
        let n_ch = self.config.latent_channels;
        let l_ch = self.config.transform_channels;
        let mut latents: Vec<Option<Tensor<f32>>> = vec![None; NUM_LEVELS];
        for (i, n) in (0..NUM_LEVELS).rev().enumerate() {
            let stride = crate::mask::LEVEL_STRIDES[n];
            let (lh, lw) = (ph / stride, pw / stride);
            let hyper_shape = [1, l_ch, lh / 4, lw / 4];
            let hyper = self.decode_hyper(n, &stream.substreams[2 * i], hyper_shape, &mut trace)?;
            let features = self.level_features(n, &hyper, latents.get(n + 1).and_then(|l| l.as_ref()))?;
            let grid = mask.level_grid(n as u8 + 1);
            let lat =
                self.decode_latent(n, &features, &stream.substreams[2 * i + 1], [1, n_ch, lh, lw], &grid, &mut trace)?;
            latents[n] = Some(lat);
        }
        let latents: Vec<Tensor<f32>> = latents.into_iter().map(Option::unwrap).collect();
        let recon = self.reconstruct(latents, &mask)?;
        let image = quantize_to_8bit(&recon.crop(0, 0, header.height as usize, header.width as usize)?);
        Ok(DecodeResult { image, header, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::random_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codec(kind: ModelKind) -> Codec {
        Codec::new(FlowConfig::new(kind, 8, 6).unwrap(), 3).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            (0.5 + 0.3 * ((x + c * 7) as f32 / 9.0).sin() * ((y as f32) / 13.0).cos() + rng.gen_range(-0.05..0.05))
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn round_trip_is_bit_exact_with_identical_params() {
        for kind in [ModelKind::MAnfic, ModelKind::MsAnfic] {
            let c = codec(kind);
            let img = image(100, 130, 1);
            let mask = random_mask(2, 3, [0.5, 0.5], 4).unwrap();
            let mut enc_trace = CodingTrace::default();
            let enc = c.encode_traced(&img, &mask, 2, Some(&mut enc_trace)).unwrap();
            assert_eq!(&enc.bytes[..4], b"MANF");
            let mut dec_trace = CodingTrace::default();
            let dec = c.decode_traced(&enc.bytes, Some(&mut dec_trace)).unwrap();
            assert_eq!(dec.image, enc.reconstruction);
            assert_eq!(dec.mask, mask);
            assert_eq!(enc_trace.params.len(), dec_trace.params.len());
            for (a, b) in enc_trace.params.iter().zip(&dec_trace.params) {
                assert_eq!(a, b);
                assert!(GmmParams::new(a.weights, a.means, a.scales).is_ok());
            }
            assert_eq!(dec.header.width, 130);
            assert_eq!(dec.header.padded_height, 128);
            let expect = 8.0 * (enc.bytes.len() - HEADER_LEN) as f64 / (100.0 * 130.0);
            assert_eq!(enc.bpp, expect);
        }
    }

    #[test]
    fn rejects_foreign_streams() {
        let a = codec(ModelKind::MsAnfic);
        let b = Codec::new(FlowConfig::new(ModelKind::MsAnfic, 8, 6).unwrap(), 4).unwrap();
        let img = image(64, 64, 2);
        let mask = MaskPyramid::uniform(1, 1, 1).unwrap();
        let enc = a.encode(&img, &mask, 0).unwrap();
        assert!(matches!(b.decode(&enc.bytes), Err(Error::Checkpoint(_))));
        let mut bad = enc.bytes.clone();
        let i = bad.len() - 10;
        bad[i] ^= 1;
        assert!(matches!(a.decode(&bad), Err(Error::Checksum { .. })));
        assert!(a.decode(&enc.bytes[..enc.bytes.len() - 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_hash() {
        let c = codec(ModelKind::MAnfic);
        let bytes = c.checkpoint_bytes().unwrap();
        let d = Codec::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(c.hash, d.hash);
        assert_eq!(d.config, c.config);
    }

    #[test]
    fn mask_text_round_trip() {
        let m = random_mask(3, 4, [0.5, 0.5], 8).unwrap();
        assert_eq!(parse_mask_text(&mask_text(&m)).unwrap(), m);
        assert!(parse_mask_text("12\n1\n").is_err());
        assert!(parse_mask_text("13\n").is_err());
        assert!(matches!(MaskMode::parse("coarse").unwrap(), MaskMode::Uniform(2)));
        assert!(MaskMode::parse("bogus").is_err());
    }

    #[test]
    fn rdo_never_worse_than_variance() {
        let c = codec(ModelKind::MsAnfic);
        let img = Codec::pad(&image(128, 128, 5)).unwrap();
        let var = c.choose_mask(&img, &MaskMode::Variance(DEFAULT_VARIANCE_THRESHOLD), 1).unwrap();
        let rdo = c.choose_mask(&img, &MaskMode::Rdo, 1).unwrap();
        let l = lambda_for_index(1).unwrap();
        assert!(c.lagrangian_cost(&img, &rdo, l).unwrap() <= c.lagrangian_cost(&img, &var, l).unwrap());
    }

    #[test]
    fn padding_rule() {
        assert_eq!(padded_extent(1200), 1216);
        assert_eq!(padded_extent(64), 64);
        assert_eq!(padded_extent(65), 128);
    }
}
