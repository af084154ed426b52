//! Rate-distortion training: loss, crops, single steps and the staged
//! schedule with its λ2 fork.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::codec::{Codec, LAMBDAS};
use crate::error::{Error, Result};
use crate::flow::{mask_tensors, AnfModel, FlowConfig, ModelKind};
use crate::image_io::{list_images, load_image, write_atomic};
use crate::mask::{random_mask, variance_mask, MaskPyramid, BLOCK_SIZE, DEFAULT_VARIANCE_THRESHOLD};
use crate::quant::{QuantMode, Quantizer};
use crate::tensor::{Adam, ParamStore, Real, Tape, Tensor, Var};

/// Desk-scale configuration: 32 channels, a tenth of the schedule, 64-pixel
/// crops of the synthetic corpus.
pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");

/// Ratio between the residual weight and the distortion weight.
pub const LAMBDA1_RATIO: f64 = 0.01;

/// Stage ends in epochs at `schedule_scale = 1`.
pub const STAGE_ENDS: [f64; 3] = [30.0, 100.0, 130.0];

pub fn lambda1_for(lambda2: f64) -> f64 {
    LAMBDA1_RATIO * lambda2
}

/// Loss graph nodes. `rate` is in bits per pixel; `distortion` and `residual`
/// are mean squared values on the 0–255 scale.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub rate: Var,
    pub distortion: Var,
    pub residual: Var,
}

/// `rate_bits / pixels + λ1·‖x2‖² + λ2·MSE(x̂, x)`.
pub fn rd_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    x_hat: Var,
    residual: Var,
    rate_bits: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossVars> {
    let [b, _, h, w] = tape.shape(x);
    if tape.shape(x_hat) != tape.shape(x) || tape.shape(residual) != tape.shape(x) {
        return Err(Error::Shape(format!(
            "loss inputs disagree: {:?}, {:?}, {:?}",
            tape.shape(x),
            tape.shape(x_hat),
            tape.shape(residual)
        )));
    }
    let rate = tape.scale(rate_bits, T::lit(1.0 / (b * h * w) as f64));
    let d = tape.sub(x_hat, x)?;
    let d = tape.scale(d, T::lit(255.0));
    let d2 = tape.square(d);
    let distortion = tape.mean(d2);
    let r = tape.scale(residual, T::lit(255.0));
    let r2 = tape.square(r);
    let residual = tape.mean(r2);
    let t1 = tape.scale(residual, T::lit(lambda1));
    let t2 = tape.scale(distortion, T::lit(lambda2));
    let loss = tape.add(rate, t1)?;
    let loss = tape.add(loss, t2)?;
    Ok(LossVars { loss, rate, distortion, residual })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    pub residual: f64,
}

impl StepStats {
    fn add(&mut self, o: &StepStats) {
        self.loss += o.loss;
        self.rate += o.rate;
        self.distortion += o.distortion;
        self.residual += o.residual;
    }

    fn scaled(&self, k: f64) -> StepStats {
        StepStats {
            loss: self.loss * k,
            rate: self.rate * k,
            distortion: self.distortion * k,
            residual: self.residual * k,
        }
    }
}

/// Stacks per-image masks into per-level `(B, 1, h, w)` tensors.
pub fn batch_masks<T: Real>(masks: &[MaskPyramid]) -> Result<Vec<Tensor<T>>> {
    let per: Vec<Vec<Tensor<T>>> = masks.iter().map(mask_tensors).collect();
    (0..per.first().map_or(0, |p| p.len()))
        .map(|l| Tensor::stack(&per.iter().map(|p| p[l].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Forward pass as in training, returning the loss graph.
pub fn forward_loss<T: Real>(
    model: &AnfModel,
    tape: &mut Tape<'_, T>,
    batch: &Tensor<T>,
    masks: &[Tensor<T>],
    lambda2: f64,
    quantizer: &mut Quantizer,
) -> Result<LossVars> {
    let x = tape.input(batch.clone());
    let mv: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();
    let enc = model.encode(tape, x, &mv, quantizer)?;
    let x_hat = model.decode(tape, &enc.latents, &mv, None, None)?;
    rd_loss(tape, x, x_hat, enc.residual, enc.rate_bits, lambda1_for(lambda2), lambda2)
}

/// One forward, backward and Adam update. A zero learning rate reports the
/// loss without touching the parameters.
pub fn train_step<T: Real>(
    model: &AnfModel,
    store: &mut ParamStore<T>,
    batch: &Tensor<T>,
    masks: &[Tensor<T>],
    lambda2: f64,
    learning_rate: f64,
    quantizer: &mut Quantizer,
) -> Result<StepStats> {
    train_step_clipped(model, store, batch, masks, lambda2, learning_rate, None, quantizer)
}

/// [`train_step`] with the global gradient norm capped at `clip`.
#[allow(clippy::too_many_arguments)]
pub fn train_step_clipped<T: Real>(
    model: &AnfModel,
    store: &mut ParamStore<T>,
    batch: &Tensor<T>,
    masks: &[Tensor<T>],
    lambda2: f64,
    learning_rate: f64,
    clip: Option<f64>,
    quantizer: &mut Quantizer,
) -> Result<StepStats> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be non-negative")));
    }
    let (stats, grads) = {
        let mut tape = Tape::new(store);
        let lv = forward_loss(model, &mut tape, batch, masks, lambda2, quantizer)?;
        let v = |var: Var| tape.value(var).data()[0].as_f64();
        let stats =
            StepStats { loss: v(lv.loss), rate: v(lv.rate), distortion: v(lv.distortion), residual: v(lv.residual) };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {} (rate {}, distortion {}, residual {})",
                stats.loss, stats.rate, stats.distortion, stats.residual
            )));
        }
        let grads = if learning_rate > 0.0 { Some(tape.backward(lv.loss)?) } else { None };
        (stats, grads)
    };
    if let Some(g) = grads {
        store.zero_grad();
        g.accumulate_into(store);
        if store.iter().any(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        if let Some(max) = clip {
            let norm =
                store.iter().flat_map(|p| p.grad.data().iter()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if norm > max {
                let k = T::lit(max / norm);
                for p in store.iter_mut() {
                    for g in p.grad.data_mut() {
                        *g *= k;
                    }
                }
            }
        }
        Adam::with_lr(learning_rate).step(store)?;
    }
    Ok(stats)
}

/// A `crop × crop` window at a uniformly drawn offset.
pub fn sample_crop<T: Real>(image: &Tensor<T>, crop: usize, seed: u64) -> Result<Tensor<T>> {
    let [_, _, h, w] = image.shape();
    if crop == 0 || h < crop || w < crop {
        return Err(Error::InvalidArgument(format!("{h}x{w} image is smaller than the {crop}x{crop} crop")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = rng.gen_range(0..=h - crop);
    let x = rng.gen_range(0..=w - crop);
    image.crop(y, x, crop, crop)
}

/// Mixes a run seed with epoch and sample indices.
pub fn derive_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z =
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Kinds of synthetic content in the bundled corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Synthetic {
    Gradient,
    Noise,
    Checkerboard,
    /// Smooth background with textured rectangles.
    Mixed,
}

pub const SYNTHETIC_KINDS: [Synthetic; 4] =
    [Synthetic::Gradient, Synthetic::Noise, Synthetic::Checkerboard, Synthetic::Mixed];

/// One synthetic `(1, 3, size, size)` image on the 8-bit grid.
pub fn synthetic_image(kind: Synthetic, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let dir: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let s = size as f32;
    let smooth = |c: usize, y: usize, x: usize| {
        let t = ((x as f32 - s / 2.0) * ca + (y as f32 - s / 2.0) * sa) / s;
        base[c] + dir[c] * t
    };
    let t: Tensor<f32> = match kind {
        Synthetic::Gradient => Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| smooth(c, y, x)),
        Synthetic::Noise => {
            let amp = rng.gen_range(0.02..0.1);
            Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| smooth(c, y, x) + rng.gen_range(-amp..amp))
        }
        Synthetic::Checkerboard => {
            let cell = [4usize, 6, 8, 12, 16][rng.gen_range(0..5)];
            let other: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            Tensor::from_fn(
                [1, 3, size, size],
                |[_, c, y, x]| if (y / cell + x / cell).is_multiple_of(2) { base[c] } else { other[c] },
            )
        }
        Synthetic::Mixed => {
            let mut t = Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| smooth(c, y, x));
            let patches = rng.gen_range(1..=3);
            for _ in 0..patches {
                let ph = rng.gen_range(size / 4..=size / 2);
                let pw = rng.gen_range(size / 4..=size / 2);
                let y0 = rng.gen_range(0..=size - ph);
                let x0 = rng.gen_range(0..=size - pw);
                let amp = rng.gen_range(0.1..0.3);
                let period = rng.gen_range(2.0..6.0f32);
                for y in y0..y0 + ph {
                    for x in x0..x0 + pw {
                        let stripe = ((x as f32 + 0.7 * y as f32) / period).sin();
                        for c in 0..3 {
                            let v = t.at(0, c, y, x) + amp * stripe + rng.gen_range(-0.05..0.05);
                            t.set(0, c, y, x, v);
                        }
                    }
                }
            }
            t
        }
    };
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// `count` images cycling through every synthetic kind.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..count)
        .map(|i| synthetic_image(SYNTHETIC_KINDS[i % SYNTHETIC_KINDS.len()], size, derive_seed(seed, usize::MAX, i)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainQuantization {
    Noise,
    StraightThrough,
}

impl TrainQuantization {
    pub fn mode(self) -> QuantMode {
        match self {
            TrainQuantization::Noise => QuantMode::Noise,
            TrainQuantization::StraightThrough => QuantMode::StraightThrough,
        }
    }
}

fn default_kind() -> String {
    ModelKind::MsAnfic.name().into()
}
fn default_channels() -> usize {
    192
}
fn default_lambda2() -> f64 {
    LAMBDAS[0]
}
fn default_forks() -> Vec<f64> {
    LAMBDAS.to_vec()
}
fn default_lr() -> f64 {
    1e-4
}
fn default_crop() -> usize {
    256
}
fn default_batch() -> usize {
    8
}
fn default_scale() -> f64 {
    1.0
}
fn default_corpus_size() -> usize {
    64
}
fn default_threshold() -> f64 {
    DEFAULT_VARIANCE_THRESHOLD
}
fn default_quant() -> TrainQuantization {
    TrainQuantization::Noise
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Every knob of a training run. Parsed from TOML; missing keys take the
/// defaults below.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_kind")]
    pub model_kind: String,
    #[serde(default = "default_channels")]
    pub transform_channels: usize,
    #[serde(default = "default_channels")]
    pub latent_channels: usize,
    /// Distortion weight of the first two stages.
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    /// Optional; when present it must equal `0.01 · lambda2`.
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default = "default_forks")]
    pub fork_lambdas: Vec<f64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Learning rate of the fork stage; defaults to `learning_rate`.
    #[serde(default)]
    pub fork_learning_rate: Option<f64>,
    /// Cap on the global gradient norm; absent means no clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_scale")]
    pub schedule_scale: f64,
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Synthetic images generated when no `image_dir` is given.
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub variance_threshold: f64,
    #[serde(default = "default_quant")]
    pub quantization: TrainQuantization,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn toy() -> Self {
        Self::from_toml(TOY_CONFIG).expect("bundled toy config is valid")
    }

    pub fn lambda1(&self) -> f64 {
        lambda1_for(self.lambda2)
    }

    pub fn kind(&self) -> Result<ModelKind> {
        ModelKind::from_name(&self.model_kind)
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.kind()?, self.transform_channels, self.latent_channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow_config()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda2 > 0.0) {
            return bad(format!("lambda2 {} must be positive", self.lambda2));
        }
        if let Some(l1) = self.lambda1 {
            if (l1 - self.lambda1()).abs() > 1e-12 * self.lambda1() {
                return bad(format!("lambda1 {l1} must equal 0.01 * lambda2 = {}", self.lambda1()));
            }
        }
        if self.fork_lambdas.is_empty() || self.fork_lambdas.iter().any(|&l| !(l > 0.0)) {
            return bad("fork_lambdas must be a non-empty list of positive values".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.fork_learning_rate.is_some_and(|l| !(l > 0.0)) {
            return bad("fork_learning_rate must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if !(self.schedule_scale > 0.0) {
            return bad(format!("schedule_scale {} must be positive", self.schedule_scale));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(BLOCK_SIZE) {
            return bad(format!("crop_size {} must be a positive multiple of {BLOCK_SIZE}", self.crop_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.image_dir.is_none() && self.corpus_size == 0 {
            return bad("corpus_size must be positive without an image_dir".into());
        }
        Ok(())
    }

    /// Last epoch of each stage, counting from 1.
    pub fn stage_ends(&self) -> [usize; 3] {
        STAGE_ENDS.map(|e| ((e * self.schedule_scale).round() as usize).max(1))
    }

    /// Training images: the directory's files or the synthetic corpus.
    pub fn load_corpus(&self) -> Result<Vec<Tensor<f32>>> {
        let images = match &self.image_dir {
            Some(dir) => {
                let paths = list_images(dir)?;
                if paths.is_empty() {
                    return Err(Error::InvalidArgument(format!("no images in {}", dir.display())));
                }
                paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?
            }
            None => synthetic_corpus(self.corpus_size, self.crop_size.max(2 * BLOCK_SIZE), self.seed),
        };
        Ok(images)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Random,
    Variance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lambda2: f64,
    pub stats: StepStats,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch,stage,lambda2,loss,rate,distortion,residual\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.stage, r.lambda2, r.stats.loss, r.stats.rate, r.stats.distortion, r.stats.residual
        ));
    }
    s
}

/// Masks for one batch of crops.
pub fn training_masks(
    crops: &[Tensor<f32>],
    source: MaskSource,
    threshold: f64,
    seed: u64,
) -> Result<Vec<MaskPyramid>> {
    crops
        .iter()
        .enumerate()
        .map(|(i, c)| match source {
            MaskSource::Random => {
                let (rows, cols) = MaskPyramid::grid_for(c.height(), c.width())?;
                random_mask(rows, cols, [0.5, 0.5], derive_seed(seed, 0, i))
            }
            MaskSource::Variance => variance_mask(c, BLOCK_SIZE, threshold),
        })
        .collect()
}

/// One pass over `corpus`, one crop per image, in a seeded order.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &AnfModel,
    store: &mut ParamStore<f32>,
    corpus: &[Tensor<f32>],
    config: &TrainConfig,
    lambda2: f64,
    learning_rate: f64,
    source: MaskSource,
    epoch: usize,
    stream: u64,
) -> Result<StepStats> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ stream, epoch, usize::MAX - 1));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut quantizer =
        Quantizer::new(config.quantization.mode(), derive_seed(config.seed ^ stream, epoch, usize::MAX - 2));
    let mut total = StepStats { loss: 0.0, rate: 0.0, distortion: 0.0, residual: 0.0 };
    let mut steps = 0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let crops: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&i| sample_crop(&corpus[i], config.crop_size, derive_seed(config.seed ^ stream, epoch, i)))
            .collect::<Result<_>>()?;
        let masks =
            training_masks(&crops, source, config.variance_threshold, derive_seed(config.seed ^ stream, epoch, b))?;
        let batch = Tensor::stack(&crops)?;
        let mt = batch_masks(&masks)?;
        let s =
            train_step_clipped(model, store, &batch, &mt, lambda2, learning_rate, config.grad_clip, &mut quantizer)?;
        total.add(&s);
        steps += 1;
    }
    Ok(total.scaled(1.0 / steps.max(1) as f64))
}

pub struct ScheduleOutcome {
    /// Model at the end of the shared stages.
    pub shared: Codec,
    /// One fine-tuned model per fork λ2, in `fork_lambdas` order.
    pub forks: Vec<(f64, Codec)>,
    pub log: Vec<EpochLog>,
}

/// λ-index of `lambda2` in the header table, if it is one of its entries.
pub fn lambda_index_of(lambda2: f64) -> Option<u8> {
    LAMBDAS.iter().position(|&l| (l - lambda2).abs() <= 1e-12).map(|i| i as u8)
}

/// Runs all three stages. With `out_dir`, checkpoints are written at every
/// stage end and the epoch log is rewritten after every epoch.
pub fn run_schedule(
    config: &TrainConfig,
    corpus: &[Tensor<f32>],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<ScheduleOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let flow = config.flow_config()?;
    let mut store = ParamStore::new();
    let model = AnfModel::new(&mut store, flow, config.seed);
    let [s1, s2, s3] = config.stage_ends();
    let mut log = Vec::new();
    let save = |codec: &Codec, name: &str, log: &[EpochLog]| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            write_atomic(&dir.join(name), &codec.checkpoint_bytes()?)?;
            write_atomic(&dir.join("train_log.csv"), log_csv(log).as_bytes())?;
        }
        Ok(())
    };
    let mut record = |log: &mut Vec<EpochLog>, row: EpochLog| -> Result<()> {
        progress(&row);
        log.push(row);
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            write_atomic(&dir.join("train_log.csv"), log_csv(log).as_bytes())?;
        }
        Ok(())
    };
    for epoch in 1..=s2 {
        let (stage, source) = if epoch <= s1 { (1, MaskSource::Random) } else { (2, MaskSource::Variance) };
        let stats =
            train_epoch(&model, &mut store, corpus, config, config.lambda2, config.learning_rate, source, epoch, 0)?;
        record(&mut log, EpochLog { epoch, stage, lambda2: config.lambda2, stats })?;
        if epoch == s1 {
            let c = Codec::from_parts(flow, store.clone(), model.clone(), lambda_index_of(config.lambda2))?;
            save(&c, "stage1.ckpt", &log)?;
        }
    }
    let shared = Codec::from_parts(flow, store.clone(), model.clone(), lambda_index_of(config.lambda2))?;
    save(&shared, "stage2.ckpt", &log)?;
    let fork_lr = config.fork_learning_rate.unwrap_or(config.learning_rate);
    let mut forks = Vec::with_capacity(config.fork_lambdas.len());
    for (f, &lambda2) in config.fork_lambdas.iter().enumerate() {
        let mut fork_store = store.clone();
        for epoch in s2 + 1..=s3.max(s2) {
            let stats = train_epoch(
                &model,
                &mut fork_store,
                corpus,
                config,
                lambda2,
                fork_lr,
                MaskSource::Variance,
                epoch,
                f as u64 + 1,
            )?;
            record(&mut log, EpochLog { epoch, stage: 3, lambda2, stats })?;
        }
        let c = Codec::from_parts(flow, fork_store, model.clone(), lambda_index_of(lambda2))?;
        save(&c, &format!("lambda{f}.ckpt"), &log)?;
        forks.push((lambda2, c));
    }
    Ok(ScheduleOutcome { shared, forks, log })
}

/// Mean `‖x2‖²` per pixel (channels summed, `[0, 1]` scale) under rounding.
pub fn residual_energy(
    model: &AnfModel,
    store: &ParamStore<f32>,
    images: &[Tensor<f32>],
    masks: &[MaskPyramid],
) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for (img, m) in images.iter().zip(masks) {
        let (_, _, res, _) = crate::flow::anf_encode(model, store, img, &mask_tensors(m), true)?;
        total += res.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        pixels += img.height() * img.width();
    }
    Ok(total / pixels.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (AnfModel, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let model = AnfModel::new(&mut store, FlowConfig::new(ModelKind::MsAnfic, 6, 4).unwrap(), 1);
        (model, store)
    }

    #[test]
    fn loss_is_rate_without_distortion() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_fn([1, 3, 4, 4], |[_, c, y, x]| (c + y + x) as f64 / 10.0));
        let zero = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let bits = tape.constant(Tensor::scalar(32.0));
        let lv = rd_loss(&mut tape, x, x, zero, bits, 0.001, 0.1).unwrap();
        assert_eq!(tape.value(lv.loss).data()[0], 2.0);
        let r1 = tape.constant(Tensor::full([1, 3, 4, 4], 0.1));
        let r2 = tape.constant(Tensor::full([1, 3, 4, 4], 0.1 * 2f64.sqrt()));
        let a = rd_loss(&mut tape, x, x, r1, bits, 0.001, 0.1).unwrap();
        let b = rd_loss(&mut tape, x, x, r2, bits, 0.001, 0.1).unwrap();
        let (la, lb) = (tape.value(a.loss).data()[0], tape.value(b.loss).data()[0]);
        let term = 0.001 * tape.value(a.residual).data()[0];
        assert!((lb - la - term).abs() < 1e-9);
    }

    #[test]
    fn lambda_coupling() {
        assert_eq!(lambda1_for(0.1), 0.001);
        let c = TrainConfig::from_toml("lambda2 = 0.05\n").unwrap();
        assert!((c.lambda1() - 0.0005).abs() < 1e-18);
        assert!(TrainConfig::from_toml("lambda2 = 0.05\nlambda1 = 0.0005\n").is_ok());
        assert!(TrainConfig::from_toml("lambda2 = 0.05\nlambda1 = 0.001\n").is_err());
        assert!(TrainConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn schedule_scaling() {
        let mut c = TrainConfig::default();
        assert_eq!(c.stage_ends(), [30, 100, 130]);
        c.schedule_scale = 0.1;
        assert_eq!(c.stage_ends(), [3, 10, 13]);
        assert_eq!(c.fork_lambdas.len(), 6);
    }

    #[test]
    fn bundled_toy_config() {
        let c = TrainConfig::toy();
        assert_eq!(c.kind().unwrap(), ModelKind::MsAnfic);
        assert_eq!((c.transform_channels, c.latent_channels), (32, 32));
        assert_eq!(c.stage_ends(), [3, 10, 13]);
        assert!(TrainConfig::from_toml("fork_learning_rate = 0.0\n").is_err());
        assert!(TrainConfig::from_toml("grad_clip = -1.0\n").is_err());
    }

    #[test]
    fn crops() {
        let img = synthetic_image(Synthetic::Mixed, 128, 3);
        assert_eq!(sample_crop(&img, 128, 9).unwrap(), img);
        let a = sample_crop(&img, 64, 5).unwrap();
        assert_eq!(a.shape(), [1, 3, 64, 64]);
        assert_eq!(a, sample_crop(&img, 64, 5).unwrap());
        assert!(sample_crop(&img, 192, 5).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, mut store) = tiny();
        let before = store.clone();
        let img = synthetic_image(Synthetic::Gradient, 64, 1);
        let masks = batch_masks(&[MaskPyramid::uniform(1, 1, 1).unwrap()]).unwrap();
        let s =
            train_step(&model, &mut store, &img, &masks, 0.1, 0.0, &mut Quantizer::new(QuantMode::Noise, 1)).unwrap();
        assert!(s.loss.is_finite() && s.loss > 0.0);
        for (a, b) in store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn overfit_single_batch() {
        let (model, mut store) = tiny();
        let img = synthetic_image(Synthetic::Mixed, 64, 2);
        let masks = batch_masks(&[MaskPyramid::uniform(1, 1, 2).unwrap()]).unwrap();
        let mut losses = Vec::new();
        for _ in 0..2 {
            let mut q = Quantizer::new(QuantMode::Noise, 7);
            losses.push(train_step(&model, &mut store, &img, &masks, 0.1, 1e-3, &mut q).unwrap().loss);
        }
        assert!(losses[1] < losses[0], "{losses:?}");
    }

    #[test]
    fn non_finite_input_is_reported() {
        let (model, mut store) = tiny();
        let img = Tensor::full([1, 3, 64, 64], f32::NAN);
        let masks = batch_masks(&[MaskPyramid::uniform(1, 1, 1).unwrap()]).unwrap();
        let e = train_step(&model, &mut store, &img, &masks, 0.1, 1e-3, &mut Quantizer::round());
        assert!(matches!(e, Err(Error::NonFinite(_))));
    }

    #[test]
    fn corpus_is_deterministic_and_on_grid() {
        let a = synthetic_corpus(8, 64, 4);
        assert_eq!(a, synthetic_corpus(8, 64, 4));
        for img in &a {
            assert!(img
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v) && ((v * 255.0).round() - v * 255.0).abs() < 1e-3));
        }
    }
}
