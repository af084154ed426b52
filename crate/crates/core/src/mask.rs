//! Level assignment masks.
//!
//! The image is cut into square blocks; each block is sent entirely through
//! level 1 (fine) or level 2 (coarse). Level `n` latents sit at
//! `1 / LEVEL_STRIDES[n - 1]` of the image extents, so a block covers
//! `block_size / stride` latent positions per side at each level.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hierarchy::NUM_LEVELS;
use crate::tensor::{Real, Tensor};

pub const BLOCK_SIZE: usize = 64;
/// Image pixels per latent position at levels 1 and 2.
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [8, 16];
/// Luminance variance (on `[0, 1]` samples) at or above which a block goes to level 1.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.004;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPyramid {
    block_size: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<u8>,
}

impl MaskPyramid {
    pub fn uniform(rows: usize, cols: usize, level: u8) -> Result<Self> {
        Self::from_blocks(BLOCK_SIZE, rows, cols, vec![level; rows * cols])
    }

    pub fn from_blocks(block_size: usize, rows: usize, cols: usize, blocks: Vec<u8>) -> Result<Self> {
        if block_size == 0 || LEVEL_STRIDES.iter().any(|s| !block_size.is_multiple_of(*s)) {
            return Err(Error::Mask(format!("block size {block_size} is not a multiple of every level stride")));
        }
        if rows == 0 || cols == 0 || blocks.len() != rows * cols {
            return Err(Error::Mask(format!("{} block entries for a {rows}x{cols} grid", blocks.len())));
        }
        if let Some(l) = blocks.iter().find(|&&l| l == 0 || l as usize > NUM_LEVELS) {
            return Err(Error::Mask(format!("invalid level {l}")));
        }
        Ok(MaskPyramid { block_size, rows, cols, blocks })
    }

    /// Grid covering an image of the given (block-aligned) extents.
    pub fn grid_for(height: usize, width: usize) -> Result<(usize, usize)> {
        if height == 0 || width == 0 || !height.is_multiple_of(BLOCK_SIZE) || !width.is_multiple_of(BLOCK_SIZE) {
            return Err(Error::Mask(format!("{height}x{width} is not a multiple of the {BLOCK_SIZE}-pixel block")));
        }
        Ok((height / BLOCK_SIZE, width / BLOCK_SIZE))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks(&self) -> &[u8] {
        &self.blocks
    }

    pub fn level(&self, r: usize, c: usize) -> u8 {
        self.blocks[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, level: u8) {
        assert!(level >= 1 && level as usize <= NUM_LEVELS);
        self.blocks[r * self.cols + c] = level;
    }

    pub fn fraction(&self, level: u8) -> f64 {
        self.blocks.iter().filter(|&&l| l == level).count() as f64 / self.blocks.len() as f64
    }

    /// Latent positions per block side at `level`.
    pub fn cell(&self, level: u8) -> usize {
        self.block_size / LEVEL_STRIDES[level as usize - 1]
    }

    /// Extents of the binary grid at `level`.
    pub fn level_extents(&self, level: u8) -> (usize, usize) {
        let cell = self.cell(level);
        (self.rows * cell, self.cols * cell)
    }

    /// Binary grid for `level` at that level's latent resolution, row-major.
    pub fn level_grid(&self, level: u8) -> Vec<bool> {
        let cell = self.cell(level);
        let (h, w) = self.level_extents(level);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.level(y / cell, x / cell) == level);
            }
        }
        out
    }

    pub fn level_tensor<T: Real>(&self, level: u8) -> Tensor<T> {
        let (h, w) = self.level_extents(level);
        let grid = self.level_grid(level);
        Tensor::from_vec([1, 1, h, w], grid.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect())
            .expect("grid matches extents")
    }

    /// Whether every level-1 position is claimed by exactly one level once all
    /// grids are upsampled to level-1 resolution.
    pub fn is_partition(&self) -> bool {
        let (h, w) = self.level_extents(1);
        let grids: Vec<(Vec<bool>, usize, usize)> = (1..=NUM_LEVELS as u8)
            .map(|l| {
                let (_, lw) = self.level_extents(l);
                (self.level_grid(l), lw, LEVEL_STRIDES[l as usize - 1] / LEVEL_STRIDES[0])
            })
            .collect();
        (0..h).all(|y| (0..w).all(|x| grids.iter().filter(|(g, lw, f)| g[(y / f) * lw + x / f]).count() == 1))
    }
}

/// Independent per-block levels drawn with `probabilities[n]` for level `n + 1`.
pub fn random_mask(rows: usize, cols: usize, probabilities: [f64; NUM_LEVELS], seed: u64) -> Result<MaskPyramid> {
    let total: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("level probabilities {probabilities:?} do not sum to one")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..rows * cols).map(|_| if rng.gen::<f64>() < probabilities[0] { 1 } else { 2 }).collect();
    MaskPyramid::from_blocks(BLOCK_SIZE, rows, cols, blocks)
}

/// Rec.601 luminance variance per block of a `(1, 3, H, W)` image on `[0, 1]`.
pub fn block_variances<T: Real>(image: &Tensor<T>, block_size: usize) -> Result<(usize, usize, Vec<f64>)> {
    let [b, c, h, w] = image.shape();
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("expected a single RGB image, got {:?}", image.shape())));
    }
    if block_size == 0 || h % block_size != 0 || w % block_size != 0 {
        return Err(Error::Mask(format!("{h}x{w} is not a multiple of block size {block_size}")));
    }
    let (rows, cols) = (h / block_size, w / block_size);
    let (pr, pg, pb) = (image.plane(0, 0), image.plane(0, 1), image.plane(0, 2));
    let mut out = Vec::with_capacity(rows * cols);
    let n = (block_size * block_size) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let luma: Vec<f64> = (r * block_size..(r + 1) * block_size)
                .flat_map(|y| (c * block_size..(c + 1) * block_size).map(move |x| y * w + x))
                .map(|i| 0.299 * pr[i].as_f64() + 0.587 * pg[i].as_f64() + 0.114 * pb[i].as_f64())
                .collect();
            let mean = luma.iter().sum::<f64>() / n;
            out.push(luma.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n);
        }
    }
    Ok((rows, cols, out))
}

/// Level 1 where the block's luminance variance reaches `threshold`, else level 2.
pub fn variance_mask<T: Real>(image: &Tensor<T>, block_size: usize, threshold: f64) -> Result<MaskPyramid> {
    let (rows, cols, vars) = block_variances(image, block_size)?;
    let blocks = vars.iter().map(|&v| if v >= threshold { 1 } else { 2 }).collect();
    MaskPyramid::from_blocks(block_size, rows, cols, blocks)
}

/// Lagrangian cost of coding an image under a mask.
pub trait MaskCost {
    fn cost(&mut self, mask: &MaskPyramid) -> Result<f64>;
}

impl<F: FnMut(&MaskPyramid) -> Result<f64>> MaskCost for F {
    fn cost(&mut self, mask: &MaskPyramid) -> Result<f64> {
        self(mask)
    }
}

#[derive(Clone, Debug)]
pub struct RdoOutcome {
    pub mask: MaskPyramid,
    pub cost: f64,
    pub initial_cost: f64,
    pub evaluations: usize,
}

const MAX_PASSES: usize = 16;

/// Greedy block-wise descent. Starts from the cheapest of `initial`,
/// all-level-1 and all-level-2, then flips blocks in raster order, keeping a
/// flip when it lowers the cost or ties while moving to the coarser level.
/// Stops after a pass without accepted flips.
pub fn rdo_mask_search(cost: &mut dyn MaskCost, initial: &MaskPyramid) -> Result<RdoOutcome> {
    let (rows, cols, bs) = (initial.rows, initial.cols, initial.block_size);
    let initial_cost = cost.cost(initial)?;
    let mut best = initial.clone();
    let mut best_cost = initial_cost;
    let mut evaluations = 1;
    for level in 1..=NUM_LEVELS as u8 {
        let cand = MaskPyramid::from_blocks(bs, rows, cols, vec![level; rows * cols])?;
        if cand == *initial {
            continue;
        }
        let c = cost.cost(&cand)?;
        evaluations += 1;
        if c < best_cost {
            best = cand;
            best_cost = c;
        }
    }
    for _ in 0..MAX_PASSES {
        let mut changed = false;
        for r in 0..rows {
            for c in 0..cols {
                let current = best.level(r, c);
                let flipped = if current == 1 { 2 } else { 1 };
                let mut cand = best.clone();
                cand.set(r, c, flipped);
                let k = cost.cost(&cand)?;
                evaluations += 1;
                if k < best_cost || (k == best_cost && flipped > current) {
                    best = cand;
                    best_cost = k;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(RdoOutcome { mask: best, cost: best_cost, initial_cost, evaluations })
}

/// One bit per block in raster order, level 1 as a set bit, most significant
/// bit first, zero-padded to a whole byte.
pub fn mask_serialize(mask: &MaskPyramid) -> Vec<u8> {
    let mut out = vec![0u8; mask.blocks.len().div_ceil(8)];
    for (i, &l) in mask.blocks.iter().enumerate() {
        if l == 1 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn mask_deserialize(bytes: &[u8], rows: usize, cols: usize) -> Result<MaskPyramid> {
    let n = rows * cols;
    if bytes.len() < n.div_ceil(8) {
        return Err(Error::Truncated(format!("mask needs {} bytes, got {}", n.div_ceil(8), bytes.len())));
    }
    if bytes.len() > n.div_ceil(8) {
        return Err(Error::Format("mask section has trailing bytes".into()));
    }
    let blocks = (0..n).map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { 2 }).collect();
    MaskPyramid::from_blocks(BLOCK_SIZE, rows, cols, blocks)
}
