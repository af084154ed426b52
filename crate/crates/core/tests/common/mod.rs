#![allow(dead_code)]

use manf::entropy::model::EntropyModel;
use manf::error::Result;
use manf::flow::{layer_encode, AnfModel, FirstLayer, FlowConfig, ModelKind};
use manf::hierarchy::SplitNet;
use manf::mask::random_mask;
use manf::nn::{Conv, ConvT, Gdn, MaskedConv};
use manf::quant::{QuantMode, Quantizer};
use manf::tensor::gradcheck::{check, check_directional, Report};
use manf::tensor::{ParamStore, Tape, Tensor, Var};
use manf::train::forward_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const PROBES: usize = 12;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub report: Report,
}

pub fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp))
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}

/// Random projection so that every output coordinate reaches the loss.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(random(&mut rng, tape.shape(y), 1.0));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn run(
    name: &'static str,
    tol: f64,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCase> {
    Ok(GradCase { name, tol, report: check(store, inputs, PROBES, h, name.len() as u64 * 7919, f)? })
}

fn masks_for(batch: usize, size: usize, seed: u64) -> Vec<Tensor<f64>> {
    let (rows, cols) = manf::mask::MaskPyramid::grid_for(size, size).unwrap();
    let pyramids: Vec<_> = (0..batch).map(|i| random_mask(rows, cols, [0.5, 0.5], seed + i as u64).unwrap()).collect();
    manf::train::batch_masks(&pyramids).unwrap()
}

/// Every differentiable layer and the end-to-end loss, checked against
/// central finite differences.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, &mut rng, "c", 2, 3, 3, 1);
        let x = random(&mut rng, [1, 2, 6, 6], 1.0);
        out.push(run("conv2d squared sum", 1e-5, &store, &[x], 1e-3, |t, v| {
            let y = conv.forward(t, v[0])?;
            let y = t.square(y);
            Ok(t.sum(y))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, &mut rng, "c", 3, 2, 3, 2);
        let x = random(&mut rng, [2, 3, 7, 5], 1.0);
        out.push(run("conv2d stride 2", LAYER_TOL, &store, &[x], 1e-4, |t, v| {
            let y = conv.forward(t, v[0])?;
            project(t, y, 1)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let conv = ConvT::new(&mut store, &mut rng, "t", 3, 2, 3, 2);
        let x = random(&mut rng, [2, 3, 4, 3], 1.0);
        out.push(run("transposed conv2d", LAYER_TOL, &store, &[x], 1e-4, |t, v| {
            let y = conv.forward(t, v[0])?;
            project(t, y, 2)
        })?);
    }
    for (name, inverse) in [("gdn", false), ("igdn", true)] {
        let mut store = ParamStore::new();
        let g = Gdn::new(&mut store, "g", 3, inverse);
        jitter(&mut store, &mut rng, 0.2);
        let x = random(&mut rng, [2, 3, 4, 4], 2.0);
        out.push(run(name, LAYER_TOL, &store, &[x], 1e-4, |t, v| {
            let y = g.forward(t, v[0])?;
            project(t, y, 3)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let m = MaskedConv::new(&mut store, &mut rng, "m", 2, 3, 5);
        let x = random(&mut rng, [1, 2, 6, 6], 1.0);
        out.push(run("masked conv", LAYER_TOL, &store, &[x], 1e-4, |t, v| {
            let y = m.forward(t, v[0])?;
            project(t, y, 4)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, &mut rng, "c", 2, 3, 3, 1);
        let g = Gdn::new(&mut store, "g", 3, false);
        jitter(&mut store, &mut rng, 0.1);
        let x = random(&mut rng, [1, 2, 6, 6], 1.0);
        out.push(run("conv gdn leaky relu", LAYER_TOL, &store, &[x], 1e-4, |t, v| {
            let y = conv.forward(t, v[0])?;
            let y = g.forward(t, y)?;
            let y = t.leaky_relu(y, 0.01);
            Ok(t.sum(y))
        })?);
    }
    {
        let store = ParamStore::new();
        let a = random(&mut rng, [2, 2, 3, 3], 1.0);
        let b = Tensor::from_fn([2, 2, 3, 3], |_| rng.gen_range(0.5..2.0));
        out.push(run("elementwise arithmetic", LAYER_TOL, &store, &[a, b], 1e-4, |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let q = t.div(m, v[1])?;
            let sp = t.square_plus(q, 0.5);
            let r = t.sqrt(sp);
            let k = t.scale(r, -1.5);
            let y = t.div(k, v[1])?;
            project(t, y, 5)
        })?);
    }
    {
        let store = ParamStore::new();
        let a = random(&mut rng, [2, 2, 3, 4], 1.0);
        let b = random(&mut rng, [2, 3, 3, 4], 1.0);
        let p = random(&mut rng, [1, 5, 1, 1], 1.0);
        let mask = Tensor::from_fn([2, 1, 6, 8], |[b, _, y, x]| ((b + y / 2 + x) % 2) as f64);
        out.push(run("channel and spatial plumbing", LAYER_TOL, &store, &[a, b, p], 1e-4, move |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let s = t.slice_channels(c, 1, 3)?;
            let u = t.upsample2x(s);
            let m = t.constant(mask.clone());
            let u = t.mask_channels(u, m)?;
            let e = t.expand(v[2], 2, 3, 4)?;
            let e = t.mul(e, c)?;
            let m1 = t.mean(u);
            let q = project(t, e, 6)?;
            let y = t.add(m1, q)?;
            let z = project(t, u, 7)?;
            t.add(y, z)
        })?);
    }
    {
        let store = ParamStore::new();
        let values = random(&mut rng, [1, 2, 3, 3], 3.0);
        let logits = random(&mut rng, [1, 6, 3, 3], 1.0);
        let means = random(&mut rng, [1, 6, 3, 3], 2.0);
        let scales = random(&mut rng, [1, 6, 3, 3], 1.0);
        out.push(run("mixture bits", LAYER_TOL, &store, &[values, logits, means, scales], 1e-5, |t, v| {
            let b = t.gmm_bits(v[0], v[1], v[2], v[3])?;
            Ok(t.sum(b))
        })?);
    }
    {
        let mut store = ParamStore::new();
        let split = SplitNet::new(&mut store, &mut rng, "split", 4, 3);
        let z = random(&mut rng, [1, 3, 8, 8], 1.0);
        out.push(run("latent split", LAYER_TOL, &store, &[z], 1e-4, |t, v| {
            let (a, b) = split.split(t, v[0])?;
            let pa = project(t, a, 8)?;
            let pb = project(t, b, 9)?;
            t.add(pa, pb)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let em = EntropyModel::new(&mut store, &mut rng, "em", 3, 4, true);
        jitter(&mut store, &mut rng, 0.05);
        let latent = random(&mut rng, [1, 3, 8, 8], 2.0);
        let cond = random(&mut rng, [1, 3, 8, 8], 1.0);
        let mask = Tensor::from_fn([1, 1, 8, 8], |[_, _, y, x]| ((y / 4 + x / 4) % 2) as f64);
        out.push(run("entropy model rate", LAYER_TOL, &store, &[latent, cond], 1e-4, move |t, v| {
            let m = t.constant(mask.clone());
            let mut q = Quantizer::new(QuantMode::Noise, 17);
            let noisy = q.apply(t, v[0]);
            let r = em.rate(t, v[0], noisy, m, Some(v[1]), &mut q)?;
            t.add(r.latent_bits, r.hyper_bits)
        })?);
    }
    for (name, kind) in [("hierarchical layer", ModelKind::MAnfic), ("single-scale layer", ModelKind::MsAnfic)] {
        let mut store = ParamStore::new();
        let model = AnfModel::new(&mut store, FlowConfig::new(kind, 4, 3)?, 31);
        let x = random(&mut rng, [1, 3, 64, 64], 0.5);
        let masks = masks_for(1, 64, 5);
        out.push(run(name, LAYER_TOL, &store, &[x], 1e-4, move |t, v| {
            let mv: Vec<Var> = masks.iter().map(|m| t.constant(m.clone())).collect();
            let (x1, z) = match &model.first {
                FirstLayer::Hierarchical(l) => layer_encode(l, t, v[0], None, &mv)?,
                FirstLayer::SingleScale { layer, .. } => layer_encode(layer, t, v[0], None, &mv)?,
            };
            let mut acc = project(t, x1, 10)?;
            for (i, &zi) in z.iter().enumerate() {
                let p = project(t, zi, 11 + i as u64)?;
                acc = t.add(acc, p)?;
            }
            Ok(acc)
        })?);
    }
    for (name, kind) in
        [("end-to-end loss, M-ANFIC", ModelKind::MAnfic), ("end-to-end loss, MS-ANFIC", ModelKind::MsAnfic)]
    {
        let mut store = ParamStore::new();
        let model = AnfModel::new(&mut store, FlowConfig::new(kind, 4, 3)?, 37);
        let x = Tensor::from_fn([2, 3, 64, 64], |_| rng.gen_range(0.0..1.0));
        let masks = masks_for(2, 64, 9);
        let report = check_directional(&store, &[], PROBES, 1e-5, 41, move |t, _| {
            let mut q = Quantizer::new(QuantMode::Noise, 23);
            Ok(forward_loss(&model, t, &x, &masks, 0.01, &mut q)?.loss)
        })?;
        out.push(GradCase { name, tol: END_TO_END_TOL, report });
    }
    Ok(out)
}
