//! Append-only computation record with a single reverse sweep.
//!
//! Nodes are pushed in evaluation order, so every node's inputs precede it and
//! the backward pass is one reverse iteration that visits each node once.

use super::ops;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::entropy::gmm::{self, MIXTURE_COMPONENTS};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Square(Var),
    Sqrt(Var),
    LeakyRelu(Var, T),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    MaskChannels {
        x: Var,
        mask: Var,
    },
    Expand(Var),
    Sum(Var),
    /// Forward rounds, backward passes the gradient through unchanged.
    StraightThrough(Var),
    GmmBits {
        value: Var,
        logits: Var,
        means: Var,
        scale_raw: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations over tensors and parameters of one [`ParamStore`].
pub struct Tape<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Adds the parameter gradients into `store` (gradients accumulate until
    /// [`ParamStore::zero_grad`]).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            let dst = store.get_mut(*id).grad.data_mut();
            for (d, &v) in dst.iter_mut().zip(g.data()) {
                *d += v;
            }
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn leaf(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Tape { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], grad_enabled: true }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Tape { grad_enabled: false, ..Tape::new(store) }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let out =
            ops::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, output_padding)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvT { x, w, b, stride, pad }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|v| v * k);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.sqrt());
        let ng = self.needs(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    /// `a² + offset` with an untracked constant offset.
    pub fn square_plus(&mut self, a: Var, offset: T) -> Var {
        let sq = self.square(a);
        let out = self.value(sq).map(|v| v + offset);
        let ng = self.needs(sq);
        self.push(out, Op::Offset(sq), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(a), slope);
        let ng = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = ops::upsample2x(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// Multiplies each channel by a `(b, 1, h, w)` mask.
    pub fn mask_channels(&mut self, x: Var, mask: Var) -> Result<Var> {
        let out = ops::mul_channel_broadcast(self.value(x), self.value(mask))?;
        let ng = self.needs(x) || self.needs(mask);
        Ok(self.push(out, Op::MaskChannels { x, mask }, ng))
    }

    /// Broadcasts a `(1, C, 1, 1)` node to `(b, C, h, w)`.
    pub fn expand(&mut self, p: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let out = ops::expand(self.value(p), b, h, w)?;
        let ng = self.needs(p);
        Ok(self.push(out, Op::Expand(p), ng))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Round to nearest, ties away from zero, with a straight-through gradient.
    pub fn round_straight_through(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.round());
        let ng = self.needs(x);
        self.push(out, Op::StraightThrough(x), ng)
    }

    /// Round to nearest, ties away from zero; the result is a constant.
    pub fn round(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.round());
        self.push(out, Op::Leaf, false)
    }

    /// Per-element code length in bits of `value` under a three-component
    /// mixture. `logits`, `means` and `scale_raw` have `3·C` channels, with
    /// component `k` of channel `c` at channel `k·C + c`.
    pub fn gmm_bits(&mut self, value: Var, logits: Var, means: Var, scale_raw: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(value);
        let pshape = [b, MIXTURE_COMPONENTS * c, h, w];
        for v in [logits, means, scale_raw] {
            if self.shape(v) != pshape {
                return Err(shape_err!("mixture parameters {:?} for values {:?}", self.shape(v), [b, c, h, w]));
            }
        }
        let out = gmm_bits_forward(self.value(value), self.value(logits), self.value(means), self.value(scale_raw));
        let ng = [value, logits, means, scale_raw].iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::GmmBits { value, logits, means, scale_raw }, ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients { params: Vec::new(), leaves: Vec::new() };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => out.leaves.push((Var(i), g)),
                Op::Param(id) => out.params.push((*id, g)),
                op => self.propagate(op, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match *op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(x);
                let wv = self.value(w);
                if self.needs(x) {
                    let gx = ops::conv2d_grad_input(g, wv, stride, pad, (xv.height(), xv.width()));
                    self.send(grads, x, gx);
                }
                if self.needs(w) {
                    let gw = ops::correlate_weight_grad(g, xv, wv.height(), stride, pad);
                    self.send(grads, w, gw);
                }
                if let Some(b) = b {
                    self.send(grads, b, ops::channel_sums(g));
                }
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let xv = self.value(x);
                let wv = self.value(w);
                if self.needs(x) {
                    let gx = ops::conv2d(g, wv, None, stride, pad)?;
                    if gx.shape() != xv.shape() {
                        return Err(shape_err!("transposed conv adjoint {:?} vs {:?}", gx.shape(), xv.shape()));
                    }
                    self.send(grads, x, gx);
                }
                if self.needs(w) {
                    let gw = ops::correlate_weight_grad(xv, g, wv.height(), stride, pad);
                    self.send(grads, w, gw);
                }
                if let Some(b) = b {
                    self.send(grads, b, ops::channel_sums(g));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, a, g.clone());
                self.send(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.send(grads, a, g.zip_map(self.value(b), |gv, bv| gv * bv)?);
                }
                if self.needs(b) {
                    self.send(grads, b, g.zip_map(self.value(a), |gv, av| gv * av)?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                if self.needs(a) {
                    self.send(grads, a, g.zip_map(bv, |gv, d| gv / d)?);
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let gb = Tensor::from_fn(g.shape(), |[i, c, y, x]| {
                        let d = bv.at(i, c, y, x);
                        -g.at(i, c, y, x) * av.at(i, c, y, x) / (d * d)
                    });
                    self.send(grads, b, gb);
                }
            }
            Op::Scale(a, k) => self.send(grads, a, g.map(|v| v * k)),
            Op::Offset(a) => self.send(grads, a, g.clone()),
            Op::Square(a) => {
                let two = T::lit(2.0);
                self.send(grads, a, g.zip_map(self.value(a), |gv, av| two * av * gv)?);
            }
            Op::Sqrt(a) => {
                // d sqrt(a) = 1 / (2 sqrt(a)); the output is recovered from the input.
                let half = T::lit(0.5);
                self.send(grads, a, g.zip_map(self.value(a), |gv, av| half * gv / av.sqrt())?);
            }
            Op::LeakyRelu(a, slope) => {
                let gx = g.zip_map(self.value(a), |gv, av| if av >= T::zero() { gv } else { gv * slope })?;
                self.send(grads, a, gx);
            }
            Op::Concat(a, b) => {
                let ca = self.value(a).channels();
                let cb = self.value(b).channels();
                if self.needs(a) {
                    self.send(grads, a, ops::slice_channels(g, 0, ca)?);
                }
                if self.needs(b) {
                    self.send(grads, b, ops::slice_channels(g, ca, cb)?);
                }
            }
            Op::Slice { x, start } => {
                let [b, c, h, w] = self.shape(x);
                let len = g.channels();
                let mut gx = Tensor::zeros([b, c, h, w]);
                for bi in 0..b {
                    for ci in 0..len {
                        gx.plane_mut(bi, start + ci).copy_from_slice(g.plane(bi, ci));
                    }
                }
                self.send(grads, x, gx);
            }
            Op::Upsample2x(x) => self.send(grads, x, ops::sum_pool2x(g)),
            Op::MaskChannels { x, mask } => {
                let m = self.value(mask);
                if self.needs(x) {
                    self.send(grads, x, ops::mul_channel_broadcast(g, m)?);
                }
                if self.needs(mask) {
                    let xv = self.value(x);
                    let [b, c, h, w] = xv.shape();
                    let mut gm = Tensor::zeros([b, 1, h, w]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let gp = g.plane(bi, ci);
                            let xp = xv.plane(bi, ci);
                            for ((d, &gv), &xvv) in gm.plane_mut(bi, 0).iter_mut().zip(gp).zip(xp) {
                                *d += gv * xvv;
                            }
                        }
                    }
                    self.send(grads, mask, gm);
                }
            }
            Op::Expand(p) => self.send(grads, p, ops::channel_sums(g)),
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.send(grads, x, Tensor::full(self.shape(x), gv));
            }
            Op::StraightThrough(x) => self.send(grads, x, g.clone()),
            Op::GmmBits { value, logits, means, scale_raw } => {
                let (gv, gl, gm, gs) = gmm_bits_backward(
                    self.value(value),
                    self.value(logits),
                    self.value(means),
                    self.value(scale_raw),
                    g,
                );
                self.send(grads, value, gv);
                self.send(grads, logits, gl);
                self.send(grads, means, gm);
                self.send(grads, scale_raw, gs);
            }
        }
        Ok(())
    }
}

fn gather_components<T: Real>(t: &Tensor<T>, b: usize, c: usize, ch: usize, pix: usize) -> [f64; MIXTURE_COMPONENTS] {
    let hw = t.height() * t.width();
    let mut out = [0.0; MIXTURE_COMPONENTS];
    for (k, o) in out.iter_mut().enumerate() {
        *o = t.data()[(b * t.channels() + k * ch + c) * hw + pix].as_f64();
    }
    out
}

fn gmm_bits_forward<T: Real>(value: &Tensor<T>, logits: &Tensor<T>, means: &Tensor<T>, raw: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = value.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for pix in 0..hw {
                let v = value.data()[(bi * c + ci) * hw + pix].as_f64();
                let params = gmm::GmmParams::from_raw(
                    gather_components(logits, bi, ci, c, pix),
                    gather_components(means, bi, ci, c, pix),
                    gather_components(raw, bi, ci, c, pix),
                );
                out.data_mut()[(bi * c + ci) * hw + pix] = T::lit(params.bits(v));
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn gmm_bits_backward<T: Real>(
    value: &Tensor<T>,
    logits: &Tensor<T>,
    means: &Tensor<T>,
    raw: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = value.shape();
    let hw = h * w;
    let mut gv = Tensor::zeros(value.shape());
    let mut gl = Tensor::zeros(logits.shape());
    let mut gm = Tensor::zeros(means.shape());
    let mut gs = Tensor::zeros(raw.shape());
    let kc = MIXTURE_COMPONENTS * c;
    for bi in 0..b {
        for ci in 0..c {
            for pix in 0..hw {
                let upstream = g.data()[(bi * c + ci) * hw + pix].as_f64();
                if upstream == 0.0 {
                    continue;
                }
                let v = value.data()[(bi * c + ci) * hw + pix].as_f64();
                let d = gmm::bits_with_grad(
                    v,
                    gather_components(logits, bi, ci, c, pix),
                    gather_components(means, bi, ci, c, pix),
                    gather_components(raw, bi, ci, c, pix),
                );
                gv.data_mut()[(bi * c + ci) * hw + pix] = T::lit(upstream * d.d_value);
                for k in 0..MIXTURE_COMPONENTS {
                    let idx = (bi * kc + k * c + ci) * hw + pix;
                    gl.data_mut()[idx] = T::lit(upstream * d.d_logits[k]);
                    gm.data_mut()[idx] = T::lit(upstream * d.d_means[k]);
                    gs.data_mut()[idx] = T::lit(upstream * d.d_scale_raw[k]);
                }
            }
        }
    }
    (gv, gl, gm, gs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_has_unit_gradient() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.leaf(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros([1, 1, 2, 2]));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
        let inf = Tape::inference(&store);
        drop(inf);
    }

    #[test]
    fn concat_gradient_is_ones() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::ones([1, 2, 3, 3]));
        let b = tape.input(Tensor::ones([1, 1, 3, 3]));
        let c = tape.concat_channels(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.leaf(a).unwrap(), &Tensor::ones([1, 2, 3, 3]));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(2.0));
        for _ in 0..2 {
            let mut tape = Tape::new(&store);
            let wv = tape.param(w);
            let y = tape.square(wv);
            let g = tape.backward(y).unwrap();
            drop(tape);
            g.accumulate_into(&mut store);
        }
        assert_eq!(store.get(w).grad.data()[0], 8.0);
        store.zero_grad();
        assert_eq!(store.get(w).grad.data()[0], 0.0);
    }

    #[test]
    fn straight_through_rounding() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_vec([1, 1, 1, 3], vec![0.4, -1.5, 1.5]).unwrap());
        let r = tape.round_straight_through(x);
        assert_eq!(tape.value(r).data(), &[0.0, -2.0, 2.0]);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.leaf(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn gmm_bits_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let v = tape.constant(random(&mut rng, [1, 2, 2, 2]));
        let l = tape.constant(random(&mut rng, [1, 6, 2, 2]));
        let m = tape.constant(random(&mut rng, [1, 6, 2, 2]));
        let s = tape.constant(random(&mut rng, [1, 6, 2, 2]));
        let bits = tape.gmm_bits(v, l, m, s).unwrap();
        let (lv, mv, sv) = (tape.value(l), tape.value(m), tape.value(s));
        let params = gmm::GmmParams::from_raw(
            [lv.at(0, 1, 1, 0), lv.at(0, 3, 1, 0), lv.at(0, 5, 1, 0)],
            [mv.at(0, 1, 1, 0), mv.at(0, 3, 1, 0), mv.at(0, 5, 1, 0)],
            [sv.at(0, 1, 1, 0), sv.at(0, 3, 1, 0), sv.at(0, 5, 1, 0)],
        );
        let want = params.bits(tape.value(v).at(0, 1, 1, 0));
        assert!((tape.value(bits).at(0, 1, 1, 0) - want).abs() < 1e-12);
    }
}
