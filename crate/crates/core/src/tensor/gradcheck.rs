//! Central finite-difference checks of tape gradients at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// `"input <i>"` or the parameter name, then the flat index.
    pub site: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Report {
    pub probes: Vec<Probe>,
}

impl Report {
    pub fn max_relative_error(&self) -> f64 {
        self.probes.iter().map(Probe::relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
    }
}

/// Compares the gradient of the scalar `f` with central differences of step
/// `h` at `probes` coordinates drawn uniformly over the inputs and the
/// parameters of `store`.
///
/// `f` must be a deterministic function of its inputs and parameters.
pub fn check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    probes: usize,
    h: f64,
    seed: u64,
    f: F,
) -> Result<Report>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut sites: Vec<(Option<usize>, usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        sites.push((Some(i), i, t.len()));
    }
    for (k, id) in store.ids().enumerate() {
        sites.push((None, k, store.value(id).len()));
    }
    let total: usize = sites.iter().map(|s| s.2).sum();
    let ids: Vec<_> = store.ids().collect();

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let &(input, k, _) = sites
            .iter()
            .find(|s| {
                if flat < s.2 {
                    true
                } else {
                    flat -= s.2;
                    false
                }
            })
            .expect("index within total");
        let mut values = [0.0; 2];
        let (site, analytic);
        match input {
            Some(i) => {
                site = format!("input {i}");
                analytic = grads.leaf(vars[i]).map_or(0.0, |g| g.data()[flat]);
                let mut moved = inputs.to_vec();
                for (v, sign) in values.iter_mut().zip([1.0, -1.0]) {
                    moved[i].data_mut()[flat] = inputs[i].data()[flat] + sign * h;
                    *v = eval(store, &moved)?;
                }
            }
            None => {
                let id = ids[k];
                site = store.get(id).name.clone();
                analytic = grads.param(id).map_or(0.0, |g| g.data()[flat]);
                let mut moved = store.clone();
                let base = store.value(id).data()[flat];
                for (v, sign) in values.iter_mut().zip([1.0, -1.0]) {
                    moved.get_mut(id).value.data_mut()[flat] = base + sign * h;
                    *v = eval(&moved, inputs)?;
                }
            }
        }
        out.push(Probe { site, index: flat, analytic, numeric: (values[0] - values[1]) / (2.0 * h) });
    }
    Ok(Report { probes: out })
}

/// Like [`check`], but each probe is the derivative along a random direction
/// over every input and parameter coordinate at once, so small entries cannot
/// hide in rounding noise.
pub fn check_directional<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    probes: usize,
    h: f64,
    seed: u64,
    f: F,
) -> Result<Report>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let ids: Vec<_> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(probes);
    for probe in 0..probes {
        let dir_in: Vec<Tensor<f64>> =
            inputs.iter().map(|t| Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0..1.0))).collect();
        let dir_p: Vec<Tensor<f64>> =
            ids.iter().map(|&id| Tensor::from_fn(store.value(id).shape(), |_| rng.gen_range(-1.0..1.0))).collect();
        let mut analytic = 0.0;
        for (v, d) in vars.iter().zip(&dir_in) {
            if let Some(g) = grads.leaf(*v) {
                analytic += g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for (&id, d) in ids.iter().zip(&dir_p) {
            if let Some(g) = grads.param(id) {
                analytic += g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut values = [0.0; 2];
        for (v, sign) in values.iter_mut().zip([1.0, -1.0]) {
            let moved_in: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(&dir_in)
                .map(|(t, d)| Tensor::from_fn(t.shape(), |[b, c, y, x]| t.at(b, c, y, x) + sign * h * d.at(b, c, y, x)))
                .collect();
            let mut moved = store.clone();
            for (&id, d) in ids.iter().zip(&dir_p) {
                for (w, &dv) in moved.get_mut(id).value.data_mut().iter_mut().zip(d.data()) {
                    *w += sign * h * dv;
                }
            }
            *v = eval(&moved, &moved_in)?;
        }
        out.push(Probe {
            site: "random direction".into(),
            index: probe,
            analytic,
            numeric: (values[0] - values[1]) / (2.0 * h),
        });
    }
    Ok(Report { probes: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec([1, 1, 1, 2], vec![0.5, -2.0]).unwrap());
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.5, 3.0]).unwrap();
        let w = store.ids().next().unwrap();
        let r = check(&store, &[x], 12, 1e-4, 3, |tape, v| {
            let p = tape.param(w);
            let m = tape.mul(v[0], p)?;
            let s = tape.square(m);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert_eq!(r.probes.len(), 12);
        assert!(r.max_relative_error() < 1e-8, "{:?}", r.worst());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let store = ParamStore::<f64>::new();
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let r = check(&store, &[x], 1, 1e-4, 0, |tape, v| {
            let y = tape.round_straight_through(v[0]);
            let y = tape.add(y, v[0])?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!((r.probes[0].analytic - 2.0).abs() < 1e-12);
        assert!(r.max_relative_error() > 0.4);
    }
}
