//! Central finite differences against reverse-mode gradients.

use bamnet::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use bamnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

/// A scalar objective on a fresh tape, with the input leaves it was built
/// from (same order as the input tensors).
pub struct Objective<'s> {
    pub g: Graph<'s>,
    pub root: Var,
    pub inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest per-tensor relative error.
    pub max_rel: f64,
    /// Per tensor: name, `‖a − n‖`, `‖a‖ + ‖n‖`.
    pub tensors: Vec<(String, f64, f64)>,
    pub worst: String,
    /// Scalar derivatives compared.
    pub checked: usize,
}

/// Below this gradient scale central differences resolve nothing but
/// roundoff (`ε·|f|/h` plus `h²·f‴`), so relative errors are taken
/// against it instead.
pub const RESOLUTION: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-8)`.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a) + norm(n)).max(1e-8)
}

impl FdReport {
    /// Worst per-tensor `‖a − n‖ / max(‖a‖ + ‖n‖, floor)`.
    pub fn max_rel_floored(&self, floor: f64) -> (f64, &str) {
        self.tensors
            .iter()
            .map(|(name, diff, scale)| (diff / scale.max(floor), name.as_str()))
            .fold((0.0, ""), |acc, x| if x.0 >= acc.0 { x } else { acc })
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values bounded away from zero, for kinked primitives.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ w ⊙ v` with fixed pseudo-random weights, so every output entry
/// contributes to the scalar.
pub fn scalarize(g: &mut Graph<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

/// Leaves requiring gradients for every input tensor.
pub fn leaves(g: &mut Graph<'_>, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| g.leaf(t.clone(), true)).collect()
}

/// Compare the tape's gradients for every input and every trainable
/// parameter reached with central differences of step [`EPS`].
pub fn check<F>(store: &mut ParamStore, inputs: &[Tensor], build: F) -> Result<FdReport>
where
    F: for<'s> Fn(&'s ParamStore, &[Tensor]) -> Result<Objective<'s>>,
{
    let (ana_inputs, ana_params) = {
        let obj = build(store, inputs)?;
        let root = obj.root;
        let ins = obj.inputs.clone();
        let mut g = obj.g;
        let grads = g.backward(root)?;
        let ai: Vec<Tensor> = ins
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        let ap: Vec<(ParamId, Tensor)> = grads.params().map(|(id, t)| (id, t.clone())).collect();
        (ai, ap)
    };
    let value = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let obj = build(store, inputs)?;
        Ok(obj.g.value(obj.root).data()[0])
    };
    let mut report = FdReport {
        max_rel: 0.0,
        tensors: Vec::new(),
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: String, a: &Tensor, n: &[f64]| {
        let e = rel_error(a.data(), n);
        let diff: Vec<f64> = a.data().iter().zip(n).map(|(x, y)| x - y).collect();
        report
            .tensors
            .push((name.clone(), norm(&diff), norm(a.data()) + norm(n)));
        report.checked += n.len();
        if e >= report.max_rel {
            report.max_rel = e;
            report.worst = name;
        }
    };
    for (i, a) in ana_inputs.iter().enumerate() {
        let mut num = vec![0.0; a.numel()];
        let mut xs = inputs.to_vec();
        for (k, slot) in num.iter_mut().enumerate() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + EPS;
            let up = value(store, &xs)?;
            xs[i].data_mut()[k] = orig - EPS;
            let down = value(store, &xs)?;
            xs[i].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * EPS);
        }
        record(format!("input {i}"), a, &num);
    }
    for (id, a) in &ana_params {
        let orig = store.value(*id).clone();
        let mut num = vec![0.0; a.numel()];
        for (k, slot) in num.iter_mut().enumerate() {
            let mut t = orig.clone();
            t.data_mut()[k] += EPS;
            store.set_value(*id, t)?;
            let up = value(store, inputs)?;
            let mut t = orig.clone();
            t.data_mut()[k] -= EPS;
            store.set_value(*id, t)?;
            let down = value(store, inputs)?;
            *slot = (up - down) / (2.0 * EPS);
        }
        store.set_value(*id, orig)?;
        record(store.name(*id).to_string(), a, &num);
    }
    Ok(report)
}

/// [`check`] for a parameter-free expression of the inputs, scalarized.
pub fn check_expr<F>(inputs: &[Tensor], expr: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new(0);
    check(&mut store, inputs, |s, xs| {
        let mut g = Graph::new(s, false);
        let vars = leaves(&mut g, xs);
        let out = expr(&mut g, &vars)?;
        let root = scalarize(&mut g, out, 17)?;
        Ok(Objective {
            g,
            root,
            inputs: vars,
        })
    })
}
