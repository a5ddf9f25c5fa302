//! Differentiable layers built on [`Graph`] primitives.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape, the mode, the dropout rng, and batch-norm
/// running-statistic updates to apply once the pass is over.
pub struct Forward<'p> {
    pub g: Graph<'p>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'p> Forward<'p> {
    /// Parameters are tracked for gradients in train mode only.
    pub fn new(store: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self::with_tracking(store, mode, seed, mode == Mode::Train)
    }

    pub fn with_tracking(store: &'p ParamStore, mode: Mode, seed: u64, track_params: bool) -> Self {
        Forward {
            g: Graph::new(store, track_params),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        dropout(&mut self.g, x, rate, self.mode, &mut self.rng)
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.g.constant(Tensor::zeros(shape))
    }
}

/// Write pending buffer updates (batch-norm running stats) into `store`.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, value) in updates {
        store.set_value(id, value)?;
    }
    Ok(())
}

pub fn dropout(
    g: &mut Graph<'_>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Affine map `x · W + b` over rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound)?;
        let bias = if bias {
            Some(store.add_uniform(&format!("{name}.bias"), &[1, out_dim], bound)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        let table = store.add_uniform(name, &[vocab, dim], 0.08)?;
        Ok(Embedding { table, vocab, dim })
    }

    /// `ids.len() × dim` rows.
    pub fn lookup(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding_lookup(t, ids)
    }
}

#[derive(Clone, Debug)]
struct LstmDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

/// Output of a batched bidirectional LSTM run.
pub struct BiLstmOutput {
    /// `Σ L_i × 2h`: per-position `[forward; backward]` states, sequence by
    /// sequence. Only present when requested.
    pub states: Option<Var>,
    /// `n × 2h`: `[forward state at L_i − 1; backward state at 0]`.
    pub finals: Var,
}

/// Bidirectional LSTM with per-direction hidden size `hidden`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: LstmDirection,
    bwd: LstmDirection,
    pub in_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    /// `out_dim` is the concatenated size; each direction gets half.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        if !out_dim.is_multiple_of(2) || out_dim == 0 {
            return Err(Error::Config(format!(
                "BiLSTM output size must be even and positive, got {out_dim}"
            )));
        }
        let hidden = out_dim / 2;
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut dir = |tag: &str| -> Result<LstmDirection> {
            Ok(LstmDirection {
                w_ih: store.add_uniform(
                    &format!("{name}.{tag}.w_ih"),
                    &[in_dim, 4 * hidden],
                    bound,
                )?,
                w_hh: store.add_uniform(
                    &format!("{name}.{tag}.w_hh"),
                    &[hidden, 4 * hidden],
                    bound,
                )?,
                bias: store.add_uniform(&format!("{name}.{tag}.bias"), &[1, 4 * hidden], bound)?,
            })
        };
        let fwd = dir("fwd")?;
        let bwd = dir("bwd")?;
        Ok(BiLstm {
            fwd,
            bwd,
            in_dim,
            hidden,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encode one sequence (`L × in`). Returns the `L × 2h` states and the
    /// `1 × 2h` final state.
    pub fn encode_one(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let len = g.shape(x)[0];
        if len == 0 {
            return Err(Error::Invalid("BiLSTM input sequence is empty".into()));
        }
        let out = self.encode(g, x, &[len], true)?;
        Ok((out.states.expect("states requested"), out.finals))
    }

    /// Encode `lengths.len()` sequences stacked row-wise in `x_all`.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        x_all: Var,
        lengths: &[usize],
        want_states: bool,
    ) -> Result<BiLstmOutput> {
        let shape = g.shape(x_all).to_vec();
        let total: usize = lengths.iter().sum();
        if shape.len() != 2 || shape[0] != total || shape[1] != self.in_dim {
            return Err(Error::shape(
                "bilstm",
                format!("input {:?}, expected [{total}, {}]", shape, self.in_dim),
            ));
        }
        let n = lengths.len();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let mut offsets = Vec::with_capacity(n);
        let mut acc = 0;
        for &l in lengths {
            offsets.push(acc);
            acc += l;
        }

        let run =
            |g: &mut Graph<'_>, p: &LstmDirection, reverse: bool| -> Result<(Vec<Var>, Var)> {
                let h = self.hidden;
                let w_ih = g.param(p.w_ih);
                let w_hh = g.param(p.w_hh);
                let bias = g.param(p.bias);
                let xw = g.matmul(x_all, w_ih)?;
                let xw = g.add(xw, bias)?;
                let pad = g.constant(Tensor::zeros(&[1, 4 * h]));
                let xw = g.concat(&[xw, pad], 0)?;
                let mut hs = g.constant(Tensor::zeros(&[n, h]));
                let mut cs = g.constant(Tensor::zeros(&[n, h]));
                let mut per_step = vec![hs; steps];
                let order: Vec<usize> = if reverse {
                    (0..steps).rev().collect()
                } else {
                    (0..steps).collect()
                };
                for t in order {
                    let active: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
                    let rows: Vec<usize> = (0..n)
                        .map(|i| if active[i] { offsets[i] + t } else { total })
                        .collect();
                    let xt = g.index_select(xw, &rows)?;
                    let hw = g.matmul(hs, w_hh)?;
                    let gates = g.add(xt, hw)?;
                    let ig = g.narrow(gates, 1, 0, h)?;
                    let fg = g.narrow(gates, 1, h, h)?;
                    let cg = g.narrow(gates, 1, 2 * h, h)?;
                    let og = g.narrow(gates, 1, 3 * h, h)?;
                    let ig = g.sigmoid(ig)?;
                    let fg = g.sigmoid(fg)?;
                    let cg = g.tanh(cg)?;
                    let og = g.sigmoid(og)?;
                    let keep = g.mul(fg, cs)?;
                    let write = g.mul(ig, cg)?;
                    let c_new = g.add(keep, write)?;
                    let tc = g.tanh(c_new)?;
                    let h_new = g.mul(og, tc)?;
                    if active.iter().all(|a| *a) {
                        hs = h_new;
                        cs = c_new;
                    } else {
                        let m: Vec<f64> =
                            active.iter().map(|a| if *a { 1.0 } else { 0.0 }).collect();
                        let m = g.constant(Tensor::new(vec![n, 1], m)?);
                        hs = blend(g, hs, h_new, m)?;
                        cs = blend(g, cs, c_new, m)?;
                    }
                    per_step[t] = hs;
                }
                Ok((per_step, hs))
            };

        let (fwd_steps, fwd_final) = run(g, &self.fwd, false)?;
        let (bwd_steps, bwd_final) = run(g, &self.bwd, true)?;
        let finals = if n == 0 {
            g.constant(Tensor::zeros(&[0, 2 * self.hidden]))
        } else {
            g.concat(&[fwd_final, bwd_final], 1)?
        };

        let states = if want_states && total > 0 {
            let gather: Vec<usize> = (0..n)
                .flat_map(|i| (0..lengths[i]).map(move |t| t * n + i))
                .collect();
            let fs = g.concat(&fwd_steps, 0)?;
            let bs = g.concat(&bwd_steps, 0)?;
            let fs = g.index_select(fs, &gather)?;
            let bs = g.index_select(bs, &gather)?;
            Some(g.concat(&[fs, bs], 1)?)
        } else {
            None
        };
        Ok(BiLstmOutput { states, finals })
    }
}

/// `prev + m ⊙ (new − prev)` with `m` an `n × 1` 0/1 column.
fn blend(g: &mut Graph<'_>, prev: Var, new: Var, m: Var) -> Result<Var> {
    let diff = g.sub(new, prev)?;
    let step = g.mul(diff, m)?;
    g.add(prev, step)
}

/// GRU cell: reset/update gates and a tanh candidate.
///
/// `h' = (1 − z) ⊙ n + z ⊙ h`, `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
    pub in_dim: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(GruCell {
            w_ih: store.add_uniform(&format!("{name}.w_ih"), &[in_dim, 3 * hidden], bound)?,
            w_hh: store.add_uniform(&format!("{name}.w_hh"), &[hidden, 3 * hidden], bound)?,
            b_ih: store.add_uniform(&format!("{name}.b_ih"), &[1, 3 * hidden], bound)?,
            b_hh: store.add_uniform(&format!("{name}.b_hh"), &[1, 3 * hidden], bound)?,
            hidden,
            in_dim,
        })
    }

    /// `hidden`: `B × h`, `input`: `B × in`.
    pub fn forward(&self, g: &mut Graph<'_>, hidden: Var, input: Var) -> Result<Var> {
        let (hs, xs) = (g.shape(hidden).to_vec(), g.shape(input).to_vec());
        if hs.len() != 2
            || xs.len() != 2
            || hs[0] != xs[0]
            || hs[1] != self.hidden
            || xs[1] != self.in_dim
        {
            return Err(Error::shape(
                "gru_cell",
                format!("hidden {:?}, input {:?}", hs, xs),
            ));
        }
        let h = self.hidden;
        let (w_ih, w_hh) = (g.param(self.w_ih), g.param(self.w_hh));
        let (b_ih, b_hh) = (g.param(self.b_ih), g.param(self.b_hh));
        let gi = g.matmul(input, w_ih)?;
        let gi = g.add(gi, b_ih)?;
        let gh = g.matmul(hidden, w_hh)?;
        let gh = g.add(gh, b_hh)?;
        let part = |g: &mut Graph<'_>, v: Var, k: usize| g.narrow(v, 1, k * h, h);
        let (ir, iz, inn) = (part(g, gi, 0)?, part(g, gi, 1)?, part(g, gi, 2)?);
        let (hr, hz, hn) = (part(g, gh, 0)?, part(g, gh, 1)?, part(g, gh, 2)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(inn, rn)?;
        let n = g.tanh(n)?;
        let d = g.sub(hidden, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }
}

/// Batch normalization over the rows of a `B × d` input.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Training batches folded into the running statistics so far.
    pub batches_seen: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub dim: usize,
}

/// Reserved name prefix for batch-norm running statistics.
pub const BN_PREFIX: &str = "__bn__";

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(BatchNorm1d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[1, dim]))?,
            running_mean: store.add_buffer(
                &format!("{BN_PREFIX}.{name}.running_mean"),
                Tensor::zeros(&[1, dim]),
            )?,
            running_var: store.add_buffer(
                &format!("{BN_PREFIX}.{name}.running_var"),
                Tensor::full(&[1, dim], 1.0),
            )?,
            batches_seen: store.add_buffer(
                &format!("{BN_PREFIX}.{name}.batches_seen"),
                Tensor::zeros(&[1, 1]),
            )?,
            momentum: 0.1,
            eps: 1e-5,
            dim,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let shape = f.g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape(
                "batch_norm_1d",
                format!("{:?}, dim {}", shape, self.dim),
            ));
        }
        let g = &mut f.g;
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let xhat = match f.mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(Error::Invalid(
                        "batch_norm_1d: train mode needs a batch of at least 2".into(),
                    ));
                }
                let mean = g.mean_reduce(x, 0)?;
                let mean = g.reshape(mean, &[1, self.dim])?;
                let xc = g.sub(x, mean)?;
                let sq = g.mul(xc, xc)?;
                let var = g.mean_reduce(sq, 0)?;
                let var = g.reshape(var, &[1, self.dim])?;
                let (mean_v, var_v) = (g.value(mean).clone(), g.value(var).clone());
                let (rm, rv) = (g.param(self.running_mean), g.param(self.running_var));
                let (store_mean, store_var) = (g.value(rm).clone(), g.value(rv).clone());
                let seen_id = g.param(self.batches_seen);
                let seen = g.value(seen_id).data()[0];
                // Cumulative average until it would weigh the new batch less
                // than the momentum, then an exponential moving average.
                let m = self.momentum.max(1.0 / (seen + 1.0));
                let mix = |old: &Tensor, new: &Tensor| -> Result<Tensor> {
                    let data = old
                        .data()
                        .iter()
                        .zip(new.data())
                        .map(|(o, n)| (1.0 - m) * o + m * n)
                        .collect();
                    Tensor::new(old.shape().to_vec(), data)
                };
                let new_mean = mix(&store_mean, &mean_v)?;
                let new_var = mix(&store_var, &var_v)?;
                let std = g.add_scalar(var, self.eps)?;
                let std = g.sqrt(std)?;
                let xhat = g.div(xc, std)?;
                f.buffer_updates.push((self.running_mean, new_mean));
                f.buffer_updates.push((self.running_var, new_var));
                f.buffer_updates
                    .push((self.batches_seen, Tensor::full(&[1, 1], seen + 1.0)));
                xhat
            }
            Mode::Eval => {
                let rm = g.param(self.running_mean);
                let rv = g.param(self.running_var);
                let xc = g.sub(x, rm)?;
                let std = g.add_scalar(rv, self.eps)?;
                let std = g.sqrt(std)?;
                g.div(xc, std)?
            }
        };
        let g = &mut f.g;
        let y = g.mul(xhat, gamma)?;
        g.add(y, beta)
    }
}

/// 1-d convolution encoder: one filter bank per width, max-pooled over
/// positions with a linear activation; several widths are merged by a
/// linear projection.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub filters: Vec<(usize, Linear)>,
    pub merge: Option<Linear>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl CnnEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        widths: &[usize],
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(
                "CNN needs at least one positive filter width".into(),
            ));
        }
        let filters = widths
            .iter()
            .map(|&w| {
                Ok((
                    w,
                    Linear::new(store, &format!("{name}.conv{w}"), w * in_dim, out_dim, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let merge = if widths.len() > 1 {
            Some(Linear::new(
                store,
                &format!("{name}.merge"),
                widths.len() * out_dim,
                out_dim,
                true,
            )?)
        } else {
            None
        };
        Ok(CnnEncoder {
            filters,
            merge,
            in_dim,
            out_dim,
        })
    }

    /// Encode an `L × in` sequence to `1 × out`. An empty sequence encodes
    /// to zeros; shorter-than-filter inputs are zero-padded.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(
                "cnn_encode",
                format!("{:?}, in_dim {}", shape, self.in_dim),
            ));
        }
        let len = shape[0];
        if len == 0 {
            return Ok(g.constant(Tensor::zeros(&[1, self.out_dim])));
        }
        let widest = self.filters.iter().map(|(w, _)| *w).max().unwrap_or(1);
        let x = if len < widest {
            let pad = g.constant(Tensor::zeros(&[widest - len, self.in_dim]));
            g.concat(&[x, pad], 0)?
        } else {
            x
        };
        let len = len.max(widest);
        let mut pooled = Vec::with_capacity(self.filters.len());
        for (w, lin) in &self.filters {
            let windows = len - w + 1;
            let cols = (0..*w)
                .map(|k| g.narrow(x, 0, k, windows))
                .collect::<Result<Vec<_>>>()?;
            let unfolded = if cols.len() == 1 {
                cols[0]
            } else {
                g.concat(&cols, 1)?
            };
            let conv = lin.forward(g, unfolded)?;
            let p = g.max_reduce(conv, 0)?;
            pooled.push(g.reshape(p, &[1, self.out_dim])?);
        }
        match &self.merge {
            Some(m) => {
                let cat = g.concat(&pooled, 1)?;
                m.forward(g, cat)
            }
            None => Ok(pooled[0]),
        }
    }
}
