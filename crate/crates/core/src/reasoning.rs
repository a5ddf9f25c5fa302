//! Two-layered bidirectional attention and the generalization step.
//!
//! Layout: question states are rows (`|Q| × d`), vectors are `1 × d` rows,
//! attention weights over `n` items are `1 × n` rows, and memories are
//! `N × 3 × d` in aspect order (type, path, context).

use crate::encoders::MemoryBlock;
use crate::error::{Error, Result};
use crate::tensor::{BiLstm, Graph, GruCell, ParamId, ParamStore, Tensor, Var};

/// `softmax(tanh([x, y_i] W1) W2)` over the rows `y_i`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    /// `2d × d`: the first `d` rows act on the query, the rest on keys.
    pub w1: ParamId,
    /// `d × 1`.
    pub w2: ParamId,
    pub d: usize,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(AdditiveAttention {
            w1: store.add_uniform(
                &format!("{name}.w1"),
                &[2 * d, d],
                1.0 / ((2 * d) as f64).sqrt(),
            )?,
            w2: store.add_uniform(&format!("{name}.w2"), &[d, 1], 1.0 / (d as f64).sqrt())?,
            d,
        })
    }

    /// Weights `1 × n` of `query` (`1 × d`) over `keys` (`n × d`); slots
    /// with `keep[i] == false` get zero weight.
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, keys: Var, keep: &[bool]) -> Result<Var> {
        let n = g.shape(keys)[0];
        if keep.len() != n {
            return Err(Error::shape(
                "additive_attention",
                format!("mask of {} for {n} keys", keep.len()),
            ));
        }
        if !keep.iter().any(|k| *k) {
            return Err(Error::Invalid(
                "additive attention over an all-masked memory".into(),
            ));
        }
        let w1 = g.param(self.w1);
        let w2 = g.param(self.w2);
        let wq = g.narrow(w1, 0, 0, self.d)?;
        let wk = g.narrow(w1, 0, self.d, self.d)?;
        let a = g.matmul(query, wq)?;
        let b = g.matmul(keys, wk)?;
        let s = g.add(b, a)?;
        let s = g.tanh(s)?;
        let logits = g.matmul(s, w2)?;
        let logits = g.reshape(logits, &[1, n])?;
        g.masked_softmax(logits, 1, keep, &[1, n])
    }
}

/// Aspect slice `N × d` of a memory tensor.
pub fn aspect(g: &mut Graph<'_>, mem: Var, x: usize) -> Result<Var> {
    let s = g.shape(mem).to_vec();
    let v = g.narrow(mem, 1, x, 1)?;
    g.reshape(v, &[s[0], s[2]])
}

/// Self-attention over question words: returns the question summary `q`
/// (`1 × d`) and `A_QQ` (`|Q| × |Q|`, rows normalized).
pub fn self_attend(g: &mut Graph<'_>, h: Var, lstm: &BiLstm) -> Result<(Var, Var)> {
    let ht = g.transpose(h)?;
    let s = g.matmul(h, ht)?;
    let aqq = g.softmax(s, 1)?;
    let attended = g.matmul(aqq, h)?;
    let input = g.concat(&[attended, h], 1)?;
    let (_, q) = lstm.encode_one(g, input)?;
    Ok((q, aqq))
}

/// KB summary: per-aspect additive attention of `q` over the keys, reading
/// the values. Returns `m` (`3 × d`, rows `m_t, m_p, m_c`) and the three
/// weight rows.
pub fn kb_summary(
    g: &mut Graph<'_>,
    q: Var,
    mem: &MemoryBlock,
    atts: &[AdditiveAttention; 3],
) -> Result<(Var, [Var; 3])> {
    let mut rows = Vec::with_capacity(3);
    let mut weights = Vec::with_capacity(3);
    for (x, att) in atts.iter().enumerate() {
        let k = aspect(g, mem.keys, x)?;
        let v = aspect(g, mem.values, x)?;
        let a = att.forward(g, q, k, &mem.keep)?;
        rows.push(g.matmul(a, v)?);
        weights.push(a);
    }
    let m = g.concat(&rows, 0)?;
    Ok((m, [weights[0], weights[1], weights[2]]))
}

/// KB-aware question attention: `A_Qm = H m^T` (`|Q| × 3`), max over
/// aspects, softmax over words. Returns `(A_Qm, ã_Q)` with `ã_Q` as
/// `1 × |Q|`.
pub fn kb_aware_attention(g: &mut Graph<'_>, h: Var, m: Var) -> Result<(Var, Var)> {
    let len = g.shape(h)[0];
    let mt = g.transpose(m)?;
    let a_qm = g.matmul(h, mt)?;
    let a = g.max_reduce(a_qm, 1)?;
    let a = g.reshape(a, &[1, len])?;
    Ok((a_qm, g.softmax(a, 1)?))
}

/// Outputs of the importance step.
#[derive(Clone, Copy, Debug)]
pub struct Importance {
    /// `N × 3 × |Q|`: `aqm[i, x, j] = M_k[i, x] · H[j]`.
    pub aqm: Var,
    /// `N × 3`, each row a distribution over aspects.
    pub a_m: Var,
    pub mk_tilde: Var,
    pub mv_tilde: Var,
}

/// Aspect importance per candidate. With `uniform`, the aspect weights are
/// fixed at 1/3.
pub fn importance(
    g: &mut Graph<'_>,
    h: Var,
    mem: &MemoryBlock,
    uniform: bool,
) -> Result<Importance> {
    let ks = g.shape(mem.keys).to_vec();
    let (n, d) = (ks[0], ks[2]);
    let len = g.shape(h)[0];
    let k2 = g.reshape(mem.keys, &[3 * n, d])?;
    let ht = g.transpose(h)?;
    let s = g.matmul(k2, ht)?;
    let aqm = g.reshape(s, &[n, 3, len])?;
    let a_m = if uniform {
        g.constant(Tensor::full(&[n, 3], 1.0 / 3.0))
    } else {
        let am = g.max_reduce(aqm, 2)?;
        g.softmax(am, 1)?
    };
    let w = g.reshape(a_m, &[n, 3, 1])?;
    let weighted = g.mul(w, mem.keys)?;
    let mk_tilde = g.sum_reduce(weighted, 1)?;
    let mv_tilde = g.sum_reduce(mem.values, 1)?;
    Ok(Importance {
        aqm,
        a_m,
        mk_tilde,
        mv_tilde,
    })
}

/// Outputs of the enhancing step. All `N × |Q|` matrices are indexed
/// `[candidate, word]`.
#[derive(Clone, Copy, Debug)]
pub struct Enhanced {
    /// Max over aspects of `aqm`.
    pub a_qm_max: Var,
    /// Question-to-KB attention: each column is a distribution over
    /// candidates.
    pub q_to_kb: Var,
    /// KB-to-question attention: each row is a distribution over words.
    pub kb_to_q: Var,
    pub h_tilde: Var,
    pub q_tilde: Var,
    /// `N × 1`.
    pub a_m: Var,
    pub mk_bar: Var,
}

pub fn enhance(
    g: &mut Graph<'_>,
    h: Var,
    a_q: Var,
    imp: &Importance,
    keep: &[bool],
) -> Result<Enhanced> {
    let len = g.shape(h)[0];
    let n = keep.len();
    let a_qm_max = g.max_reduce(imp.aqm, 1)?;
    let q_to_kb = g.masked_softmax(a_qm_max, 0, keep, &[n, 1])?;
    let pt = g.transpose(q_to_kb)?;
    let summary = g.matmul(pt, imp.mv_tilde)?;
    let a_col = g.reshape(a_q, &[len, 1])?;
    let scaled = g.mul(a_col, summary)?;
    let h_tilde = g.add(h, scaled)?;
    let q_tilde = g.matmul(a_q, h_tilde)?;
    let kb_to_q = g.softmax(a_qm_max, 1)?;
    let a_m = g.matmul(q_to_kb, a_col)?;
    let read = g.matmul(kb_to_q, h_tilde)?;
    let read = g.mul(a_m, read)?;
    let mk_bar = g.add(imp.mk_tilde, read)?;
    Ok(Enhanced {
        a_qm_max,
        q_to_kb,
        kb_to_q,
        h_tilde,
        q_tilde,
        a_m,
        mk_bar,
    })
}

/// The generalization step up to (not including) batch normalization.
#[derive(Clone, Copy, Debug)]
pub struct Generalized {
    /// `1 × N`.
    pub a: Var,
    pub m_tilde: Var,
    pub q_prime: Var,
    /// `q̃ + q′`, the batch-norm input.
    pub residual: Var,
}

pub fn generalize_pre_norm(
    g: &mut Graph<'_>,
    q_tilde: Var,
    mk_bar: Var,
    mv_tilde: Var,
    keep: &[bool],
    att: &AdditiveAttention,
    gru: &GruCell,
) -> Result<Generalized> {
    let a = att.forward(g, q_tilde, mk_bar, keep)?;
    let m_tilde = g.matmul(a, mv_tilde)?;
    let q_prime = gru.forward(g, q_tilde, m_tilde)?;
    let residual = g.add(q_tilde, q_prime)?;
    Ok(Generalized {
        a,
        m_tilde,
        q_prime,
        residual,
    })
}
