//! Independent recomputations with plain loops and exhaustive search.

use std::collections::VecDeque;

use bamnet::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    assert_eq!(t.rank(), 2, "matrix expected, got {:?}", t.shape());
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// `N × 3 × d` tensor as `[i][x][k]`.
pub fn to_cube(t: &Tensor) -> Vec<Mat> {
    let s = t.shape();
    let d = t.data();
    (0..s[0])
        .map(|i| {
            (0..s[1])
                .map(|x| d[(i * s[1] + x) * s[2]..(i * s[1] + x + 1) * s[2]].to_vec())
                .collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (k, xk) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xk * w[k][c];
        }
    }
    out
}

pub fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax over the kept entries; dropped entries get 0.
pub fn masked_softmax(v: &[f64], keep: &[bool]) -> Vec<f64> {
    let m = (0..v.len())
        .filter(|&i| keep[i])
        .map(|i| v[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..v.len())
        .map(|i| if keep[i] { (v[i] - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    masked_softmax(v, &vec![true; v.len()])
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn undirected(n: usize, triples: &[(usize, usize, usize)]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n];
    for &(s, r, o) in triples {
        adj[s].push((r, o));
        adj[o].push((r, s));
    }
    adj
}

/// Entities at undirected distance `1..=h` from `topic`, by distance then
/// index, from a plain breadth-first search over the triple list.
pub fn bfs_candidates(
    n: usize,
    triples: &[(usize, usize, usize)],
    topic: usize,
    h: usize,
) -> Vec<usize> {
    let adj = undirected(n, triples);
    let mut dist = vec![None; n];
    dist[topic] = Some(0);
    let mut q = VecDeque::from([topic]);
    while let Some(u) = q.pop_front() {
        for &(_, v) in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                q.push_back(v);
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (0..n)
        .filter_map(|e| dist[e].filter(|&d| d >= 1 && d <= h).map(|d| (d, e)))
        .collect();
    out.sort();
    out.into_iter().map(|(_, e)| e).collect()
}

/// Every walk of at most `h` undirected edges from `cand` to `topic`; among
/// the shortest, the smallest relation sequence, then the node sequence
/// smallest when read from the topic end.
pub fn exhaustive_shortest_path(
    n: usize,
    triples: &[(usize, usize, usize)],
    cand: usize,
    topic: usize,
    h: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    let adj = undirected(n, triples);
    let mut found: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    fn walk(
        adj: &[Vec<(usize, usize)>],
        topic: usize,
        left: usize,
        rels: &mut Vec<usize>,
        nodes: &mut Vec<usize>,
        found: &mut Vec<(Vec<usize>, Vec<usize>)>,
    ) {
        let u = *nodes.last().unwrap();
        if u == topic && !rels.is_empty() {
            found.push((rels.clone(), nodes.clone()));
            return;
        }
        if left == 0 {
            return;
        }
        for &(r, v) in &adj[u] {
            rels.push(r);
            nodes.push(v);
            walk(adj, topic, left - 1, rels, nodes, found);
            rels.pop();
            nodes.pop();
        }
    }
    if cand == topic {
        return None;
    }
    walk(&adj, topic, h, &mut vec![], &mut vec![cand], &mut found);
    let len = found.iter().map(|(r, _)| r.len()).min()?;
    found
        .into_iter()
        .filter(|(r, _)| r.len() == len)
        .min_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                let ra: Vec<usize> = a.1.iter().rev().copied().collect();
                let rb: Vec<usize> = b.1.iter().rev().copied().collect();
                ra.cmp(&rb)
            })
        })
}

/// Longest common subsequence length by trying every choice recursively.
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a[0] == b[0] {
        return 1 + brute_lcs(&a[1..], &b[1..]);
    }
    brute_lcs(&a[1..], b).max(brute_lcs(a, &b[1..]))
}

pub struct ImportanceLoop {
    /// `[i][x][j]`.
    pub aqm: Vec<Mat>,
    pub a_m: Mat,
    pub mk_tilde: Mat,
    pub mv_tilde: Mat,
}

pub fn importance_loop(h: &Mat, keys: &[Mat], values: &[Mat], uniform: bool) -> ImportanceLoop {
    let n = keys.len();
    let mut aqm = vec![vec![vec![0.0; h.len()]; 3]; n];
    let mut a_m = vec![vec![0.0; 3]; n];
    let d = h[0].len();
    let mut mk_tilde = vec![vec![0.0; d]; n];
    let mut mv_tilde = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut logits = [0.0; 3];
        for x in 0..3 {
            for j in 0..h.len() {
                aqm[i][x][j] = dot(&keys[i][x], &h[j]);
            }
            logits[x] = max_of(&aqm[i][x]);
        }
        a_m[i] = if uniform {
            vec![1.0 / 3.0; 3]
        } else {
            softmax(&logits)
        };
        for x in 0..3 {
            for k in 0..d {
                mk_tilde[i][k] += a_m[i][x] * keys[i][x][k];
                mv_tilde[i][k] += values[i][x][k];
            }
        }
    }
    ImportanceLoop {
        aqm,
        a_m,
        mk_tilde,
        mv_tilde,
    }
}

pub struct EnhanceLoop {
    /// `[i][j]`: column `j` is a distribution over candidates.
    pub q_to_kb: Mat,
    /// `[i][j]`: row `i` is a distribution over words.
    pub kb_to_q: Mat,
    pub h_tilde: Mat,
    pub q_tilde: Vec<f64>,
    pub a_m: Vec<f64>,
    pub mk_bar: Mat,
}

pub fn enhance_loop(h: &Mat, a_q: &[f64], imp: &ImportanceLoop, keep: &[bool]) -> EnhanceLoop {
    let (n, len, d) = (keep.len(), h.len(), h[0].len());
    let mut a_max = vec![vec![0.0; len]; n];
    for i in 0..n {
        for j in 0..len {
            a_max[i][j] = (0..3)
                .map(|x| imp.aqm[i][x][j])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut q_to_kb = vec![vec![0.0; len]; n];
    for j in 0..len {
        let col: Vec<f64> = (0..n).map(|i| a_max[i][j]).collect();
        let p = masked_softmax(&col, keep);
        for i in 0..n {
            q_to_kb[i][j] = p[i];
        }
    }
    let mut h_tilde = h.clone();
    for j in 0..len {
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += q_to_kb[i][j] * imp.mv_tilde[i][k];
            }
            h_tilde[j][k] += a_q[j] * s;
        }
    }
    let mut q_tilde = vec![0.0; d];
    for j in 0..len {
        for k in 0..d {
            q_tilde[k] += a_q[j] * h_tilde[j][k];
        }
    }
    let kb_to_q: Mat = a_max.iter().map(|r| softmax(r)).collect();
    let a_m: Vec<f64> = (0..n)
        .map(|i| (0..len).map(|j| q_to_kb[i][j] * a_q[j]).sum())
        .collect();
    let mut mk_bar = imp.mk_tilde.clone();
    for i in 0..n {
        for k in 0..d {
            let mut s = 0.0;
            for j in 0..len {
                s += kb_to_q[i][j] * h_tilde[j][k];
            }
            mk_bar[i][k] += a_m[i] * s;
        }
    }
    EnhanceLoop {
        q_to_kb,
        kb_to_q,
        h_tilde,
        q_tilde,
        a_m,
        mk_bar,
    }
}

/// Additive attention parameters split as stored: `w1 = [wq; wk]`.
pub struct AttLoop {
    pub wq: Mat,
    pub wk: Mat,
    pub w2: Vec<f64>,
}

pub fn additive_loop(q: &[f64], keys: &Mat, keep: &[bool], p: &AttLoop) -> Vec<f64> {
    let a = vec_mat(q, &p.wq);
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| {
            let b = vec_mat(k, &p.wk);
            let t: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y).tanh()).collect();
            dot(&t, &p.w2)
        })
        .collect();
    masked_softmax(&logits, keep)
}

pub struct GruLoop {
    pub w_ih: Mat,
    pub w_hh: Mat,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

/// `r, z` gates and candidate `n`, output `(1 − z) n + z h`.
pub fn gru_loop(hidden: &[f64], x: &[f64], p: &GruLoop) -> Vec<f64> {
    let hd = hidden.len();
    let gi = vec_mat(x, &p.w_ih);
    let gh = vec_mat(hidden, &p.w_hh);
    (0..hd)
        .map(|k| {
            let r = sigmoid(gi[k] + p.b_ih[k] + gh[k] + p.b_hh[k]);
            let z = sigmoid(gi[hd + k] + p.b_ih[hd + k] + gh[hd + k] + p.b_hh[hd + k]);
            let n =
                (gi[2 * hd + k] + p.b_ih[2 * hd + k] + r * (gh[2 * hd + k] + p.b_hh[2 * hd + k]))
                    .tanh();
            (1.0 - z) * n + z * hidden[k]
        })
        .collect()
}

pub struct GeneralizeLoop {
    pub a: Vec<f64>,
    pub m_tilde: Vec<f64>,
    pub q_prime: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn generalize_loop(
    q_tilde: &[f64],
    mk_bar: &Mat,
    mv_tilde: &Mat,
    keep: &[bool],
    att: &AttLoop,
    gru: &GruLoop,
) -> GeneralizeLoop {
    let a = additive_loop(q_tilde, mk_bar, keep, att);
    let d = q_tilde.len();
    let mut m_tilde = vec![0.0; d];
    for (i, ai) in a.iter().enumerate() {
        for k in 0..d {
            m_tilde[k] += ai * mv_tilde[i][k];
        }
    }
    let q_prime = gru_loop(q_tilde, &m_tilde, gru);
    let residual = q_tilde.iter().zip(&q_prime).map(|(x, y)| x + y).collect();
    GeneralizeLoop {
        a,
        m_tilde,
        q_prime,
        residual,
    }
}

/// `Σ_{p ∈ pos} Σ_{n ∈ neg} max(0, 1 − s_p + s_n)`.
pub fn hinge_pairs(scores: &[f64], pos: &[usize], neg: &[usize]) -> f64 {
    let mut total = 0.0;
    for &p in pos {
        for &n in neg {
            total += (1.0 - scores[p] + scores[n]).max(0.0);
        }
    }
    total
}
