//! Property-level checks behind the fast acceptance criteria.

use std::time::Instant;

use bamnet::encoders::MemoryBlock;
use bamnet::kb::{extract_answer_path, khop_candidates, lcs_alignment, lcs_len};
use bamnet::model::{AblationFlags, BamNet, ModelConfig, QuestionInput};
use bamnet::reasoning::{enhance, generalize_pre_norm, importance, AdditiveAttention};
use bamnet::scoring::{infer_answers, ScoredCandidates};
use bamnet::tensor::{
    BatchNorm1d, BiLstm, CnnEncoder, Embedding, Forward, Graph, GruCell, Linear, Mode, ParamStore,
    Tensor, Var,
};
use bamnet::training::{sample_memory, total_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{self, check, check_expr, leaves, scalarize, FdReport, Objective};
use super::oracle::*;
use super::random::*;
use super::Check;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

type Expr = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> bamnet::Result<Var>>;

/// Tape primitives as `(name, inputs, expression)`.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Expr)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| fd::random_tensor(rng, s, 1.0);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Expr)> = Vec::new();
    cases.push((
        "matmul",
        vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4, 2])],
        Box::new(|g, x| g.matmul(x[0], x[1])),
    ));
    cases.push((
        "transpose",
        vec![r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.transpose(x[0])),
    ));
    cases.push((
        "reshape",
        vec![r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.reshape(x[0], &[2, 3, 2])),
    ));
    cases.push((
        "add (row broadcast)",
        vec![r(&mut rng, &[3, 4]), r(&mut rng, &[1, 4])],
        Box::new(|g, x| g.add(x[0], x[1])),
    ));
    cases.push((
        "sub",
        vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.sub(x[0], x[1])),
    ));
    cases.push((
        "mul (column broadcast)",
        vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 1])],
        Box::new(|g, x| g.mul(x[0], x[1])),
    ));
    let den = Tensor::new(
        vec![3, 4],
        (0..12).map(|_| rng.gen_range(0.5..2.0)).collect(),
    )
    .unwrap();
    cases.push((
        "div",
        vec![r(&mut rng, &[3, 4]), den],
        Box::new(|g, x| g.div(x[0], x[1])),
    ));
    cases.push((
        "scale",
        vec![r(&mut rng, &[2, 3])],
        Box::new(|g, x| g.scale(x[0], -1.7)),
    ));
    cases.push((
        "add_scalar",
        vec![r(&mut rng, &[2, 3])],
        Box::new(|g, x| g.add_scalar(x[0], 0.4)),
    ));
    cases.push((
        "tanh",
        vec![r(&mut rng, &[3, 3])],
        Box::new(|g, x| g.tanh(x[0])),
    ));
    cases.push((
        "sigmoid",
        vec![r(&mut rng, &[3, 3])],
        Box::new(|g, x| g.sigmoid(x[0])),
    ));
    cases.push((
        "relu",
        vec![fd::random_away_from_zero(&mut rng, &[3, 3])],
        Box::new(|g, x| g.relu(x[0])),
    ));
    let pos = Tensor::new(
        vec![2, 3],
        (0..6).map(|_| rng.gen_range(0.5..2.0)).collect(),
    )
    .unwrap();
    cases.push(("sqrt", vec![pos], Box::new(|g, x| g.sqrt(x[0]))));
    cases.push((
        "masked_fill",
        vec![r(&mut rng, &[2, 3])],
        Box::new(|g, x| g.masked_fill(x[0], &[true, false, true], &[1, 3], -2.0)),
    ));
    cases.push((
        "softmax (rows)",
        vec![r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.softmax(x[0], 1)),
    ));
    cases.push((
        "softmax (columns)",
        vec![r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.softmax(x[0], 0)),
    ));
    cases.push((
        "softmax (middle axis)",
        vec![r(&mut rng, &[2, 3, 2])],
        Box::new(|g, x| g.softmax(x[0], 1)),
    ));
    cases.push((
        "masked_softmax",
        vec![r(&mut rng, &[2, 4])],
        Box::new(|g, x| g.masked_softmax(x[0], 1, &[true, true, false, true], &[1, 4])),
    ));
    for (name, axis) in [("max_reduce (axis 0)", 0), ("max_reduce (axis 1)", 1)] {
        cases.push((
            name,
            vec![r(&mut rng, &[3, 4])],
            Box::new(move |g, x| g.max_reduce(x[0], axis)),
        ));
    }
    cases.push((
        "max_reduce (3-d, last axis)",
        vec![r(&mut rng, &[2, 3, 4])],
        Box::new(|g, x| g.max_reduce(x[0], 2)),
    ));
    cases.push((
        "sum_reduce",
        vec![r(&mut rng, &[2, 3, 4])],
        Box::new(|g, x| g.sum_reduce(x[0], 1)),
    ));
    cases.push((
        "mean_reduce",
        vec![r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.mean_reduce(x[0], 0)),
    ));
    cases.push((
        "sum_all",
        vec![r(&mut rng, &[3, 4])],
        Box::new(|g, x| g.sum_all(x[0])),
    ));
    cases.push((
        "concat (rows)",
        vec![r(&mut rng, &[2, 3]), r(&mut rng, &[1, 3])],
        Box::new(|g, x| g.concat(&[x[0], x[1]], 0)),
    ));
    cases.push((
        "concat (3-d, middle axis)",
        vec![r(&mut rng, &[2, 1, 3]), r(&mut rng, &[2, 2, 3])],
        Box::new(|g, x| g.concat(&[x[0], x[1]], 1)),
    ));
    cases.push((
        "narrow",
        vec![r(&mut rng, &[3, 5])],
        Box::new(|g, x| g.narrow(x[0], 1, 1, 3)),
    ));
    cases.push((
        "index_select (repeats)",
        vec![r(&mut rng, &[4, 3])],
        Box::new(|g, x| g.index_select(x[0], &[2, 0, 2, 3])),
    ));
    cases.push((
        "embedding_lookup",
        vec![r(&mut rng, &[5, 3])],
        Box::new(|g, x| g.embedding_lookup(x[0], &[1, 3, 1])),
    ));
    cases
}

/// One parameterized block: fresh store, inputs, objective.
pub type BlockCase = (
    &'static str,
    ParamStore,
    Vec<Tensor>,
    Box<dyn for<'s> Fn(&'s ParamStore, &[Tensor]) -> bamnet::Result<Objective<'s>>>,
);

fn tape<'s>(
    s: &'s ParamStore,
    xs: &[Tensor],
    body: impl FnOnce(&mut Graph<'s>, &[Var]) -> bamnet::Result<Var>,
) -> bamnet::Result<Objective<'s>> {
    let mut g = Graph::new(s, true);
    let vars = leaves(&mut g, xs);
    let out = body(&mut g, &vars)?;
    let root = scalarize(&mut g, out, 23)?;
    Ok(Objective {
        g,
        root,
        inputs: vars,
    })
}

/// Layers and composite blocks with their parameters.
pub fn block_cases() -> Vec<BlockCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut out: Vec<BlockCase> = Vec::new();

    let mut s = ParamStore::new(1);
    let lin = Linear::new(&mut s, "lin", 4, 3, true).unwrap();
    out.push((
        "linear",
        s,
        vec![fd::random_tensor(&mut rng, &[2, 4], 1.0)],
        Box::new(move |s, xs| tape(s, xs, |g, v| lin.forward(g, v[0]))),
    ));

    let mut s = ParamStore::new(2);
    let emb = Embedding::new(&mut s, "emb", 6, 3).unwrap();
    out.push((
        "embedding",
        s,
        vec![],
        Box::new(move |s, xs| tape(s, xs, |g, _| emb.lookup(g, &[4, 1, 4]))),
    ));

    let mut s = ParamStore::new(3);
    let lstm = BiLstm::new(&mut s, "lstm", 3, 4).unwrap();
    out.push((
        "BiLSTM",
        s,
        vec![fd::random_tensor(&mut rng, &[3, 3], 1.0)],
        Box::new(move |s, xs| {
            tape(s, xs, |g, v| {
                let (states, last) = lstm.encode_one(g, v[0])?;
                let a = g.sum_all(states)?;
                let b = scalarize(g, last, 5)?;
                g.add(a, b)
            })
        }),
    ));

    let mut s = ParamStore::new(4);
    let gru = GruCell::new(&mut s, "gru", 3, 4).unwrap();
    out.push((
        "GRU cell",
        s,
        vec![
            fd::random_tensor(&mut rng, &[2, 4], 1.0),
            fd::random_tensor(&mut rng, &[2, 3], 1.0),
        ],
        Box::new(move |s, xs| tape(s, xs, |g, v| gru.forward(g, v[0], v[1]))),
    ));

    let mut s = ParamStore::new(5);
    let att = AdditiveAttention::new(&mut s, "att", 4).unwrap();
    out.push((
        "additive attention",
        s,
        vec![
            fd::random_tensor(&mut rng, &[1, 4], 1.0),
            fd::random_tensor(&mut rng, &[4, 4], 1.0),
        ],
        Box::new(move |s, xs| {
            tape(s, xs, |g, v| {
                att.forward(g, v[0], v[1], &[true, true, false, true])
            })
        }),
    ));

    let mut s = ParamStore::new(6);
    let cnn = CnnEncoder::new(&mut s, "cnn", 3, 4, &[2, 3]).unwrap();
    out.push((
        "CNN encoder",
        s,
        vec![fd::random_tensor(&mut rng, &[4, 3], 1.0)],
        Box::new(move |s, xs| tape(s, xs, |g, v| cnn.encode(g, v[0]))),
    ));

    let mut s = ParamStore::new(7);
    let bn = BatchNorm1d::new(&mut s, "bn", 3).unwrap();
    out.push((
        "batch norm (train)",
        s,
        vec![fd::random_tensor(&mut rng, &[4, 3], 1.0)],
        Box::new(move |s, xs| {
            let mut f = Forward::with_tracking(s, Mode::Train, 0, true);
            let vars = leaves(&mut f.g, xs);
            let y = bn.forward(&mut f, vars[0])?;
            let root = scalarize(&mut f.g, y, 29)?;
            Ok(Objective {
                g: f.g,
                root,
                inputs: vars,
            })
        }),
    ));
    out
}

/// A tiny model with a batch of questions, for end-to-end checks.
pub struct TinyInstance {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub model: BamNet,
    pub questions: Vec<Vec<usize>>,
    pub wh: Vec<usize>,
    pub candidates: Vec<Vec<bamnet::features::CandidateFeatures>>,
}

impl TinyInstance {
    pub fn new(seed: u64, d: usize, lens: &[usize], cands: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny_config(d);
        let mut store = ParamStore::new(seed);
        let model = BamNet::new(&mut store, &cfg).unwrap();
        let questions = lens
            .iter()
            .map(|&l| random_question(&mut rng, &cfg, l))
            .collect();
        let wh = lens.iter().map(|_| rng.gen_range(0..11)).collect();
        let candidates = cands
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|e| random_candidate(&mut rng, &cfg, e))
                    .collect()
            })
            .collect();
        TinyInstance {
            cfg,
            store,
            model,
            questions,
            wh,
            candidates,
        }
    }

    pub fn inputs(&self) -> Vec<QuestionInput<'_>> {
        self.questions
            .iter()
            .zip(&self.wh)
            .zip(&self.candidates)
            .map(|((q, &wh), c)| QuestionInput {
                words: q,
                wh,
                candidates: c.iter().collect(),
            })
            .collect()
    }
}

/// Loss of a tiny instance through every reasoning step, all questions
/// with candidate 0 positive.
pub fn end_to_end_report(
    seed: u64,
    mode: Mode,
    lens: &[usize],
    cands: &[usize],
) -> bamnet::Result<FdReport> {
    let mut inst = TinyInstance::new(seed, 4, lens, cands);
    let model = inst.model.clone();
    let questions = inst.questions.clone();
    let wh = inst.wh.clone();
    let candidates = inst.candidates.clone();
    check(&mut inst.store, &[], move |s, _| {
        let mut f = Forward::with_tracking(s, mode, 0, true);
        let inputs: Vec<QuestionInput> = questions
            .iter()
            .zip(&wh)
            .zip(&candidates)
            .map(|((q, &w), c)| QuestionInput {
                words: q,
                wh: w,
                candidates: c.iter().collect(),
            })
            .collect();
        let passes = model.forward(&mut f, &inputs, AblationFlags::none(), None)?;
        let mut total: Option<Var> = None;
        for (p, c) in passes.iter().zip(&candidates) {
            let neg: Vec<usize> = (1..c.len()).collect();
            let l = total_loss(&mut f.g, p, &[0], &neg, AblationFlags::none())?.total;
            total = Some(match total {
                Some(t) => f.g.add(t, l)?,
                None => l,
            });
        }
        Ok(Objective {
            g: f.g,
            root: total.expect("nonempty batch"),
            inputs: vec![],
        })
    })
}

/// Criterion: finite-difference agreement of every primitive, block and
/// the end-to-end loss, within a time budget.
pub fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst_prim = (0.0f64, String::new());
    let mut failures = Vec::new();
    for (name, inputs, expr) in primitive_cases() {
        match check_expr(&inputs, expr) {
            Ok(r) => {
                if r.max_rel > worst_prim.0 {
                    worst_prim = (r.max_rel, name.to_string());
                }
                if r.max_rel >= PRIMITIVE_TOL {
                    failures.push(format!("{name}: {:.2e} at {}", r.max_rel, r.worst));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    for (name, mut store, inputs, build) in block_cases() {
        match check(&mut store, &inputs, build) {
            Ok(r) => {
                if r.max_rel > worst_prim.0 {
                    worst_prim = (r.max_rel, name.to_string());
                }
                if r.max_rel >= PRIMITIVE_TOL {
                    failures.push(format!("{name}: {:.2e} at {}", r.max_rel, r.worst));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let mut worst_e2e = 0.0f64;
    for (seed, mode, lens, cands) in [
        (31, Mode::Eval, vec![3], vec![2]),
        (32, Mode::Train, vec![3, 2], vec![2, 3]),
    ] {
        match end_to_end_report(seed, mode, &lens, &cands) {
            Ok(r) => {
                let (rel, at) = r.max_rel_floored(fd::RESOLUTION);
                worst_e2e = worst_e2e.max(rel);
                if rel >= END_TO_END_TOL {
                    failures.push(format!("end-to-end {mode:?}: {rel:.2e} at {at}"));
                }
            }
            Err(e) => failures.push(format!("end-to-end {mode:?}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("took {secs:.1}s"));
    }
    Check::new(
        failures.is_empty(),
        format!(
            "worst primitive/block rel err {:.2e} ({}), end-to-end {:.2e}, {:.1}s{}",
            worst_prim.0,
            worst_prim.1,
            worst_e2e,
            secs,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join("; "))
            }
        ),
    )
}

pub fn khop_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.gen_range(4..16);
        let m = rng.gen_range(n / 2..2 * n);
        let rk = random_kb(&mut rng, n, 4, m);
        let topic = rng.gen_range(0..n);
        let h = rng.gen_range(1..=3);
        let got = khop_candidates(&rk.kb, topic, h).unwrap();
        if got != bfs_candidates(n, &rk.triples, topic, h) {
            bad += 1;
        }
    }
    Check::new(
        bad == 0,
        format!("k-hop: {bad}/{instances} disagree with BFS"),
    )
}

pub fn path_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut bad, mut pairs) = (0, 0);
    for _ in 0..instances {
        let n = rng.gen_range(4..12);
        let m = rng.gen_range(n..2 * n);
        let rk = random_kb(&mut rng, n, 3, m);
        let topic = rng.gen_range(0..n);
        let h = rng.gen_range(1..=3);
        for cand in 0..n {
            let want = exhaustive_shortest_path(n, &rk.triples, cand, topic, h);
            let got = extract_answer_path(&rk.kb, cand, topic, h).ok();
            pairs += 1;
            let same = match (&want, &got) {
                (None, None) => true,
                (Some((r, nodes)), Some(p)) => *r == p.relations && *nodes == p.nodes,
                _ => false,
            };
            if !same {
                bad += 1;
            }
        }
    }
    Check::new(
        bad == 0,
        format!("answer paths: {bad}/{pairs} candidate-topic pairs disagree with exhaustive search over {instances} KBs"),
    )
}

pub fn lcs_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut bad = 0;
    for _ in 0..instances {
        let k = rng.gen_range(2..5);
        let a: Vec<u8> = (0..rng.gen_range(0..10))
            .map(|_| rng.gen_range(0..k))
            .collect();
        let b: Vec<u8> = (0..rng.gen_range(0..10))
            .map(|_| rng.gen_range(0..k))
            .collect();
        let want = brute_lcs(&a, &b);
        let al = lcs_alignment(&a, &b);
        let valid = al.iter().all(|&(i, j)| a[i] == b[j])
            && al.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
        if lcs_len(&a, &b) != want || al.len() != want || !valid {
            bad += 1;
        }
    }
    Check::new(
        bad == 0,
        format!("LCS: {bad}/{instances} disagree with exhaustive recursion"),
    )
}

fn mat_of(g: &Graph<'_>, v: Var) -> Mat {
    let t = g.value(v);
    let s = t.shape();
    let cols = *s.last().unwrap();
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

fn att_loop(store: &ParamStore, att: &AdditiveAttention) -> AttLoop {
    let w1 = to_mat(store.value(att.w1));
    AttLoop {
        wq: w1[..att.d].to_vec(),
        wk: w1[att.d..].to_vec(),
        w2: store.value(att.w2).data().to_vec(),
    }
}

fn gru_params(store: &ParamStore, gru: &GruCell) -> GruLoop {
    GruLoop {
        w_ih: to_mat(store.value(gru.w_ih)),
        w_hh: to_mat(store.value(gru.w_hh)),
        b_ih: store.value(gru.b_ih).data().to_vec(),
        b_hh: store.value(gru.b_hh).data().to_vec(),
    }
}

/// Importance, enhancing and generalization against loop recomputation;
/// returns the largest absolute deviation.
pub fn reasoning_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let d = rng.gen_range(2..6);
        let len = rng.gen_range(1..6);
        let real = rng.gen_range(1..5);
        let slots = real + rng.gen_range(0..3);
        let keep = keep_mask(real, slots);
        let cube = |rng: &mut ChaCha8Rng| {
            let mut t = fd::random_tensor(rng, &[slots, 3, d], 1.5);
            for v in &mut t.data_mut()[real * 3 * d..] {
                *v = 0.0;
            }
            t
        };
        let keys = cube(&mut rng);
        let values = cube(&mut rng);
        let h = fd::random_tensor(&mut rng, &[len, d], 1.5);
        let aq_logits: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a_q = softmax(&aq_logits);
        let uniform = inst % 5 == 4;

        let mut store = ParamStore::new(inst as u64);
        let att = AdditiveAttention::new(&mut store, "att", d).unwrap();
        let gru = GruCell::new(&mut store, "gru", d, d).unwrap();
        let mut g = Graph::new(&store, false);
        let hv = g.constant(h.clone());
        let mem = MemoryBlock {
            keys: g.constant(keys.clone()),
            values: g.constant(values.clone()),
            keep: keep.clone(),
        };
        let aqv = g.constant(Tensor::row(&a_q));
        let imp = importance(&mut g, hv, &mem, uniform).unwrap();
        let enh = enhance(&mut g, hv, aqv, &imp, &keep).unwrap();
        let gen = generalize_pre_norm(
            &mut g,
            enh.q_tilde,
            enh.mk_bar,
            imp.mv_tilde,
            &keep,
            &att,
            &gru,
        )
        .unwrap();

        let hm = to_mat(&h);
        let il = importance_loop(&hm, &to_cube(&keys), &to_cube(&values), uniform);
        let el = enhance_loop(&hm, &a_q, &il, &keep);
        let gl = generalize_loop(
            &el.q_tilde,
            &el.mk_bar,
            &il.mv_tilde,
            &keep,
            &att_loop(&store, &att),
            &gru_params(&store, &gru),
        );
        let aqm_flat: Vec<f64> = il.aqm.iter().flatten().flatten().copied().collect();
        let devs = [
            max_abs_diff(g.value(imp.aqm).data(), &aqm_flat),
            max_abs_diff(g.value(imp.a_m).data(), &flat(&il.a_m)),
            max_abs_diff(g.value(imp.mk_tilde).data(), &flat(&il.mk_tilde)),
            max_abs_diff(g.value(imp.mv_tilde).data(), &flat(&il.mv_tilde)),
            max_abs_diff(g.value(enh.q_to_kb).data(), &flat(&el.q_to_kb)),
            max_abs_diff(g.value(enh.kb_to_q).data(), &flat(&el.kb_to_q)),
            max_abs_diff(&flat(&mat_of(&g, enh.h_tilde)), &flat(&el.h_tilde)),
            max_abs_diff(g.value(enh.q_tilde).data(), &el.q_tilde),
            max_abs_diff(g.value(enh.a_m).data(), &el.a_m),
            max_abs_diff(g.value(enh.mk_bar).data(), &flat(&el.mk_bar)),
            max_abs_diff(g.value(gen.a).data(), &gl.a),
            max_abs_diff(g.value(gen.m_tilde).data(), &gl.m_tilde),
            max_abs_diff(g.value(gen.q_prime).data(), &gl.q_prime),
            max_abs_diff(g.value(gen.residual).data(), &gl.residual),
        ];
        worst = devs.iter().copied().fold(worst, f64::max);
    }
    Check::new(
        worst < 1e-6,
        format!("importance/enhancing/generalization: max deviation {worst:.2e} over {instances} instances"),
    )
}

/// The four-term loss against a double loop over (positive, negative)
/// pairs of scores recomputed from the pass's representations.
pub fn loss_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let len = rng.gen_range(1..5);
        let n = rng.gen_range(2..6);
        let t = TinyInstance::new(1000 + inst as u64, 4, &[len], &[n]);
        let order = shuffled(&mut rng, n);
        let n_pos = rng.gen_range(1..n);
        let mut pos: Vec<usize> = order[..n_pos].to_vec();
        let mut neg: Vec<usize> = order[n_pos..].to_vec();
        pos.sort_unstable();
        neg.sort_unstable();
        let flags = if inst % 4 == 3 {
            AblationFlags::single("no_joint_type_matching").unwrap()
        } else {
            AblationFlags::none()
        };
        let mut f = Forward::new(&t.store, Mode::Eval, 0);
        let pass = t
            .model
            .forward(&mut f, &t.inputs(), flags, None)
            .unwrap()
            .remove(0);
        let loss = total_loss(&mut f.g, &pass, &pos, &neg, flags).unwrap();
        let g = &f.g;
        let h = mat_of(g, pass.h_q);
        let a_q = g.value(pass.a_q).data().to_vec();
        let d = h[0].len();
        let summary: Vec<f64> = (0..d)
            .map(|k| (0..h.len()).map(|j| a_q[j] * h[j][k]).sum())
            .collect();
        let keys = to_cube(g.value(pass.memory.keys));
        let key_sum: Mat = keys
            .iter()
            .map(|c| (0..d).map(|k| (0..3).map(|x| c[x][k]).sum()).collect())
            .collect();
        let mk_bar = mat_of(g, pass.mk_bar);
        let q_tilde = g.value(pass.q_tilde).data().to_vec();
        let q_hat = g.value(pass.q_hat).data().to_vec();
        let q_w = g.value(pass.q_w).data().to_vec();
        let h_t2 = mat_of(g, pass.h_t2);
        let scores = |q: &[f64], m: &Mat| -> Vec<f64> { m.iter().map(|r| dot(q, r)).collect() };
        let mut terms = vec![
            hinge_pairs(&scores(&summary, &key_sum), &pos, &neg),
            hinge_pairs(&scores(&q_tilde, &mk_bar), &pos, &neg),
            hinge_pairs(&scores(&q_hat, &mk_bar), &pos, &neg),
        ];
        if !flags.no_joint_type_matching {
            terms.push(hinge_pairs(&scores(&q_w, &h_t2), &pos, &neg));
        }
        let total: f64 = terms.iter().sum();
        worst = worst.max((g.value(loss.total).data()[0] - total).abs());
        for (i, t) in terms.iter().enumerate() {
            worst = worst.max((loss.breakdown.terms[i] - t).abs());
        }
    }
    Check::new(
        worst < 1e-6,
        format!(
            "loss: max deviation {worst:.2e} from the pair double loop over {instances} instances"
        ),
    )
}

/// Criterion: every oracle family agrees on 100 seeded instances.
pub fn oracle_suite() -> Check {
    let parts = [
        khop_oracle(100),
        path_oracle(100),
        lcs_oracle(100),
        reasoning_oracle(100),
        loss_oracle(100),
    ];
    Check::new(
        parts.iter().all(|c| c.passed),
        parts
            .iter()
            .map(|c| c.detail.as_str())
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Criterion: every attention distribution sums to one and puts no mass
/// on padded memory slots.
pub fn normalization_suite(batches: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut sum_dev, mut pad_mass, mut dists) = (0.0f64, 0.0f64, 0usize);
    for b in 0..batches {
        let size = rng.gen_range(2..5);
        let lens: Vec<usize> = (0..size).map(|_| rng.gen_range(1..6)).collect();
        let cands: Vec<usize> = (0..size).map(|_| rng.gen_range(1..6)).collect();
        let pad = cands.iter().max().unwrap() + rng.gen_range(1..4);
        let t = TinyInstance::new(2000 + b as u64, 4, &lens, &cands);
        let flags = if b % 3 == 2 {
            AblationFlags::single("no_kb_aware_attn_use_self_attn").unwrap()
        } else {
            AblationFlags::none()
        };
        let mode = if b % 2 == 0 { Mode::Eval } else { Mode::Train };
        let mut f = Forward::new(&t.store, mode, b as u64);
        let passes = t
            .model
            .forward(&mut f, &t.inputs(), flags, Some(pad))
            .unwrap();
        let g = &f.g;
        for (p, &n) in passes.iter().zip(&cands) {
            let keep = keep_mask(n, pad);
            let mut rows = |m: Mat, masked: bool| {
                for r in m {
                    dists += 1;
                    sum_dev = sum_dev.max((r.iter().sum::<f64>() - 1.0).abs());
                    if masked {
                        for (i, v) in r.iter().enumerate() {
                            if !keep[i] {
                                pad_mass = pad_mass.max(v.abs());
                            }
                        }
                    }
                }
            };
            rows(mat_of(g, p.a_q), false);
            if let Some(aqq) = p.a_qq {
                rows(mat_of(g, aqq), false);
            }
            if let Some(ws) = p.kb_weights {
                for w in ws {
                    rows(mat_of(g, w), true);
                }
            }
            rows(mat_of(g, p.importance.a_m)[..n].to_vec(), false);
            if let Some(e) = p.enhanced {
                let cols = mat_of(g, e.q_to_kb);
                let transposed: Mat = (0..cols[0].len())
                    .map(|j| cols.iter().map(|r| r[j]).collect())
                    .collect();
                rows(transposed, true);
                rows(mat_of(g, e.kb_to_q)[..n].to_vec(), false);
                rows(vec![g.value(e.a_m).data().to_vec()], true);
            }
            if let Some(gen) = p.generalized {
                rows(mat_of(g, gen.a), true);
            }
        }
    }
    Check::new(
        sum_dev < 1e-6 && pad_mass < 1e-6,
        format!(
            "{dists} distributions over {batches} padded batches: max |sum - 1| {sum_dev:.2e}, max padded mass {pad_mass:.2e}"
        ),
    )
}

/// Criterion: threshold inference is monotone in θ and keeps the argmax.
pub fn threshold_law(vectors: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let grid: Vec<f64> = (1..=20).map(|k| k as f64 / 10.0).collect();
    let mut bad = 0;
    for _ in 0..vectors {
        let n = rng.gen_range(1..25);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = ScoredCandidates::unmasked(scores.clone());
        let best = s.argmax().unwrap();
        let mut prev: Option<Vec<usize>> = None;
        for &theta in &grid {
            let a = infer_answers(&s, theta).unwrap();
            let ok_argmax = a.contains(&best);
            let ok_mono = prev
                .as_ref()
                .is_none_or(|p| p.iter().all(|i| a.contains(i)));
            if !ok_argmax || !ok_mono {
                bad += 1;
            }
            prev = Some(a);
        }
    }
    Check::new(
        bad == 0,
        format!(
            "{vectors} score vectors x {} thresholds: {bad} violations",
            grid.len()
        ),
    )
}

/// Criterion: memory sampling follows the two-branch rule with exact
/// counts.
pub fn sampling_law(calls: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (mut first, mut second, mut bad) = (0, 0, 0);
    for call in 0..calls {
        let p = rng.gen_range(1..150);
        let q = rng.gen_range(0..200);
        let n_max = rng.gen_range(1..130);
        let pos: Vec<usize> = (0..p).collect();
        let neg: Vec<usize> = (p..p + q).collect();
        let mut draw = ChaCha8Rng::seed_from_u64(call as u64);
        let s = sample_memory(&pos, &neg, n_max, &mut draw);
        let n_pos = s.iter().filter(|&&i| i < p).count();
        let n_neg = s.len() - n_pos;
        let distinct = s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&i| i < p + q);
        let counts_ok = if n_max > p {
            first += 1;
            n_pos == p && n_neg == (n_max - p).min(q)
        } else {
            second += 1;
            let k = (n_max / 2).min(q);
            n_neg == k && n_pos == n_max - k
        };
        if !distinct || !counts_ok || s.len() > n_max {
            bad += 1;
        }
    }
    Check::new(
        bad == 0,
        format!("{calls} calls ({first} fill branch, {second} capped branch): {bad} violations"),
    )
}
