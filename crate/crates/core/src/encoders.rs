//! Question and answer-aspect encoders and the key-value memory.
//!
//! Aspect encodings are computed once per distinct aspect in a batch
//! (distinct type, path, context-node and context-set) and gathered per
//! candidate afterwards.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::CandidateFeatures;
use crate::model::ModelConfig;
use crate::tensor::{BiLstm, Embedding, Forward, Linear, ParamStore, Tensor, Var};
use crate::text::Vocabulary;

/// Aspect order along the memory's middle axis.
pub const ASPECTS: [&str; 3] = ["type", "path", "context"];

#[derive(Clone, Debug)]
pub struct Encoders {
    pub word: Embedding,
    pub relation: Embedding,
    pub question: BiLstm,
    pub type_lstm: BiLstm,
    pub path_lstm: BiLstm,
    pub context_lstm: BiLstm,
    /// Mean relation embedding (`d_p`) to `d`.
    pub path_relation: Linear,
    /// Key projections in aspect order; the path one maps `2d → d`.
    pub keys: [Linear; 3],
    pub values: [Linear; 3],
    cfg: ModelConfig,
}

/// Per-candidate aspect encodings of one question.
#[derive(Clone, Copy, Debug)]
pub struct AspectVars {
    pub h_t1: Var,
    pub h_p1: Var,
    /// Mean relation embedding, `n × d_p`.
    pub h_p2: Var,
    pub h_c: Var,
}

/// Key and value memory of one question: `N × 3 × d` each, with `keep`
/// false on padded slots.
#[derive(Clone, Debug)]
pub struct MemoryBlock {
    pub keys: Var,
    pub values: Var,
    pub keep: Vec<bool>,
}

impl MemoryBlock {
    pub fn slots(&self) -> usize {
        self.keep.len()
    }

    pub fn real(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }
}

/// Distinct values in first-appearance order, with each input's position.
struct Interner<K> {
    index: HashMap<K, usize>,
    items: Vec<K>,
}

impl<K: Clone + Eq + Hash> Interner<K> {
    fn new() -> Self {
        Interner {
            index: HashMap::new(),
            items: Vec::new(),
        }
    }

    fn intern(&mut self, k: &K) -> usize {
        if let Some(&i) = self.index.get(k) {
            return i;
        }
        let i = self.items.len();
        self.index.insert(k.clone(), i);
        self.items.push(k.clone());
        i
    }
}

/// Per-batch distinct aspect rows plus, per question, each candidate's row
/// in every table.
struct BatchAspects {
    type_rows: Var,
    path_word_rows: Var,
    rel_mean_rows: Var,
    path_rows: Var,
    context_rows: Var,
    /// Per question: (type, path pair, path words, relation seq, context set).
    slots: Vec<Vec<[usize; 5]>>,
}

impl Encoders {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        // Memory keys and values are bias-free projections.
        let lin =
            |store: &mut ParamStore, name: &str, i: usize| Linear::new(store, name, i, d, false);
        Ok(Encoders {
            word: Embedding::new(store, "embed.word", cfg.n_words, cfg.d_v)?,
            relation: Embedding::new(store, "embed.relation", cfg.n_relations.max(1), cfg.d_p)?,
            question: BiLstm::new(store, "enc.question", cfg.d_v, d)?,
            type_lstm: BiLstm::new(store, "enc.type", cfg.d_v, d)?,
            path_lstm: BiLstm::new(store, "enc.path", cfg.d_v, d)?,
            context_lstm: BiLstm::new(store, "enc.context", cfg.d_v, d)?,
            path_relation: Linear::new(store, "enc.path_relation", cfg.d_p, d, true)?,
            keys: [
                lin(store, "mem.type.key", d)?,
                lin(store, "mem.path.key", 2 * d)?,
                lin(store, "mem.context.key", d)?,
            ],
            values: [
                lin(store, "mem.type.value", d)?,
                lin(store, "mem.path.value", 2 * d)?,
                lin(store, "mem.context.value", d)?,
            ],
            cfg: cfg.clone(),
        })
    }

    /// `H_Q` for each question, `|Q| × d`, from one batched BiLSTM run.
    pub fn encode_questions(
        &self,
        f: &mut Forward<'_>,
        questions: &[&[usize]],
    ) -> Result<Vec<Var>> {
        if let Some(i) = questions.iter().position(|q| q.is_empty()) {
            return Err(Error::Invalid(format!("question {i} has no tokens")));
        }
        let lengths: Vec<usize> = questions.iter().map(|q| q.len()).collect();
        let ids: Vec<usize> = questions.iter().flat_map(|q| q.iter().copied()).collect();
        let emb = self.word.lookup(&mut f.g, &ids)?;
        let emb = f.dropout(emb, self.cfg.dropout_embed)?;
        let out = self.question.encode(&mut f.g, emb, &lengths, true)?;
        let states = out.states.expect("states requested");
        let states = f.dropout(states, self.cfg.dropout_question)?;
        let mut offset = 0;
        let mut hs = Vec::with_capacity(questions.len());
        for &len in &lengths {
            hs.push(f.g.narrow(states, 0, offset, len)?);
            offset += len;
        }
        Ok(hs)
    }

    pub fn encode_question(&self, f: &mut Forward<'_>, words: &[usize]) -> Result<Var> {
        Ok(self.encode_questions(f, &[words])?[0])
    }

    /// BiLSTM finals of each sequence, `U × d`, with word and answer-side
    /// dropout.
    fn encode_sequences(
        &self,
        f: &mut Forward<'_>,
        lstm: &BiLstm,
        seqs: &[Vec<usize>],
    ) -> Result<Var> {
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let emb = self.word.lookup(&mut f.g, &ids)?;
        let emb = f.dropout(emb, self.cfg.dropout_embed)?;
        let out = lstm.encode(&mut f.g, emb, &lengths, false)?;
        f.dropout(out.finals, self.cfg.dropout_answer)
    }

    /// Row-averaging matrix: row `i` averages the rows listed in `groups[i]`
    /// (a zero row when the group is empty).
    fn mean_matrix(groups: &[Vec<usize>], cols: usize) -> Result<Tensor> {
        let mut data = vec![0.0; groups.len() * cols];
        for (i, grp) in groups.iter().enumerate() {
            for &j in grp {
                data[i * cols + j] += 1.0 / grp.len() as f64;
            }
        }
        Tensor::new(vec![groups.len(), cols], data)
    }

    fn batch_aspects(
        &self,
        f: &mut Forward<'_>,
        batch: &[Vec<&CandidateFeatures>],
    ) -> Result<BatchAspects> {
        let d = self.cfg.d;
        let mut types = Interner::new();
        let mut path_words = Interner::new();
        let mut rel_seqs = Interner::new();
        let mut pairs = Interner::new();
        let mut nodes = Interner::new();
        let mut ctx_sets = Interner::new();
        let mut slots = Vec::with_capacity(batch.len());
        for cands in batch {
            let mut qs = Vec::with_capacity(cands.len());
            for c in cands.iter() {
                let t = types.intern(&c.type_words);
                let pw = path_words.intern(&c.path_words);
                let rs = rel_seqs.intern(&c.path_relations);
                let p = pairs.intern(&(pw, rs));
                let set: Vec<usize> = c.context.iter().map(|n| nodes.intern(n)).collect();
                let cs = ctx_sets.intern(&set);
                qs.push([t, p, pw, rs, cs]);
            }
            slots.push(qs);
        }
        if types.items.is_empty() {
            return Err(Error::Invalid("memory needs at least one candidate".into()));
        }
        let type_rows = self.encode_sequences(f, &self.type_lstm, &types.items)?;
        let path_word_rows = self.encode_sequences(f, &self.path_lstm, &path_words.items)?;

        // Mean relation embeddings over the relations used in this batch.
        let mut rel_ids = Interner::new();
        let groups: Vec<Vec<usize>> = rel_seqs
            .items
            .iter()
            .map(|s: &Vec<usize>| s.iter().map(|r| rel_ids.intern(r)).collect())
            .collect();
        if let Some(&bad) = rel_ids.items.iter().find(|&&r| r >= self.relation.vocab) {
            return Err(Error::Invalid(format!(
                "relation index {bad} outside the embedding table"
            )));
        }
        let rel_rows = self.relation.lookup(&mut f.g, &rel_ids.items)?;
        let avg =
            f.g.constant(Self::mean_matrix(&groups, rel_ids.items.len())?);
        let rel_mean_rows = f.g.matmul(avg, rel_rows)?;
        let rel_proj = self.path_relation.forward(&mut f.g, rel_mean_rows)?;
        let (pw_idx, rs_idx): (Vec<usize>, Vec<usize>) = pairs.items.iter().copied().unzip();
        let a = f.g.index_select(path_word_rows, &pw_idx)?;
        let b = f.g.index_select(rel_proj, &rs_idx)?;
        let path_rows = f.g.concat(&[a, b], 1)?;

        let context_rows = if nodes.items.is_empty() {
            f.zeros(&[ctx_sets.items.len(), d])
        } else {
            let node_rows = self.encode_sequences(f, &self.context_lstm, &nodes.items)?;
            let avg =
                f.g.constant(Self::mean_matrix(&ctx_sets.items, nodes.items.len())?);
            f.g.matmul(avg, node_rows)?
        };
        Ok(BatchAspects {
            type_rows,
            path_word_rows,
            rel_mean_rows,
            path_rows,
            context_rows,
            slots,
        })
    }

    /// Per-question aspect encodings `H_t1, H_p1, H_p2, H_c`.
    pub fn encode_aspects(
        &self,
        f: &mut Forward<'_>,
        batch: &[Vec<&CandidateFeatures>],
    ) -> Result<Vec<AspectVars>> {
        let ba = self.batch_aspects(f, batch)?;
        ba.slots
            .iter()
            .map(|qs| {
                let col = |k: usize| qs.iter().map(|s| s[k]).collect::<Vec<_>>();
                let g = &mut f.g;
                Ok(AspectVars {
                    h_t1: g.index_select(ba.type_rows, &col(0))?,
                    h_p1: g.index_select(ba.path_word_rows, &col(2))?,
                    h_p2: g.index_select(ba.rel_mean_rows, &col(3))?,
                    h_c: g.index_select(ba.context_rows, &col(4))?,
                })
            })
            .collect()
    }

    /// Key-value memory per question, padded to `pad_to` slots when given.
    pub fn build_memory(
        &self,
        f: &mut Forward<'_>,
        batch: &[Vec<&CandidateFeatures>],
        pad_to: Option<usize>,
    ) -> Result<Vec<MemoryBlock>> {
        let ba = self.batch_aspects(f, batch)?;
        let g = &mut f.g;
        let sources = [ba.type_rows, ba.path_rows, ba.context_rows];
        let mut key_tables = Vec::with_capacity(3);
        let mut value_tables = Vec::with_capacity(3);
        for x in 0..3 {
            key_tables.push(self.keys[x].forward(g, sources[x])?);
            value_tables.push(self.values[x].forward(g, sources[x])?);
        }
        let d = self.cfg.d;
        let mut out = Vec::with_capacity(batch.len());
        for qs in &ba.slots {
            let n = qs.len();
            let slots = pad_to.unwrap_or(n).max(n);
            let mut assemble = |tables: &[Var]| -> Result<Var> {
                let cols = [0usize, 1, 4];
                let mut parts = Vec::with_capacity(3);
                for x in 0..3 {
                    let idx: Vec<usize> = qs.iter().map(|s| s[cols[x]]).collect();
                    let rows = g.index_select(tables[x], &idx)?;
                    parts.push(g.reshape(rows, &[n, 1, d])?);
                }
                let m = g.concat(&parts, 1)?;
                if slots > n {
                    let pad = g.constant(Tensor::zeros(&[slots - n, 3, d]));
                    g.concat(&[m, pad], 0)
                } else {
                    Ok(m)
                }
            };
            let keys = assemble(&key_tables)?;
            let values = assemble(&value_tables)?;
            let mut keep = vec![true; n];
            keep.resize(slots, false);
            out.push(MemoryBlock { keys, values, keep });
        }
        Ok(out)
    }
}

/// Read whitespace-separated word vectors (`token v1 … v_dim` per line) for
/// tokens in `vocab`. Returns the number of rows written into `table`.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
    let dim = table.cols();
    let file = std::fs::File::open(path)?;
    let mut hits = 0;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let Some(row) = vocab.get(token) else {
            continue;
        };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&values);
        hits += 1;
    }
    Ok(hits)
}

/// Identity weight and zero bias, for inspection tests.
#[cfg(test)]
pub(crate) fn set_identity(store: &mut ParamStore, lin: &Linear) {
    let n = lin.in_dim.min(lin.out_dim);
    let mut w = Tensor::zeros(&[lin.in_dim, lin.out_dim]);
    for i in 0..n {
        w.data_mut()[i * lin.out_dim + i] = 1.0;
    }
    store.set_value(lin.weight, w).unwrap();
    if let Some(b) = lin.bias {
        store
            .set_value(b, Tensor::zeros(&[1, lin.out_dim]))
            .unwrap();
    }
}
