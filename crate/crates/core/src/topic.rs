//! Topic entity prediction: a string-match linker proposes candidates and
//! a CNN scorer with its own generalization step ranks them.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kb::{EntityIx, KnowledgeBase, RelationIx};
use crate::reasoning::AdditiveAttention;
use crate::tensor::{
    apply_buffer_updates, AdamState, BatchNorm1d, Checkpoint, CheckpointHeader, CnnEncoder,
    Embedding, Forward, Graph, GruCell, Linear, Mode, ParamStore, Tensor, Var,
};
use crate::text::{QuestionRecord, Span, Stopwords, TopicMention, Vocabulary};
use crate::training::{
    batch_ranges, mix_seed, pairwise_loss_g, EpochRecord, History, PlateauSchedule, DROPOUT_STREAM,
    SAMPLE_STREAM, SHUFFLE_STREAM,
};

/// Linker ranking key, compared lexicographically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkScore {
    /// Longest run of question tokens found contiguously in the name.
    pub span: usize,
    /// Jaccard similarity of the non-stopword token sets.
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkMatch {
    pub entity: EntityIx,
    /// Question tokens of the longest run (earliest on ties).
    pub span: Span,
    pub score: LinkScore,
}

/// Token-overlap entity linker over the non-literal entities of a KB.
pub struct Linker<'a> {
    kb: &'a KnowledgeBase,
    stopwords: &'a Stopwords,
    index: HashMap<String, Vec<EntityIx>>,
}

impl<'a> Linker<'a> {
    pub fn new(kb: &'a KnowledgeBase, stopwords: &'a Stopwords) -> Self {
        let mut index: HashMap<String, Vec<EntityIx>> = HashMap::new();
        for (e, rec) in kb.entities().iter().enumerate() {
            if rec.is_literal {
                continue;
            }
            let distinct: BTreeSet<&String> = rec
                .name_tokens
                .iter()
                .filter(|t| !stopwords.contains(t))
                .collect();
            for t in distinct {
                index.entry(t.clone()).or_default().push(e);
            }
        }
        Linker {
            kb,
            stopwords,
            index,
        }
    }

    /// Match of entity `e` against the usable question tokens; `None`
    /// without a shared non-stopword run.
    pub fn score(&self, tokens: &[String], usable: &[bool], e: EntityIx) -> Option<LinkMatch> {
        let name = &self.kb.entity(e).name_tokens;
        let mut best: Option<(usize, usize)> = None;
        for s in 0..tokens.len() {
            for j in 0..name.len() {
                let mut len = 0;
                let mut content = false;
                while s + len < tokens.len()
                    && j + len < name.len()
                    && usable[s + len]
                    && tokens[s + len] == name[j + len]
                {
                    content |= !self.stopwords.contains(&tokens[s + len]);
                    len += 1;
                    if content && best.is_none_or(|(_, l)| len > l) {
                        best = Some((s, len));
                    }
                }
            }
        }
        let (start, span) = best?;
        let q: BTreeSet<&String> = tokens
            .iter()
            .zip(usable)
            .filter(|(t, u)| **u && !self.stopwords.contains(t))
            .map(|(t, _)| t)
            .collect();
        let n: BTreeSet<&String> = name
            .iter()
            .filter(|t| !self.stopwords.contains(t))
            .collect();
        let union = q.union(&n).count();
        let jaccard = if union == 0 {
            0.0
        } else {
            q.intersection(&n).count() as f64 / union as f64
        };
        Some(LinkMatch {
            entity: e,
            span: Span {
                start,
                end: start + span,
            },
            score: LinkScore { span, jaccard },
        })
    }

    /// Top-`k` entities by (span, Jaccard), ties by entity id. Tokens with
    /// `usable[i] == false` never match.
    pub fn link(&self, tokens: &[String], usable: &[bool], k: usize) -> Result<Vec<LinkMatch>> {
        if usable.len() != tokens.len() {
            return Err(Error::Invalid(format!(
                "{} usability flags for {} tokens",
                usable.len(),
                tokens.len()
            )));
        }
        let mut pool = BTreeSet::new();
        for (t, _) in tokens.iter().zip(usable).filter(|(_, u)| **u) {
            if let Some(es) = self.index.get(t) {
                pool.extend(es.iter().copied());
            }
        }
        let mut out: Vec<LinkMatch> = pool
            .into_iter()
            .filter_map(|e| self.score(tokens, usable, e))
            .collect();
        out.sort_by(|a, b| {
            b.score
                .span
                .cmp(&a.score.span)
                .then(b.score.jaccard.total_cmp(&a.score.jaccard))
                .then_with(|| {
                    self.kb
                        .entity(a.entity)
                        .id
                        .cmp(&self.kb.entity(b.entity).id)
                })
        });
        out.truncate(k);
        Ok(out)
    }

    /// Link a question; constraint mentions are not available for matching.
    pub fn link_question(&self, q: &QuestionRecord, k: usize) -> Result<Vec<LinkMatch>> {
        let usable: Vec<bool> = q.constraint_kinds().iter().map(Option::is_none).collect();
        self.link(&q.tokens, &usable, k)
    }
}

/// A candidate topic entity with its name, type and surrounding relations
/// (one entry per incident edge).
#[derive(Clone, Debug, PartialEq)]
pub struct TopicCandidate {
    pub entity: EntityIx,
    /// Matched question span; absent for sampled negatives.
    pub span: Option<Span>,
    pub name_tokens: Vec<String>,
    pub type_tokens: Vec<String>,
    pub relation_words: Vec<Vec<String>>,
    pub relations: Vec<RelationIx>,
}

pub fn topic_candidate(kb: &KnowledgeBase, entity: EntityIx, span: Option<Span>) -> TopicCandidate {
    let rec = kb.entity(entity);
    let relations: Vec<RelationIx> = kb.edges(entity).iter().map(|e| e.relation).collect();
    TopicCandidate {
        entity,
        span,
        name_tokens: rec.name_tokens.clone(),
        type_tokens: rec.type_tokens.clone(),
        relation_words: relations
            .iter()
            .map(|&r| kb.relation(r).words.clone())
            .collect(),
        relations,
    }
}

/// Index form of a [`TopicCandidate`]. Relation words are looked up per
/// relation in [`TopicData::relation_words`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TopicFeatures {
    pub entity: EntityIx,
    pub name: Vec<usize>,
    pub type_words: Vec<usize>,
    pub relations: Vec<RelationIx>,
}

/// One question for the predictor: question words and the linker's
/// candidates with their matched spans.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicExample {
    pub question: String,
    pub words: Vec<usize>,
    pub candidates: Vec<TopicFeatures>,
    pub spans: Vec<Option<Span>>,
    /// Gold topic entity, when known.
    pub gold: Option<EntityIx>,
}

impl TopicExample {
    pub fn gold_index(&self) -> Option<usize> {
        let g = self.gold?;
        self.candidates.iter().position(|c| c.entity == g)
    }
}

/// Vocabulary and KB-derived tables shared by every predictor input.
pub struct TopicData<'a> {
    pub kb: &'a KnowledgeBase,
    pub linker: Linker<'a>,
    pub words: Vocabulary,
    /// Word ids of every KB relation.
    pub relation_words: Vec<Vec<usize>>,
    /// Entities eligible as sampled negatives.
    pub pool: Vec<EntityIx>,
}

impl<'a> TopicData<'a> {
    pub fn new(kb: &'a KnowledgeBase, stopwords: &'a Stopwords, words: Vocabulary) -> Self {
        let relation_words = kb
            .relations()
            .iter()
            .map(|r| words.encode(&r.words))
            .collect();
        let pool = (0..kb.num_entities())
            .filter(|&e| !kb.entity(e).is_literal)
            .collect();
        TopicData {
            kb,
            linker: Linker::new(kb, stopwords),
            words,
            relation_words,
            pool,
        }
    }

    /// Vocabulary over the questions' tokens, every non-literal entity's
    /// name and type words, and every relation's words.
    pub fn build_vocab(kb: &KnowledgeBase, questions: &[QuestionRecord]) -> Vocabulary {
        let mut tokens: Vec<&str> = Vec::new();
        for q in questions {
            tokens.extend(q.tokens.iter().map(String::as_str));
        }
        for e in kb.entities().iter().filter(|e| !e.is_literal) {
            tokens.extend(e.name_tokens.iter().map(String::as_str));
            tokens.extend(e.type_tokens.iter().map(String::as_str));
        }
        for r in kb.relations() {
            tokens.extend(r.words.iter().map(String::as_str));
        }
        Vocabulary::build(tokens)
    }

    pub fn features(&self, c: &TopicCandidate) -> TopicFeatures {
        TopicFeatures {
            entity: c.entity,
            name: self.words.encode(&c.name_tokens),
            type_words: self.words.encode(&c.type_tokens),
            relations: c.relations.clone(),
        }
    }

    fn entity_features(&self, e: EntityIx) -> TopicFeatures {
        self.features(&topic_candidate(self.kb, e, None))
    }

    /// Linker candidates (top `k`) for `q`. The gold topic, when given by
    /// the question's mention, is recorded but not inserted.
    pub fn example(&self, q: &QuestionRecord, k: usize) -> Result<TopicExample> {
        let matches = self.linker.link_question(q, k)?;
        let gold = match &q.topic {
            Some(t) => Some(self.kb.resolve(&t.entity_id)?),
            None => None,
        };
        Ok(TopicExample {
            question: q.text.clone(),
            words: self.words.encode(&q.tokens),
            candidates: matches
                .iter()
                .map(|m| self.features(&topic_candidate(self.kb, m.entity, Some(m.span))))
                .collect(),
            spans: matches.iter().map(|m| Some(m.span)).collect(),
            gold,
        })
    }

    pub fn examples(&self, qs: &[QuestionRecord], k: usize) -> Result<Vec<TopicExample>> {
        qs.iter().map(|q| self.example(q, k)).collect()
    }
}

/// Training candidate set of `n` entities: the linker's candidates, the
/// gold topic (replacing the last linked entity when full), then random
/// non-linked entities from `pool`.
pub fn sample_topic_candidates(
    linked: &[EntityIx],
    gold: EntityIx,
    n: usize,
    pool: &[EntityIx],
    rng: &mut ChaCha8Rng,
) -> Vec<EntityIx> {
    let mut out: Vec<EntityIx> = linked.iter().copied().take(n).collect();
    if !out.contains(&gold) {
        if out.len() == n && n > 0 {
            out.pop();
        }
        out.push(gold);
    }
    let taken: BTreeSet<EntityIx> = out.iter().copied().collect();
    let rest: Vec<EntityIx> = pool
        .iter()
        .copied()
        .filter(|e| !taken.contains(e))
        .collect();
    let need = n.saturating_sub(out.len()).min(rest.len());
    out.extend(rest.choose_multiple(rng, need).copied());
    out
}

/// Encodings of one question's candidates.
#[derive(Clone, Copy, Debug)]
pub struct TopicPass {
    /// `1 × d`.
    pub e: Var,
    /// `n × d` each.
    pub c_n: Var,
    pub c_t: Var,
    pub c_r1: Var,
    /// `n × d_p`.
    pub c_r2: Var,
    pub p_k: Var,
    pub p_v: Var,
    /// `1 × d`.
    pub e_hat: Var,
    /// `1 × n`: `ê · P_k`.
    pub scores: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub d: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub n_words: usize,
    pub n_relations: usize,
    pub dropout_embed: f64,
    pub dropout_question: f64,
    pub dropout_answer: f64,
}

impl TopicConfig {
    pub fn from_train(cfg: &TrainConfig, n_words: usize, n_relations: usize) -> Self {
        TopicConfig {
            d: cfg.d,
            d_v: cfg.d_v,
            d_p: cfg.d_p,
            n_words,
            n_relations,
            dropout_embed: cfg.dropout_embed,
            dropout_question: cfg.dropout_question,
            dropout_answer: cfg.dropout_answer,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TopicPredictor {
    pub cfg: TopicConfig,
    pub word: Embedding,
    pub relation: Embedding,
    pub question: CnnEncoder,
    pub name: CnnEncoder,
    pub type_cnn: CnnEncoder,
    pub relation_cnn: CnnEncoder,
    pub key: Linear,
    pub value: Linear,
    pub attention: AdditiveAttention,
    pub gru: GruCell,
    pub bn: BatchNorm1d,
}

/// Row-averaging matrix; empty groups give zero rows.
fn mean_matrix(groups: &[Vec<usize>], cols: usize) -> Result<Tensor> {
    let mut data = vec![0.0; groups.len() * cols];
    for (i, grp) in groups.iter().enumerate() {
        for &j in grp {
            data[i * cols + j] += 1.0 / grp.len() as f64;
        }
    }
    Tensor::new(vec![groups.len(), cols], data)
}

/// First-seen indexing of distinct items.
fn intern<T: Clone + Eq + std::hash::Hash>(
    items: &mut Vec<T>,
    map: &mut HashMap<T, usize>,
    x: &T,
) -> usize {
    *map.entry(x.clone()).or_insert_with(|| {
        items.push(x.clone());
        items.len() - 1
    })
}

impl TopicPredictor {
    pub fn new(store: &mut ParamStore, cfg: &TopicConfig) -> Result<Self> {
        if cfg.d == 0 || cfg.d_v == 0 || cfg.d_p == 0 {
            return Err(Error::Config(
                "topic predictor sizes must be positive".into(),
            ));
        }
        let (d, d_v) = (cfg.d, cfg.d_v);
        let joint = 3 * d + cfg.d_p;
        Ok(TopicPredictor {
            word: Embedding::new(store, "topic.embed.word", cfg.n_words, d_v)?,
            relation: Embedding::new(
                store,
                "topic.embed.relation",
                cfg.n_relations.max(1),
                cfg.d_p,
            )?,
            question: CnnEncoder::new(store, "topic.cnn.question", d_v, d, &[2, 3])?,
            name: CnnEncoder::new(store, "topic.cnn.name", d_v, d, &[3])?,
            type_cnn: CnnEncoder::new(store, "topic.cnn.type", d_v, d, &[3])?,
            relation_cnn: CnnEncoder::new(store, "topic.cnn.relation", d_v, d, &[3])?,
            key: Linear::new(store, "topic.key", joint, d, false)?,
            value: Linear::new(store, "topic.value", joint, d, false)?,
            attention: AdditiveAttention::new(store, "topic.gen_att", d)?,
            gru: GruCell::new(store, "topic.gru", d, d)?,
            bn: BatchNorm1d::new(store, "topic.bn", d)?,
            cfg: cfg.clone(),
        })
    }

    fn encode_seq(&self, f: &mut Forward<'_>, cnn: &CnnEncoder, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Ok(f.zeros(&[1, cnn.out_dim]));
        }
        let emb = self.word.lookup(&mut f.g, ids)?;
        let emb = f.dropout(emb, self.cfg.dropout_embed)?;
        cnn.encode(&mut f.g, emb)
    }

    fn encode_all(
        &self,
        f: &mut Forward<'_>,
        cnn: &CnnEncoder,
        seqs: &[Vec<usize>],
    ) -> Result<Var> {
        let rows = seqs
            .iter()
            .map(|s| self.encode_seq(f, cnn, s))
            .collect::<Result<Vec<_>>>()?;
        f.g.concat(&rows, 0)
    }

    /// Score each question's candidates. In train mode the batch needs at
    /// least two questions (batch normalization).
    pub fn forward(
        &self,
        f: &mut Forward<'_>,
        batch: &[(&[usize], Vec<&TopicFeatures>)],
        relation_words: &[Vec<usize>],
    ) -> Result<Vec<TopicPass>> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if let Some(i) = batch.iter().position(|(_, c)| c.is_empty()) {
            return Err(Error::Invalid(format!(
                "question {i} has no topic candidates"
            )));
        }
        let mut es = Vec::with_capacity(batch.len());
        for (words, _) in batch {
            if words.is_empty() {
                return Err(Error::Invalid("question has no tokens".into()));
            }
            let e = self.encode_seq(f, &self.question, words)?;
            es.push(f.dropout(e, self.cfg.dropout_question)?);
        }

        let (mut ents, mut ent_map) = (Vec::new(), HashMap::new());
        let slots: Vec<Vec<usize>> = batch
            .iter()
            .map(|(_, cs)| {
                cs.iter()
                    .map(|c| intern(&mut ents, &mut ent_map, *c))
                    .collect()
            })
            .collect();
        let (mut rels, mut rel_map) = (Vec::new(), HashMap::new());
        let groups: Vec<Vec<usize>> = ents
            .iter()
            .map(|c: &TopicFeatures| {
                c.relations
                    .iter()
                    .map(|r| intern(&mut rels, &mut rel_map, r))
                    .collect()
            })
            .collect();
        if let Some(&bad) = rels
            .iter()
            .find(|&&r| r >= relation_words.len() || r >= self.relation.vocab)
        {
            return Err(Error::Invalid(format!(
                "relation index {bad} outside the tables"
            )));
        }
        let names: Vec<Vec<usize>> = ents.iter().map(|c| c.name.clone()).collect();
        let types: Vec<Vec<usize>> = ents.iter().map(|c| c.type_words.clone()).collect();
        let c_n = self.encode_all(f, &self.name, &names)?;
        let c_t = self.encode_all(f, &self.type_cnn, &types)?;
        let u = ents.len();
        let (c_r1, c_r2) = if rels.is_empty() {
            (f.zeros(&[u, self.cfg.d]), f.zeros(&[u, self.cfg.d_p]))
        } else {
            let seqs: Vec<Vec<usize>> = rels.iter().map(|&r| relation_words[r].clone()).collect();
            let r_cnn = self.encode_all(f, &self.relation_cnn, &seqs)?;
            let r_emb = self.relation.lookup(&mut f.g, &rels)?;
            let avg = f.g.constant(mean_matrix(&groups, rels.len())?);
            (f.g.matmul(avg, r_cnn)?, f.g.matmul(avg, r_emb)?)
        };
        let joint = f.g.concat(&[c_n, c_t, c_r1, c_r2], 1)?;
        let joint = f.dropout(joint, self.cfg.dropout_answer)?;
        let p_k_all = self.key.forward(&mut f.g, joint)?;
        let p_v_all = self.value.forward(&mut f.g, joint)?;

        let mut passes = Vec::with_capacity(batch.len());
        let mut residuals = Vec::with_capacity(batch.len());
        for (e, idx) in es.into_iter().zip(&slots) {
            let g = &mut f.g;
            let sel = |g: &mut Graph<'_>, v: Var| g.index_select(v, idx);
            let (c_n, c_t, c_r1, c_r2) = (sel(g, c_n)?, sel(g, c_t)?, sel(g, c_r1)?, sel(g, c_r2)?);
            let (p_k, p_v) = (sel(g, p_k_all)?, sel(g, p_v_all)?);
            let a = self.attention.forward(g, e, p_k, &vec![true; idx.len()])?;
            let m = g.matmul(a, p_v)?;
            let e_prime = self.gru.forward(g, e, m)?;
            residuals.push(g.add(e, e_prime)?);
            passes.push(TopicPass {
                e,
                c_n,
                c_t,
                c_r1,
                c_r2,
                p_k,
                p_v,
                e_hat: e,
                scores: e,
            });
        }
        let stacked = f.g.concat(&residuals, 0)?;
        let normed = self.bn.forward(f, stacked)?;
        for (i, p) in passes.iter_mut().enumerate() {
            p.e_hat = f.g.narrow(normed, 0, i, 1)?;
            let t = f.g.transpose(p.e_hat)?;
            let s = f.g.matmul(p.p_k, t)?;
            let n = f.g.shape(p.p_k)[0];
            p.scores = f.g.reshape(s, &[1, n])?;
        }
        Ok(passes)
    }
}

/// `g(e, P_k) + g(ê, P_k)` for gold slot `gold`; `None` when there is no
/// negative candidate.
pub fn topic_loss(g: &mut Graph<'_>, pass: &TopicPass, gold: usize) -> Result<Option<(Var, f64)>> {
    let n = g.shape(pass.p_k)[0];
    if gold >= n {
        return Err(Error::Invalid(format!("gold slot {gold} of {n}")));
    }
    let neg: Vec<usize> = (0..n).filter(|&i| i != gold).collect();
    if neg.is_empty() {
        return Ok(None);
    }
    let a = pairwise_loss_g(g, pass.e, pass.p_k, &[gold], &neg)?;
    let b = pairwise_loss_g(g, pass.e_hat, pass.p_k, &[gold], &neg)?;
    let total = g.add(a, b)?;
    let v = g.value(total).data()[0];
    Ok(Some((total, v)))
}

/// Ranked candidate entities of one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicPrediction {
    pub question: String,
    /// Best entity id, absent when the linker found nothing.
    pub topic_entity: Option<String>,
    pub score: Option<f64>,
    pub candidates: Vec<RankedTopic>,
    #[serde(skip)]
    pub span: Option<Span>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTopic {
    pub entity: String,
    pub score: f64,
}

/// Candidate order by descending score, ties by entity id.
pub fn rank(kb: &KnowledgeBase, entities: &[EntityIx], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| kb.entity(entities[a]).id.cmp(&kb.entity(entities[b]).id))
    });
    order
}

pub fn predict_topic(
    model: &TopicPredictor,
    store: &ParamStore,
    data: &TopicData<'_>,
    ex: &TopicExample,
) -> Result<TopicPrediction> {
    if ex.candidates.is_empty() || ex.words.is_empty() {
        return Ok(TopicPrediction {
            question: ex.question.clone(),
            topic_entity: None,
            score: None,
            candidates: vec![],
            span: None,
        });
    }
    let mut f = Forward::new(store, Mode::Eval, 0);
    let pass = model
        .forward(
            &mut f,
            &[(&ex.words, ex.candidates.iter().collect())],
            &data.relation_words,
        )?
        .remove(0);
    let scores = f.g.value(pass.scores).data().to_vec();
    let ents: Vec<EntityIx> = ex.candidates.iter().map(|c| c.entity).collect();
    let order = rank(data.kb, &ents, &scores);
    let best = order[0];
    Ok(TopicPrediction {
        question: ex.question.clone(),
        topic_entity: Some(data.kb.entity(ents[best]).id.clone()),
        score: Some(scores[best]),
        candidates: order
            .iter()
            .map(|&i| RankedTopic {
                entity: data.kb.entity(ents[i]).id.clone(),
                score: scores[i],
            })
            .collect(),
        span: ex.spans[best],
    })
}

pub fn predict_topics(
    model: &TopicPredictor,
    store: &ParamStore,
    data: &TopicData<'_>,
    examples: &[TopicExample],
) -> Result<Vec<TopicPrediction>> {
    examples
        .par_iter()
        .map(|ex| predict_topic(model, store, data, ex))
        .collect()
}

/// Fraction of questions whose top-ranked candidate is the gold topic.
pub fn recall_at_1(
    model: &TopicPredictor,
    store: &ParamStore,
    data: &TopicData<'_>,
    examples: &[TopicExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no questions to score".into()));
    }
    let preds = predict_topics(model, store, data, examples)?;
    let hits = preds
        .iter()
        .zip(examples)
        .filter(|(p, ex)| {
            ex.gold
                .is_some_and(|g| p.topic_entity.as_deref() == Some(data.kb.entity(g).id.as_str()))
        })
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Questions with the predicted topic as their topic mention; questions
/// without a prediction lose their mention.
pub fn with_predicted_topics(
    questions: &[QuestionRecord],
    predictions: &[TopicPrediction],
) -> Result<Vec<QuestionRecord>> {
    if questions.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} topic predictions for {} questions",
            predictions.len(),
            questions.len()
        )));
    }
    Ok(questions
        .iter()
        .zip(predictions)
        .map(|(q, p)| {
            let mut q = q.clone();
            q.topic = match (&p.topic_entity, p.span) {
                (Some(id), Some(s)) => Some(TopicMention {
                    start: s.start,
                    end: s.end,
                    entity_id: id.clone(),
                }),
                _ => None,
            };
            q
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct TopicFitReport {
    pub history: History,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub skipped_questions: usize,
}

/// Train the predictor with the plateau schedule, selecting on dev
/// recall@1. History rows carry recall@1 in the `dev_f1` column.
#[allow(clippy::too_many_arguments)]
pub fn fit_topic(
    model: &TopicPredictor,
    store: &mut ParamStore,
    data: &TopicData<'_>,
    train: &[TopicExample],
    dev: &[TopicExample],
    cfg: &TrainConfig,
    checkpoint: Option<(&Path, &CheckpointHeader)>,
) -> Result<TopicFitReport> {
    cfg.validate()?;
    let usable: Vec<&TopicExample> = train
        .iter()
        .filter(|ex| ex.gold.is_some() && !ex.words.is_empty())
        .collect();
    let skipped = train.len() - usable.len();
    if skipped > 0 {
        warn!("skipping {skipped} topic training questions without a gold topic");
    }
    if usable.len() < 2 {
        return Err(Error::Invalid(
            "topic training needs at least two questions".into(),
        ));
    }
    if dev.is_empty() {
        return Err(Error::Invalid("empty dev set".into()));
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut history = History::default();
    let mut best = store.snapshot();
    for epoch in 1..=cfg.max_epochs {
        adam.lr = schedule.lr;
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed ^ SHUFFLE_STREAM,
            epoch as u64,
            1,
        )));
        let mut loss = 0.0;
        for (step, r) in batch_ranges(order.len(), cfg.batch).into_iter().enumerate() {
            loss += topic_step(
                model, store, &mut adam, data, &usable, &order[r], cfg, epoch, step,
            )?;
        }
        let recall = recall_at_1(model, store, data, dev)?;
        history.0.push(EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: loss / usable.len() as f64,
            dev_f1: recall,
        });
        info!(
            "topic epoch {epoch}: lr {:.2e} loss {:.5} dev recall@1 {recall:.4}",
            adam.lr,
            loss / usable.len() as f64
        );
        let step = schedule.observe(epoch, recall);
        if step.improved {
            best = store.snapshot();
            if let Some((path, header)) = checkpoint {
                Checkpoint::from_store(header.clone(), store, Some(&adam)).save(path)?;
            }
        }
        if step.stop {
            break;
        }
    }
    store.restore(&best);
    Ok(TopicFitReport {
        history,
        best_epoch: schedule.best_epoch,
        best_recall: schedule.best.unwrap_or(0.0),
        skipped_questions: skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn topic_step(
    model: &TopicPredictor,
    store: &mut ParamStore,
    adam: &mut AdamState,
    data: &TopicData<'_>,
    usable: &[&TopicExample],
    batch: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let sets: Vec<(Vec<TopicFeatures>, usize)> = batch
        .iter()
        .map(|&i| {
            let ex = usable[i];
            let gold = ex.gold.expect("filtered to gold questions");
            let linked: Vec<EntityIx> = ex.candidates.iter().map(|c| c.entity).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed ^ SAMPLE_STREAM,
                epoch as u64,
                (1 << 32) | i as u64,
            ));
            let ents =
                sample_topic_candidates(&linked, gold, cfg.topic_candidates, &data.pool, &mut rng);
            let feats: Vec<TopicFeatures> = ents
                .iter()
                .map(|&e| match linked.iter().position(|&l| l == e) {
                    Some(k) => ex.candidates[k].clone(),
                    None => data.entity_features(e),
                })
                .collect();
            let slot = ents.iter().position(|&e| e == gold).expect("gold inserted");
            (feats, slot)
        })
        .collect();
    let (loss_sum, grads, updates) = {
        let mut f = Forward::new(
            store,
            Mode::Train,
            mix_seed(
                cfg.seed ^ DROPOUT_STREAM,
                epoch as u64,
                (1 << 32) | step as u64,
            ),
        );
        let inputs: Vec<(&[usize], Vec<&TopicFeatures>)> = batch
            .iter()
            .zip(&sets)
            .map(|(&i, (feats, _))| (usable[i].words.as_slice(), feats.iter().collect()))
            .collect();
        let passes = model.forward(&mut f, &inputs, &data.relation_words)?;
        let mut total: Option<Var> = None;
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for (pass, (_, gold)) in passes.iter().zip(&sets) {
            if let Some((v, x)) = topic_loss(&mut f.g, pass, *gold)? {
                loss_sum += x;
                counted += 1;
                total = Some(match total {
                    Some(t) => f.g.add(t, v)?,
                    None => v,
                });
            }
        }
        let Some(total) = total else {
            return Ok(0.0);
        };
        let mean = f.g.scale(total, 1.0 / counted as f64)?;
        let grads = f.g.backward(mean)?;
        (loss_sum, grads, f.take_buffer_updates())
    };
    store.zero_grad();
    grads.accumulate_into(store)?;
    adam.step(store)?;
    apply_buffer_updates(store, updates)?;
    Ok(loss_sum)
}
