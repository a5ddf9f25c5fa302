//! The full network: encoders, reasoning, answer scoring and the separate
//! interrogative/type matching tables.

use serde::{Deserialize, Serialize};

use crate::encoders::{Encoders, MemoryBlock};
use crate::error::{Error, Result};
use crate::features::CandidateFeatures;
use crate::reasoning::{self, AdditiveAttention, Enhanced, Generalized, Importance};
use crate::tensor::{BatchNorm1d, BiLstm, Embedding, Forward, GruCell, ParamStore, Tensor, Var};
use crate::text::{DelexOptions, INTERROGATIVES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub d_t: usize,
    pub n_words: usize,
    pub n_relations: usize,
    pub n_types: usize,
    pub dropout_embed: f64,
    pub dropout_question: f64,
    pub dropout_answer: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            d_v: 300,
            d_p: 128,
            d_t: 16,
            n_words: 2,
            n_relations: 1,
            n_types: 2,
            dropout_embed: 0.3,
            dropout_question: 0.3,
            dropout_answer: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d must be even and positive, got {}",
                self.d
            )));
        }
        if self.d_v == 0 || self.d_p == 0 || self.d_t == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        for r in [
            self.dropout_embed,
            self.dropout_question,
            self.dropout_answer,
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Module switches for ablation runs. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_bidirectional_attn: bool,
    pub no_kb_aware_attn_use_self_attn: bool,
    pub no_importance: bool,
    pub no_enhancing: bool,
    pub no_generalization: bool,
    pub no_joint_type_matching: bool,
    pub no_topic_delex: bool,
    pub no_constraint_delex: bool,
}

/// Flag names in report order.
pub const ABLATION_NAMES: [&str; 8] = [
    "no_bidirectional_attn",
    "no_kb_aware_attn_use_self_attn",
    "no_importance",
    "no_enhancing",
    "no_generalization",
    "no_joint_type_matching",
    "no_topic_delex",
    "no_constraint_delex",
];

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name.replace('-', "_").as_str() {
            "no_bidirectional_attn" => &mut self.no_bidirectional_attn,
            "no_kb_aware_attn_use_self_attn" => &mut self.no_kb_aware_attn_use_self_attn,
            "no_importance" => &mut self.no_importance,
            "no_enhancing" => &mut self.no_enhancing,
            "no_generalization" => &mut self.no_generalization,
            "no_joint_type_matching" => &mut self.no_joint_type_matching,
            "no_topic_delex" => &mut self.no_topic_delex,
            "no_constraint_delex" => &mut self.no_constraint_delex,
            other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
        };
        *slot = on;
        Ok(())
    }

    pub fn single(name: &str) -> Result<Self> {
        let mut f = Self::none();
        f.set(name, true)?;
        Ok(f)
    }

    pub fn active(&self) -> Vec<&'static str> {
        let on = [
            self.no_bidirectional_attn,
            self.no_kb_aware_attn_use_self_attn,
            self.no_importance,
            self.no_enhancing,
            self.no_generalization,
            self.no_joint_type_matching,
            self.no_topic_delex,
            self.no_constraint_delex,
        ];
        ABLATION_NAMES
            .iter()
            .zip(on)
            .filter(|(_, o)| *o)
            .map(|(n, _)| *n)
            .collect()
    }

    /// Both switches define the question attention, so they cannot be
    /// combined.
    pub fn validate(&self) -> Result<()> {
        if self.no_bidirectional_attn && self.no_kb_aware_attn_use_self_attn {
            return Err(Error::Config(
                "no_bidirectional_attn and no_kb_aware_attn_use_self_attn both replace the question attention".into(),
            ));
        }
        Ok(())
    }

    /// Flags with the implications of `no_bidirectional_attn` expanded.
    pub fn effective(&self) -> Self {
        let mut f = *self;
        if f.no_bidirectional_attn {
            f.no_importance = true;
            f.no_enhancing = true;
        }
        f
    }

    pub fn delex(&self) -> DelexOptions {
        DelexOptions {
            topic: !self.no_topic_delex,
            constraints: !self.no_constraint_delex,
        }
    }

    /// Replacement used for each active flag, for report headers.
    pub fn describe(name: &str) -> &'static str {
        match name {
            "no_bidirectional_attn" => "question attention uniform; importance, enhancing off",
            "no_kb_aware_attn_use_self_attn" => {
                "question attention = column mean of self-attention"
            }
            "no_importance" => "aspect weights fixed at 1/3",
            "no_enhancing" => "q~ = H_Q a~_Q, M-bar_k = M~_k",
            "no_generalization" => "q^ = q~",
            "no_joint_type_matching" => "type matching term dropped from the loss",
            "no_topic_delex" => "topic mention kept verbatim",
            "no_constraint_delex" => "constraint mentions kept verbatim",
            _ => "",
        }
    }
}

/// One question's model input.
#[derive(Clone, Debug)]
pub struct QuestionInput<'a> {
    pub words: &'a [usize],
    pub wh: usize,
    pub candidates: Vec<&'a CandidateFeatures>,
}

/// Every intermediate of one question's forward pass.
#[derive(Clone, Debug)]
pub struct QuestionPass {
    pub h_q: Var,
    pub memory: MemoryBlock,
    /// Self-attention and KB summary; absent when the KB-aware attention is
    /// replaced.
    pub a_qq: Option<Var>,
    pub q: Option<Var>,
    pub m: Option<Var>,
    pub kb_weights: Option<[Var; 3]>,
    pub a_qm_kb: Option<Var>,
    /// `1 × |Q|`.
    pub a_q: Var,
    pub importance: Importance,
    pub enhanced: Option<Enhanced>,
    pub q_tilde: Var,
    pub mk_bar: Var,
    pub generalized: Option<Generalized>,
    pub q_hat: Var,
    /// `1 × N` raw dot products (padded slots included).
    pub scores: Var,
    /// Interrogative embedding `1 × d_t` and candidate type embeddings
    /// `n × d_t` (real candidates only).
    pub q_w: Var,
    pub h_t2: Var,
}

#[derive(Clone, Debug)]
pub struct BamNet {
    pub cfg: ModelConfig,
    pub enc: Encoders,
    pub self_attn: BiLstm,
    pub kb_attention: [AdditiveAttention; 3],
    pub gru_attention: AdditiveAttention,
    pub gru: GruCell,
    pub bn: BatchNorm1d,
    pub wh: Embedding,
    pub entity_type: Embedding,
}

impl BamNet {
    /// Register every parameter in `store` (which should be empty) and
    /// return the model.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(BamNet {
            enc: Encoders::new(store, cfg)?,
            self_attn: BiLstm::new(store, "reason.self_attn", 2 * d, d)?,
            kb_attention: [
                AdditiveAttention::new(store, "reason.kb_att.type", d)?,
                AdditiveAttention::new(store, "reason.kb_att.path", d)?,
                AdditiveAttention::new(store, "reason.kb_att.context", d)?,
            ],
            gru_attention: AdditiveAttention::new(store, "reason.gen_att", d)?,
            gru: GruCell::new(store, "reason.gru", d, d)?,
            bn: BatchNorm1d::new(store, "reason.bn", d)?,
            wh: Embedding::new(store, "match.wh", INTERROGATIVES.len() + 1, cfg.d_t)?,
            entity_type: Embedding::new(store, "match.type", cfg.n_types, cfg.d_t)?,
            cfg: cfg.clone(),
        })
    }

    /// Forward a batch. In train mode with generalization on, the batch
    /// needs at least two questions.
    pub fn forward(
        &self,
        f: &mut Forward<'_>,
        batch: &[QuestionInput<'_>],
        flags: AblationFlags,
        pad_to: Option<usize>,
    ) -> Result<Vec<QuestionPass>> {
        flags.validate()?;
        let flags = flags.effective();
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if let Some(i) = batch.iter().position(|q| q.candidates.is_empty()) {
            return Err(Error::Invalid(format!(
                "question {i} of the batch has no candidates"
            )));
        }
        let words: Vec<&[usize]> = batch.iter().map(|q| q.words).collect();
        let hs = self.enc.encode_questions(f, &words)?;
        let cands: Vec<Vec<&CandidateFeatures>> =
            batch.iter().map(|q| q.candidates.clone()).collect();
        let mems = self.enc.build_memory(f, &cands, pad_to)?;

        let mut passes = Vec::with_capacity(batch.len());
        for ((input, h), mem) in batch.iter().zip(hs).zip(mems) {
            passes.push(self.reason(f, input, h, mem, flags)?);
        }
        if !flags.no_generalization {
            let rows: Vec<Var> = passes
                .iter()
                .map(|p| p.generalized.expect("generalization on").residual)
                .collect();
            let stacked = f.g.concat(&rows, 0)?;
            let normed = self.bn.forward(f, stacked)?;
            for (i, p) in passes.iter_mut().enumerate() {
                p.q_hat = f.g.narrow(normed, 0, i, 1)?;
            }
        }
        for p in &mut passes {
            let qt = f.g.transpose(p.q_hat)?;
            let s = f.g.matmul(p.mk_bar, qt)?;
            p.scores = f.g.reshape(s, &[1, p.memory.slots()])?;
        }
        Ok(passes)
    }

    fn reason(
        &self,
        f: &mut Forward<'_>,
        input: &QuestionInput<'_>,
        h: Var,
        memory: MemoryBlock,
        flags: AblationFlags,
    ) -> Result<QuestionPass> {
        let len = input.words.len();
        let (mut a_qq, mut q, mut m, mut kb_weights, mut a_qm_kb) = (None, None, None, None, None);
        let g = &mut f.g;
        let a_q = if flags.no_bidirectional_attn {
            g.constant(Tensor::full(&[1, len], 1.0 / len as f64))
        } else if flags.no_kb_aware_attn_use_self_attn {
            let ht = g.transpose(h)?;
            let s = g.matmul(h, ht)?;
            let aqq = g.softmax(s, 1)?;
            a_qq = Some(aqq);
            let mean = g.mean_reduce(aqq, 0)?;
            g.reshape(mean, &[1, len])?
        } else {
            let (qv, aqq) = reasoning::self_attend(g, h, &self.self_attn)?;
            let (mv, w) = reasoning::kb_summary(g, qv, &memory, &self.kb_attention)?;
            let (aqm, a) = reasoning::kb_aware_attention(g, h, mv)?;
            (a_qq, q, m, kb_weights, a_qm_kb) = (Some(aqq), Some(qv), Some(mv), Some(w), Some(aqm));
            a
        };
        let imp = reasoning::importance(g, h, &memory, flags.no_importance)?;
        let (enhanced, q_tilde, mk_bar) = if flags.no_enhancing {
            (None, g.matmul(a_q, h)?, imp.mk_tilde)
        } else {
            let e = reasoning::enhance(g, h, a_q, &imp, &memory.keep)?;
            (Some(e), e.q_tilde, e.mk_bar)
        };
        let generalized = if flags.no_generalization {
            None
        } else {
            Some(reasoning::generalize_pre_norm(
                g,
                q_tilde,
                mk_bar,
                imp.mv_tilde,
                &memory.keep,
                &self.gru_attention,
                &self.gru,
            )?)
        };
        let q_w = self.wh.lookup(g, &[input.wh])?;
        let classes: Vec<usize> = input.candidates.iter().map(|c| c.type_class).collect();
        let h_t2 = self.entity_type.lookup(g, &classes)?;
        Ok(QuestionPass {
            h_q: h,
            memory,
            a_qq,
            q,
            m,
            kb_weights,
            a_qm_kb,
            a_q,
            importance: imp,
            enhanced,
            q_tilde,
            mk_bar,
            generalized,
            q_hat: q_tilde,
            scores: q_tilde,
            q_w,
            h_t2,
        })
    }
}
