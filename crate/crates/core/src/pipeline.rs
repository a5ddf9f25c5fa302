//! File-level workflows shared by the command-line tool and the examples.
//!
//! A model directory holds:
//!
//! ```text
//! words.txt, types.txt      answer-model vocabularies
//! model.ckpt                best-dev answer model (configuration and flags in its header)
//! history.csv               answer-model training history
//! topic_words.txt           topic-predictor vocabulary
//! topic.ckpt                best-dev topic predictor
//! topic_history.csv         topic-predictor history (recall@1 in the dev_f1 column)
//! ```
//!
//! A data directory holds `train.jsonl`, `dev.jsonl` and `test.jsonl`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, forward_one, EvalQuestion, EvalReport, Prediction};
use crate::features::{Featurizer, Vocabs};
use crate::kb::KnowledgeBase;
use crate::model::{AblationFlags, BamNet, ABLATION_NAMES};
use crate::tensor::{Checkpoint, CheckpointHeader, ParamStore, Tensor};
use crate::text::{load_questions, QuestionRecord, Stopwords, Vocabulary};
use crate::topic::{
    fit_topic, predict_topics, with_predicted_topics, TopicConfig, TopicData, TopicFitReport,
    TopicPrediction, TopicPredictor,
};
use crate::training::{fit, FitOutputs, FitReport};

pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const TOPIC_FILE: &str = "topic.ckpt";
pub const TOPIC_WORDS_FILE: &str = "topic_words.txt";
pub const TOPIC_HISTORY_FILE: &str = "topic_history.csv";

/// Train, dev and test questions.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<QuestionRecord>,
    pub dev: Vec<QuestionRecord>,
    pub test: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            train: load_split(dir, "train")?,
            dev: load_split(dir, "dev")?,
            test: load_split(dir, "test")?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[QuestionRecord]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, dev or test)"
            ))),
        }
    }
}

/// `dir/<name>.jsonl`.
pub fn load_split(dir: &Path, name: &str) -> Result<Vec<QuestionRecord>> {
    let path = dir.join(format!("{name}.jsonl"));
    if !path.exists() {
        return Err(Error::Invalid(format!("missing {}", path.display())));
    }
    load_questions(&path)
}

/// Where evaluation takes each question's topic entity from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopicSource {
    Gold,
    Predictor,
}

impl FromStr for TopicSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(TopicSource::Gold),
            "predictor" => Ok(TopicSource::Predictor),
            other => Err(Error::Config(format!(
                "unknown topic source `{other}` (expected gold or predictor)"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TrainConfig,
    flags: AblationFlags,
}

fn checkpoint_path(dir: &Path, file: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing {}", path.display())));
    }
    Ok(path)
}

/// Answer model with everything needed to featurize questions for it.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub cfg: TrainConfig,
    pub flags: AblationFlags,
    pub vocabs: Vocabs,
    pub model: BamNet,
    pub store: ParamStore,
}

impl ModelBundle {
    /// Freshly initialized parameters, seeded by `cfg.seed`.
    pub fn new(
        kb: &KnowledgeBase,
        cfg: &TrainConfig,
        flags: AblationFlags,
        vocabs: Vocabs,
    ) -> Result<Self> {
        cfg.validate()?;
        flags.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let model = BamNet::new(
            &mut store,
            &cfg.model_config(vocabs.words.len(), kb.num_relations(), vocabs.types.len()),
        )?;
        Ok(ModelBundle {
            cfg: cfg.clone(),
            flags,
            vocabs,
            model,
            store,
        })
    }

    pub fn featurizer<'a>(&self, kb: &'a KnowledgeBase, sw: &'a Stopwords) -> Featurizer<'a> {
        Featurizer::new(kb, sw, self.cfg.h, self.flags.delex())
    }

    pub fn header(&self) -> CheckpointHeader {
        let meta = ModelMeta {
            config: self.cfg.clone(),
            flags: self.flags,
        };
        CheckpointHeader {
            d: self.cfg.d as u32,
            vocab_sizes: vec![
                self.vocabs.words.len() as u32,
                self.vocabs.types.len() as u32,
            ],
            meta: serde_json::to_string(&meta).expect("plain fields serialize"),
        }
    }

    /// Vocabularies and parameters (no optimizer state) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.vocabs.save(dir)?;
        Checkpoint::from_store(self.header(), &self.store, None).save(&dir.join(MODEL_FILE))
    }

    pub fn load(dir: &Path, kb: &KnowledgeBase) -> Result<Self> {
        let ck = Checkpoint::load(&checkpoint_path(dir, MODEL_FILE)?)?;
        let meta: ModelMeta = serde_json::from_str(&ck.header.meta)
            .map_err(|e| Error::Checkpoint(format!("bad model description: {e}")))?;
        let vocabs = Vocabs::load(dir)?;
        let mut bundle = ModelBundle::new(kb, &meta.config, meta.flags, vocabs)?;
        if ck.header.vocab_sizes != bundle.header().vocab_sizes {
            return Err(Error::Checkpoint(format!(
                "vocabulary sizes {:?} do not match the checkpoint's {:?}",
                bundle.header().vocab_sizes,
                ck.header.vocab_sizes
            )));
        }
        ck.load_into(&mut bundle.store)?;
        Ok(bundle)
    }

    /// Evaluation questions with topics from the gold mentions or from
    /// `topics`.
    pub fn eval_questions(
        &self,
        kb: &KnowledgeBase,
        sw: &Stopwords,
        questions: &[QuestionRecord],
        topics: Option<&TopicBundle>,
    ) -> Result<Vec<EvalQuestion>> {
        let fz = self.featurizer(kb, sw);
        match topics {
            None => fz.eval_questions(questions, &self.vocabs),
            Some(t) => {
                let preds = t.predict(kb, sw, questions)?;
                fz.eval_questions(&with_predicted_topics(questions, &preds)?, &self.vocabs)
            }
        }
    }
}

/// Answer-model vocabularies from the training questions.
pub fn build_vocabs(
    kb: &KnowledgeBase,
    sw: &Stopwords,
    train: &[QuestionRecord],
    cfg: &TrainConfig,
    flags: AblationFlags,
) -> Result<Vocabs> {
    Featurizer::new(kb, sw, cfg.h, flags.delex()).build_vocabs(train)
}

/// Train an answer model on `data.train` with model selection on
/// `data.dev`. With `dir`, vocabularies, the best checkpoint and the
/// history are written there as training proceeds.
pub fn train_model(
    kb: &KnowledgeBase,
    sw: &Stopwords,
    data: &Dataset,
    cfg: &TrainConfig,
    flags: AblationFlags,
    vocabs: Vocabs,
    dir: Option<&Path>,
) -> Result<(ModelBundle, FitReport)> {
    let mut bundle = ModelBundle::new(kb, cfg, flags, vocabs)?;
    let fz = bundle.featurizer(kb, sw);
    let train = fz.training_examples(&data.train, &bundle.vocabs)?;
    let dev = fz.eval_questions(&data.dev, &bundle.vocabs)?;
    let outputs = match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            bundle.vocabs.save(dir)?;
            FitOutputs {
                checkpoint: Some((dir.join(MODEL_FILE), bundle.header())),
                history: Some(dir.join(HISTORY_FILE)),
            }
        }
        None => FitOutputs::default(),
    };
    let report = fit(
        &bundle.model,
        &mut bundle.store,
        kb,
        &train,
        &dev,
        cfg,
        flags,
        &outputs,
    )?;
    Ok((bundle, report))
}

/// Answer each question and score the answers against the gold sets.
pub fn run_eval(
    bundle: &ModelBundle,
    kb: &KnowledgeBase,
    sw: &Stopwords,
    questions: &[QuestionRecord],
    topics: Option<&TopicBundle>,
    theta: f64,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if questions.is_empty() {
        return Err(Error::Invalid("no questions to evaluate".into()));
    }
    let qs = bundle.eval_questions(kb, sw, questions, topics)?;
    evaluate(&bundle.model, &bundle.store, kb, &qs, theta, bundle.flags)
}

/// Topic predictor with its vocabulary.
#[derive(Clone, Debug)]
pub struct TopicBundle {
    pub cfg: TrainConfig,
    pub words: Vocabulary,
    pub model: TopicPredictor,
    pub store: ParamStore,
}

impl TopicBundle {
    pub fn new(kb: &KnowledgeBase, cfg: &TrainConfig, words: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let model = TopicPredictor::new(
            &mut store,
            &TopicConfig::from_train(cfg, words.len(), kb.num_relations()),
        )?;
        Ok(TopicBundle {
            cfg: cfg.clone(),
            words,
            model,
            store,
        })
    }

    pub fn data<'a>(&self, kb: &'a KnowledgeBase, sw: &'a Stopwords) -> TopicData<'a> {
        TopicData::new(kb, sw, self.words.clone())
    }

    pub fn header(&self) -> CheckpointHeader {
        let meta = ModelMeta {
            config: self.cfg.clone(),
            flags: AblationFlags::none(),
        };
        CheckpointHeader {
            d: self.cfg.d as u32,
            vocab_sizes: vec![self.words.len() as u32],
            meta: serde_json::to_string(&meta).expect("plain fields serialize"),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.words.save(&dir.join(TOPIC_WORDS_FILE))?;
        Checkpoint::from_store(self.header(), &self.store, None).save(&dir.join(TOPIC_FILE))
    }

    pub fn load(dir: &Path, kb: &KnowledgeBase) -> Result<Self> {
        let ck = Checkpoint::load(&checkpoint_path(dir, TOPIC_FILE)?)?;
        let meta: ModelMeta = serde_json::from_str(&ck.header.meta)
            .map_err(|e| Error::Checkpoint(format!("bad model description: {e}")))?;
        let words = Vocabulary::load(&dir.join(TOPIC_WORDS_FILE))?;
        let mut bundle = TopicBundle::new(kb, &meta.config, words)?;
        ck.load_into(&mut bundle.store)?;
        Ok(bundle)
    }

    /// Ranked linker candidates for each question.
    pub fn predict(
        &self,
        kb: &KnowledgeBase,
        sw: &Stopwords,
        questions: &[QuestionRecord],
    ) -> Result<Vec<TopicPrediction>> {
        let data = self.data(kb, sw);
        let examples = data.examples(questions, self.cfg.topic_candidates)?;
        predict_topics(&self.model, &self.store, &data, &examples)
    }
}

/// Train the topic predictor on `data.train` with model selection on
/// `data.dev` recall@1.
pub fn train_topic(
    kb: &KnowledgeBase,
    sw: &Stopwords,
    data: &Dataset,
    cfg: &TrainConfig,
    dir: Option<&Path>,
) -> Result<(TopicBundle, TopicFitReport)> {
    let words = TopicData::build_vocab(kb, &data.train);
    let mut bundle = TopicBundle::new(kb, cfg, words)?;
    let td = bundle.data(kb, sw);
    let train = td.examples(&data.train, cfg.topic_candidates)?;
    let dev = td.examples(&data.dev, cfg.topic_candidates)?;
    let header = bundle.header();
    let ck_path = dir.map(|d| d.join(TOPIC_FILE));
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        bundle.words.save(&dir.join(TOPIC_WORDS_FILE))?;
    }
    let report = fit_topic(
        &bundle.model,
        &mut bundle.store,
        &td,
        &train,
        &dev,
        cfg,
        ck_path.as_deref().map(|p| (p, &header)),
    )?;
    if let Some(dir) = dir {
        report.history.save(&dir.join(TOPIC_HISTORY_FILE))?;
    }
    Ok((bundle, report))
}

/// One variant of an ablation study.
#[derive(Clone, Debug)]
pub struct AblationRow {
    /// `full` or the single active flag name.
    pub label: String,
    pub flags: AblationFlags,
    pub best_dev_f1: f64,
    pub report: EvalReport,
}

/// The full model followed by each single-flag variant, in report order.
pub fn ablation_variants() -> Vec<(String, AblationFlags)> {
    let mut out = vec![("full".to_string(), AblationFlags::none())];
    for name in ABLATION_NAMES {
        out.push((
            name.to_string(),
            AblationFlags::single(name).expect("known flag"),
        ));
    }
    out
}

/// Train each variant from scratch (same seed, vocabularies rebuilt for
/// its delexicalization) and evaluate it on `eval_split` with gold topics.
pub fn run_ablation(
    kb: &KnowledgeBase,
    sw: &Stopwords,
    data: &Dataset,
    cfg: &TrainConfig,
    variants: &[(String, AblationFlags)],
    eval_split: &str,
) -> Result<Vec<AblationRow>> {
    let questions = data.split(eval_split)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (label, flags) in variants {
        flags.validate()?;
        log::info!("ablation variant {label}");
        let vocabs = build_vocabs(kb, sw, &data.train, cfg, *flags)?;
        let (bundle, fit_report) = train_model(kb, sw, data, cfg, *flags, vocabs, None)?;
        let (report, _) = run_eval(&bundle, kb, sw, questions, None, cfg.theta)?;
        rows.push(AblationRow {
            label: label.clone(),
            flags: *flags,
            best_dev_f1: fit_report.best_dev_f1,
            report,
        });
    }
    Ok(rows)
}

/// Ablation table as CSV, preceded by `#` lines naming each replacement.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for r in rows {
        for name in r.flags.active() {
            out.push_str(&format!("# {name}: {}\n", AblationFlags::describe(name)));
        }
    }
    out.push_str("variant,macro_f1,dev_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4}\n",
            r.label, r.report.macro_f1, r.best_dev_f1
        ));
    }
    out
}

/// Aspect-level question attention of one question.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    /// Delexicalized question tokens, one per column.
    pub tokens: Vec<String>,
    /// Candidate entity ids, one per group of three rows.
    pub candidates: Vec<String>,
    /// `|A| × 3 × |Q|`, aspects in type, path, context order.
    pub aqm: Tensor,
    pub csv: String,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header of question tokens, then one row per (candidate, aspect),
/// candidate-major. Values use the shortest exact decimal form.
pub fn attention_csv(tokens: &[String], aqm: &Tensor) -> Result<String> {
    let s = aqm.shape();
    if s.len() != 3 || s[1] != 3 || s[2] != tokens.len() {
        return Err(Error::shape(
            "attention_csv",
            format!("{s:?} for {} tokens", tokens.len()),
        ));
    }
    let mut out = tokens
        .iter()
        .map(|t| csv_field(t))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in aqm.data().chunks(tokens.len()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Forward one question and export its candidate-by-aspect attention over
/// question words.
pub fn dump_attention(
    bundle: &ModelBundle,
    kb: &KnowledgeBase,
    sw: &Stopwords,
    question: &QuestionRecord,
    topics: Option<&TopicBundle>,
) -> Result<AttentionDump> {
    let qs = bundle.eval_questions(kb, sw, std::slice::from_ref(question), topics)?;
    let ex = qs
        .into_iter()
        .next()
        .and_then(|q| q.example)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "no topic entity with candidates for {:?}",
                question.text
            ))
        })?;
    let (f, pass) = forward_one(&bundle.model, &bundle.store, &ex, bundle.flags)?;
    let full = f.g.value(pass.importance.aqm);
    let (n, len) = (ex.candidates.len(), ex.words.len());
    let aqm = Tensor::new(vec![n, 3, len], full.data()[..n * 3 * len].to_vec())?;
    Ok(AttentionDump {
        csv: attention_csv(&ex.delex_tokens, &aqm)?,
        tokens: ex.delex_tokens,
        candidates: ex
            .candidates
            .iter()
            .map(|c| kb.entity(c.entity).id.clone())
            .collect(),
        aqm,
    })
}
