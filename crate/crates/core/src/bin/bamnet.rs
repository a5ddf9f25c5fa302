//! Command-line front end. Failures print one JSON line
//! `{"error": <kind>, "message": <text>}` on stderr and exit with status 1.

use std::io::Write;
use std::path::{Path, PathBuf};

use bamnet::config::TrainConfig;
use bamnet::kb::{load_kb_dir, KnowledgeBase};
use bamnet::model::AblationFlags;
use bamnet::pipeline::{
    ablation_table, ablation_variants, build_vocabs, dump_attention, load_split, run_ablation,
    run_eval, train_model, train_topic, Dataset, ModelBundle, TopicBundle, TopicSource,
};
use bamnet::text::{QuestionRecord, RawQuestion, Stopwords};
use bamnet::toy::toy_world;
use bamnet::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bamnet",
    version,
    about = "Knowledge-base question answering with a bidirectional attentive memory network"
)]
struct Cli {
    /// Directory with entities.jsonl, triples.tsv and optionally relations.jsonl.
    #[arg(long, global = true)]
    kb_dir: Option<PathBuf>,
    /// Directory with train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Training configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model directory, read by evaluation commands and written by training.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Answer threshold; defaults to the configuration's.
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true, default_value = "gold")]
    topic_source: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    ablate: AblateArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, global = true)]
    ablate_no_bidirectional_attn: bool,
    #[arg(long, global = true)]
    ablate_no_kb_aware_attn_use_self_attn: bool,
    #[arg(long, global = true)]
    ablate_no_importance: bool,
    #[arg(long, global = true)]
    ablate_no_enhancing: bool,
    #[arg(long, global = true)]
    ablate_no_generalization: bool,
    #[arg(long, global = true)]
    ablate_no_joint_type_matching: bool,
    #[arg(long, global = true)]
    ablate_no_topic_delex: bool,
    #[arg(long, global = true)]
    ablate_no_constraint_delex: bool,
}

impl AblateArgs {
    fn flags(&self) -> Result<AblationFlags> {
        let f = AblationFlags {
            no_bidirectional_attn: self.ablate_no_bidirectional_attn,
            no_kb_aware_attn_use_self_attn: self.ablate_no_kb_aware_attn_use_self_attn,
            no_importance: self.ablate_no_importance,
            no_enhancing: self.ablate_no_enhancing,
            no_generalization: self.ablate_no_generalization,
            no_joint_type_matching: self.ablate_no_joint_type_matching,
            no_topic_delex: self.ablate_no_topic_delex,
            no_constraint_delex: self.ablate_no_constraint_delex,
        };
        f.validate()?;
        Ok(f)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build answer-model vocabularies from the training split into the model directory.
    BuildVocab,
    /// Train the answer model with gold topic entities.
    Train,
    /// Train the topic entity predictor.
    TrainTopic,
    /// Macro F1 of a trained model on one split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Answers as JSON lines {"question", "answers", "scores"}.
    Predict {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Topic entities as JSON lines {"question", "topic_entity", "score", "candidates"}.
    TopicPredict {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Candidate-by-aspect attention over question words as CSV.
    DumpAttention {
        /// Question text; looked up in the data splits for its topic mention,
        /// otherwise linked with the topic predictor.
        #[arg(long)]
        question: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and ablated variants, report test macro F1 per variant.
    /// With --ablate-* flags, only that variant is compared against the full model.
    Ablate {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the synthetic toy world (kb/ and question splits) to a directory.
    GenToy {
        #[arg(long)]
        out: PathBuf,
    },
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn emit(out: &Option<PathBuf>, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

impl Cli {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.theta {
            cfg.theta = t;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn kb(&self) -> Result<KnowledgeBase> {
        load_kb_dir(required(&self.kb_dir, "kb-dir")?)
    }

    fn topics(&self, kb: &KnowledgeBase) -> Result<Option<TopicBundle>> {
        match self.topic_source.parse()? {
            TopicSource::Gold => Ok(None),
            TopicSource::Predictor => Ok(Some(TopicBundle::load(
                required(&self.checkpoint, "checkpoint")?,
                kb,
            )?)),
        }
    }

    fn model(&self, kb: &KnowledgeBase) -> Result<ModelBundle> {
        ModelBundle::load(required(&self.checkpoint, "checkpoint")?, kb)
    }

    fn theta(&self, bundle: &ModelBundle) -> f64 {
        self.theta.unwrap_or(bundle.cfg.theta)
    }

    fn run(&self) -> Result<()> {
        let sw = Stopwords::english();
        match &self.command {
            Command::GenToy { out } => {
                let seed = self.seed.unwrap_or(1);
                toy_world(seed)?.write(out)?;
                println!("wrote toy world (seed {seed}) to {}", out.display());
            }
            Command::BuildVocab => {
                let kb = self.kb()?;
                let cfg = self.train_config()?;
                let train = load_split(required(&self.data, "data")?, "train")?;
                let vocabs = build_vocabs(&kb, &sw, &train, &cfg, self.ablate.flags()?)?;
                let dir = required(&self.checkpoint, "checkpoint")?;
                vocabs.save(dir)?;
                println!(
                    "{} words, {} types written to {}",
                    vocabs.words.len(),
                    vocabs.types.len(),
                    dir.display()
                );
            }
            Command::Train => {
                let kb = self.kb()?;
                let cfg = self.train_config()?;
                let flags = self.ablate.flags()?;
                let data = Dataset::load(required(&self.data, "data")?)?;
                let dir = required(&self.checkpoint, "checkpoint")?;
                let vocabs = if dir.join("words.txt").exists() {
                    bamnet::features::Vocabs::load(dir)?
                } else {
                    build_vocabs(&kb, &sw, &data.train, &cfg, flags)?
                };
                let (_, report) = train_model(&kb, &sw, &data, &cfg, flags, vocabs, Some(dir))?;
                println!(
                    "best dev macro F1 {:.4} at epoch {} of {}",
                    report.best_dev_f1,
                    report.best_epoch,
                    report.history.0.len()
                );
            }
            Command::TrainTopic => {
                let kb = self.kb()?;
                let cfg = self.train_config()?;
                let data = Dataset::load(required(&self.data, "data")?)?;
                let dir = required(&self.checkpoint, "checkpoint")?;
                let (_, report) = train_topic(&kb, &sw, &data, &cfg, Some(dir))?;
                println!(
                    "best dev recall@1 {:.4} at epoch {} of {}",
                    report.best_recall,
                    report.best_epoch,
                    report.history.0.len()
                );
            }
            Command::Eval { split } => {
                let kb = self.kb()?;
                let bundle = self.model(&kb)?;
                let topics = self.topics(&kb)?;
                let qs = load_split(required(&self.data, "data")?, split)?;
                let (report, _) =
                    run_eval(&bundle, &kb, &sw, &qs, topics.as_ref(), self.theta(&bundle))?;
                println!("{}", serde_json::to_string(&report)?);
            }
            Command::Predict { split, out } => {
                let kb = self.kb()?;
                let bundle = self.model(&kb)?;
                let topics = self.topics(&kb)?;
                let qs = load_split(required(&self.data, "data")?, split)?;
                let (_, preds) =
                    run_eval(&bundle, &kb, &sw, &qs, topics.as_ref(), self.theta(&bundle))?;
                let lines = preds
                    .iter()
                    .map(|p| serde_json::to_string(p).expect("serializable"));
                emit(out, lines)?;
            }
            Command::TopicPredict { split, out } => {
                let kb = self.kb()?;
                let topics = TopicBundle::load(required(&self.checkpoint, "checkpoint")?, &kb)?;
                let qs = load_split(required(&self.data, "data")?, split)?;
                let preds = topics.predict(&kb, &sw, &qs)?;
                let lines = preds
                    .iter()
                    .map(|p| serde_json::to_string(p).expect("serializable"));
                emit(out, lines)?;
            }
            Command::DumpAttention { question, out } => {
                let kb = self.kb()?;
                let bundle = self.model(&kb)?;
                let known = match &self.data {
                    Some(dir) => find_question(dir, question)?,
                    None => None,
                };
                let (record, topics) = match known {
                    Some(q) => (q, self.topics(&kb)?),
                    None => {
                        let dir = required(&self.checkpoint, "checkpoint")?;
                        let raw = RawQuestion {
                            question: question.clone(),
                            answers: vec![],
                            topic_mention: None,
                            constraints: vec![],
                        };
                        (
                            QuestionRecord::from_raw(raw)?,
                            Some(TopicBundle::load(dir, &kb)?),
                        )
                    }
                };
                let dump = dump_attention(&bundle, &kb, &sw, &record, topics.as_ref())?;
                match out {
                    Some(p) => std::fs::write(p, &dump.csv)?,
                    None => print!("{}", dump.csv),
                }
            }
            Command::Ablate { split } => {
                let kb = self.kb()?;
                let cfg = self.train_config()?;
                let data = Dataset::load(required(&self.data, "data")?)?;
                let flags = self.ablate.flags()?;
                let variants = if flags == AblationFlags::none() {
                    ablation_variants()
                } else {
                    vec![
                        ablation_variants().remove(0),
                        (flags.active().join("+"), flags),
                    ]
                };
                let rows = run_ablation(&kb, &sw, &data, &cfg, &variants, split)?;
                print!("{}", ablation_table(&rows));
            }
        }
        Ok(())
    }
}

/// The first question in any split whose text matches exactly.
fn find_question(dir: &Path, text: &str) -> Result<Option<QuestionRecord>> {
    for split in ["train", "dev", "test"] {
        if !dir.join(format!("{split}.jsonl")).exists() {
            continue;
        }
        if let Some(q) = load_split(dir, split)?.into_iter().find(|q| q.text == text) {
            return Ok(Some(q));
        }
    }
    Ok(None)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = cli.run() {
        let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
        eprintln!("{line}");
        std::process::exit(1);
    }
}
