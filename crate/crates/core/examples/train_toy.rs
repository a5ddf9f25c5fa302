//! Train on the synthetic toy world with gold topic entities and report
//! dev and test macro F1.
//!
//! `cargo run --release --example train_toy -- [seed] [key=value ...]`
//! where each `key=value` overrides a training configuration field.

use std::time::Instant;

use bamnet::config::TrainConfig;
use bamnet::eval::evaluate;
use bamnet::features::Featurizer;
use bamnet::model::{AblationFlags, BamNet};
use bamnet::tensor::ParamStore;
use bamnet::text::Stopwords;
use bamnet::toy::{toy_world, Category};
use bamnet::training::{fit, FitOutputs};

fn main() -> bamnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    for kv in args.iter().skip(1) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bamnet::Error::Config(format!("expected key=value, got `{kv}`")))?;
        cfg.set(k, v)?;
    }

    let world = toy_world(seed)?;
    let stopwords = Stopwords::english();
    let flags = AblationFlags::none();
    let fz = Featurizer::new(&world.kb, &stopwords, cfg.h, flags.delex());
    let vocabs = fz.build_vocabs(&world.train)?;
    let train = fz.training_examples(&world.train, &vocabs)?;
    let dev = fz.eval_questions(&world.dev, &vocabs)?;
    let test = fz.eval_questions(&world.test, &vocabs)?;
    let n_cands: usize = train.iter().map(|e| e.candidates.len()).sum();
    println!(
        "{} entities, {} words; {} training questions, {:.1} candidates each",
        world.kb.num_entities(),
        vocabs.words.len(),
        train.len(),
        n_cands as f64 / train.len() as f64
    );

    let mut store = ParamStore::new(seed);
    let model = BamNet::new(
        &mut store,
        &cfg.model_config(
            vocabs.words.len(),
            world.kb.num_relations(),
            vocabs.types.len(),
        ),
    )?;
    let start = Instant::now();
    let report = fit(
        &model,
        &mut store,
        &world.kb,
        &train,
        &dev,
        &cfg,
        flags,
        &FitOutputs::default(),
    )?;
    println!(
        "best dev F1 {:.4} at epoch {} after {} epochs in {:.1}s",
        report.best_dev_f1,
        report.best_epoch,
        report.history.0.len(),
        start.elapsed().as_secs_f64()
    );
    let train_eval = fz.eval_questions(&world.train, &vocabs)?;
    for (name, qs, cats) in [
        ("train", &train_eval, &world.train_categories),
        ("dev", &dev, &world.dev_categories),
        ("test", &test, &world.test_categories),
    ] {
        let (r, preds) = evaluate(&model, &store, &world.kb, qs, cfg.theta, flags)?;
        let mut line = format!("{name} macro F1 {:.4}", r.macro_f1);
        for c in [Category::Type, Category::Path, Category::Context] {
            let f: Vec<f64> = (0..qs.len())
                .filter(|&i| cats[i] == c)
                .map(|i| r.per_question[i])
                .collect();
            line.push_str(&format!(
                "  {c:?} {:.3}",
                f.iter().sum::<f64>() / f.len().max(1) as f64
            ));
        }
        println!("{line}");
        if std::env::var_os("TOY_VERBOSE").is_some() {
            for (i, p) in preds
                .iter()
                .enumerate()
                .filter(|(i, _)| r.per_question[*i] < 1.0)
            {
                println!(
                    "  miss: {} -> {:?} (gold {:?})",
                    p.question, p.answers, qs[i].gold
                );
            }
        }
    }
    Ok(())
}
