//! Train briefly on the toy world, then export the candidate-by-aspect
//! attention over question words for one test question as CSV.
//!
//! `cargo run --release --example attention_heatmap -- [question index] [out.csv]`

use bamnet::config::TrainConfig;
use bamnet::model::AblationFlags;
use bamnet::pipeline::{build_vocabs, dump_attention, train_model, Dataset};
use bamnet::text::Stopwords;
use bamnet::toy::toy_world;

fn main() -> bamnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let index: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next();
    let world = toy_world(1)?;
    let data = Dataset {
        train: world.train,
        dev: world.dev,
        test: world.test,
    };
    let sw = Stopwords::english();
    let cfg = TrainConfig {
        max_epochs: 15,
        ..TrainConfig::default()
    };
    let flags = AblationFlags::none();
    let vocabs = build_vocabs(&world.kb, &sw, &data.train, &cfg, flags)?;
    let (bundle, report) = train_model(&world.kb, &sw, &data, &cfg, flags, vocabs, None)?;
    println!(
        "trained {} epochs, best dev F1 {:.3}",
        report.history.0.len(),
        report.best_dev_f1
    );

    let question = data
        .test
        .get(index)
        .ok_or_else(|| bamnet::Error::Invalid(format!("no test question {index}")))?;
    let dump = dump_attention(&bundle, &world.kb, &sw, question, None)?;
    println!("{}", question.text);
    println!(
        "{} candidates x 3 aspects over {} words",
        dump.candidates.len(),
        dump.tokens.len()
    );
    let len = dump.tokens.len();
    let mut shown = 0;
    for (i, c) in dump.candidates.iter().enumerate() {
        if !question.gold_answers.contains(c) {
            continue;
        }
        shown += 1;
        println!("gold candidate {c}:");
        for (x, aspect) in ["type", "path", "context"].iter().enumerate() {
            let row = &dump.aqm.data()[(i * 3 + x) * len..(i * 3 + x + 1) * len];
            let cells: Vec<String> = dump
                .tokens
                .iter()
                .zip(row)
                .map(|(t, v)| format!("{t}:{v:+.2}"))
                .collect();
            println!("  {aspect:<8}{}", cells.join(" "));
        }
    }
    if shown == 0 {
        println!("(no gold answer among the candidates)");
    }
    if let Some(path) = out {
        std::fs::write(&path, &dump.csv)?;
        println!("wrote {path}");
    }
    Ok(())
}
