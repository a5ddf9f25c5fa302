//! Train the topic entity predictor on the toy world and report recall@1
//! of the top-ranked linker candidate on held-out questions.
//!
//! `cargo run --release --example topic_predictor -- [seed]`

use bamnet::config::TrainConfig;
use bamnet::tensor::ParamStore;
use bamnet::text::Stopwords;
use bamnet::topic::{
    fit_topic, predict_topics, recall_at_1, TopicConfig, TopicData, TopicPredictor,
};
use bamnet::toy::toy_world;

fn main() -> bamnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    for kv in std::env::args().skip(2) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bamnet::Error::Config(format!("expected key=value, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    let world = toy_world(seed)?;
    let stopwords = Stopwords::english();
    let vocab = TopicData::build_vocab(&world.kb, &world.train);
    let data = TopicData::new(&world.kb, &stopwords, vocab);
    let k = cfg.topic_candidates;
    let train = data.examples(&world.train, k)?;
    let dev = data.examples(&world.dev, k)?;
    let test = data.examples(&world.test, k)?;
    let linked = test.iter().filter(|e| e.gold_index().is_some()).count();
    println!(
        "linker keeps the gold topic for {linked}/{} test questions",
        test.len()
    );

    let mut store = ParamStore::new(seed);
    let model = TopicPredictor::new(
        &mut store,
        &TopicConfig::from_train(&cfg, data.words.len(), world.kb.num_relations()),
    )?;
    let report = fit_topic(&model, &mut store, &data, &train, &dev, &cfg, None)?;
    println!(
        "best dev recall@1 {:.3} at epoch {} of {}",
        report.best_recall,
        report.best_epoch,
        report.history.0.len()
    );
    println!(
        "train recall@1 {:.3}, test recall@1 {:.3}",
        recall_at_1(&model, &store, &data, &train)?,
        recall_at_1(&model, &store, &data, &test)?
    );
    for (p, ex) in predict_topics(&model, &store, &data, &test)?
        .iter()
        .zip(&test)
    {
        let gold = ex.gold.map(|g| world.kb.entity(g).id.as_str());
        if p.topic_entity.as_deref() != gold {
            println!(
                "miss: {} -> {:?} (gold {:?}, {} candidates)",
                p.question,
                p.topic_entity,
                gold,
                p.candidates.len()
            );
        }
    }
    Ok(())
}
