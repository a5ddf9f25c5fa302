//! Retrain the toy model with single components replaced and compare test
//! macro F1 against the full model.
//!
//! `cargo run --release --example ablation -- [seed] [flag ...]`
//! Without flags every single-flag variant is run.

use bamnet::config::TrainConfig;
use bamnet::model::AblationFlags;
use bamnet::pipeline::{ablation_table, ablation_variants, run_ablation, Dataset};
use bamnet::text::Stopwords;
use bamnet::toy::toy_world;

fn main() -> bamnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let variants = if args.len() > 1 {
        let mut v = vec![("full".to_string(), AblationFlags::none())];
        for name in &args[1..] {
            v.push((name.clone(), AblationFlags::single(name)?));
        }
        v
    } else {
        ablation_variants()
    };
    let world = toy_world(seed)?;
    let data = Dataset {
        train: world.train,
        dev: world.dev,
        test: world.test,
    };
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let rows = run_ablation(
        &world.kb,
        &Stopwords::english(),
        &data,
        &cfg,
        &variants,
        "test",
    )?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
