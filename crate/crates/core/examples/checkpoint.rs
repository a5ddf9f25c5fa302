//! Save a trained model directory, load it back and check that the
//! reloaded model gives the same predictions.
//!
//! `cargo run --release --example checkpoint -- [dir]`

use bamnet::config::TrainConfig;
use bamnet::model::AblationFlags;
use bamnet::pipeline::{build_vocabs, run_eval, train_model, Dataset, ModelBundle};
use bamnet::text::Stopwords;
use bamnet::toy::toy_world;

fn main() -> bamnet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bamnet-checkpoint-example"));
    let world = toy_world(3)?;
    let data = Dataset {
        train: world.train,
        dev: world.dev,
        test: world.test,
    };
    let sw = Stopwords::english();
    let cfg = TrainConfig {
        seed: 3,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let flags = AblationFlags::none();
    let vocabs = build_vocabs(&world.kb, &sw, &data.train, &cfg, flags)?;
    let (trained, _) = train_model(&world.kb, &sw, &data, &cfg, flags, vocabs, Some(&dir))?;
    trained.save(&dir)?;
    let mut files: Vec<String> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    println!("{}: {}", dir.display(), files.join(", "));

    let loaded = ModelBundle::load(&dir, &world.kb)?;
    let (a, pa) = run_eval(&trained, &world.kb, &sw, &data.test, None, cfg.theta)?;
    let (b, pb) = run_eval(&loaded, &world.kb, &sw, &data.test, None, cfg.theta)?;
    println!(
        "test macro F1: trained {:.4}, reloaded {:.4}",
        a.macro_f1, b.macro_f1
    );
    let same_answers = pa.iter().zip(&pb).all(|(x, y)| x.answers == y.answers);
    let max_score_diff = pa
        .iter()
        .zip(&pb)
        .flat_map(|(x, y)| x.scores.iter().zip(&y.scores).map(|(s, t)| (s - t).abs()))
        .fold(0.0f64, f64::max);
    println!("identical answer sets: {same_answers}; max score difference {max_score_diff:.2e}");
    Ok(())
}
