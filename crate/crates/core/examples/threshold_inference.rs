//! Answer sets from candidate scores: every candidate within the margin
//! θ of the best score is returned, so larger θ admits more answers.
//!
//! `cargo run --release --example threshold_inference`

use bamnet::scoring::{infer_answers, ScoredCandidates};

fn main() -> bamnet::Result<()> {
    let names = ["husted", "kasich", "columbus", "governor", "2011-01-09"];
    let scores = ScoredCandidates::unmasked(vec![4.1, 3.7, 1.2, 3.3, -0.5]);
    for (n, s) in names.iter().zip(&scores.scores) {
        println!("{n:<12} {s:>5.2}");
    }
    println!();
    for theta in [0.1, 0.5, 0.7, 1.0, 3.0, 5.0] {
        let answers: Vec<&str> = infer_answers(&scores, theta)?
            .into_iter()
            .map(|i| names[i])
            .collect();
        println!("theta {theta:<4} -> {answers:?}");
    }
    Ok(())
}
