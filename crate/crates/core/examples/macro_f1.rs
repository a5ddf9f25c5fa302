//! Per-question set F1 and its macro average over a question list.
//!
//! `cargo run --release --example macro_f1`

use std::collections::BTreeSet;

use bamnet::eval::macro_f1;

fn set(items: &[&'static str]) -> BTreeSet<&'static str> {
    items.iter().copied().collect()
}

fn main() -> bamnet::Result<()> {
    let cases = [
        ("exact", set(&["m.husted"]), set(&["m.husted"])),
        (
            "one extra",
            set(&["m.husted", "m.kasich"]),
            set(&["m.husted"]),
        ),
        ("half the gold", set(&["m.a"]), set(&["m.a", "m.b"])),
        ("miss", set(&["m.kasich"]), set(&["m.husted"])),
        ("empty prediction", set(&[]), set(&["m.husted"])),
    ];
    let pred: Vec<_> = cases.iter().map(|c| c.1.clone()).collect();
    let gold: Vec<_> = cases.iter().map(|c| c.2.clone()).collect();
    let report = macro_f1(&pred, &gold)?;
    for (c, f) in cases.iter().zip(&report.per_question) {
        println!("{:<17} {:?} vs {:?}: F1 {f:.3}", c.0, c.1, c.2);
    }
    println!("macro F1 {:.4}", report.macro_f1);
    Ok(())
}
