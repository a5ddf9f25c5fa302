//! Replace the topic mention by its type placeholder and constraint
//! mentions by their kind tokens, with each replacement switchable.
//!
//! `cargo run --release --example delexicalize`

use bamnet::text::{delexicalize, tokenize, ConstraintKind, DelexOptions, Span};

fn main() -> bamnet::Result<()> {
    let text = "who was the first governor of ohio after 2010?";
    let tokens = tokenize(text);
    let at = |w: &str| tokens.iter().position(|t| t == w).expect("token present");
    let topic = Span {
        start: at("ohio"),
        end: at("ohio") + 1,
    };
    let constraints = [
        (
            Span {
                start: at("first"),
                end: at("first") + 1,
            },
            ConstraintKind::Ordinal,
        ),
        (
            Span {
                start: at("2010"),
                end: at("2010") + 1,
            },
            ConstraintKind::Date,
        ),
    ];
    println!("tokens:          {}", tokens.join(" "));
    for (label, topic_on, constraints_on) in [
        ("both", true, true),
        ("topic only", true, false),
        ("constraints only", false, true),
    ] {
        let out = delexicalize(
            &tokens,
            Some((topic, "__location.us_state__")),
            &constraints,
            DelexOptions {
                topic: topic_on,
                constraints: constraints_on,
            },
        )?;
        println!("{label:<17}{}", out.join(" "));
    }
    Ok(())
}
