//! Candidate answers within two hops of a topic entity, with their type,
//! answer path and context aspects.
//!
//! `cargo run --release --example kb_candidates`

use bamnet::features::Featurizer;
use bamnet::kb::ohio_example;
use bamnet::text::{tokenize, DelexOptions, QuestionRecord, RawQuestion, Stopwords};

fn main() -> bamnet::Result<()> {
    let kb = ohio_example();
    let text = "who was the secretary of state of ohio in 2011?";
    let tokens = tokenize(text);
    let at = |w: &str| tokens.iter().position(|t| t == w).expect("token present");
    let raw: RawQuestion = serde_json::from_value(serde_json::json!({
        "question": text,
        "answers": ["m.husted"],
        "topic_mention": {"start": at("ohio"), "end": at("ohio") + 1, "entity_id": "m.ohio"},
        "constraints": [{"start": at("2011"), "end": at("2011") + 1, "kind": "date"}],
    }))?;
    let q = QuestionRecord::from_raw(raw)?;
    let sw = Stopwords::english();
    let fz = Featurizer::new(&kb, &sw, 2, DelexOptions::default());
    let topic = fz.gold_topic(&q)?;
    println!("question: {text}");
    println!(
        "topic: {} ({})\n",
        kb.entity(topic).name,
        kb.entity(topic).id
    );
    for c in fz.candidates(&q, topic)? {
        let e = kb.entity(c.entity);
        let context: Vec<String> = c.context_nodes.iter().map(|n| n.join(" ")).collect();
        println!("{:<12} {:<26}", e.id, e.name);
        println!("    type    {}", c.type_tokens.join(" "));
        println!("    path    {}", c.path_tokens.join(" "));
        println!("    context [{}]", context.join("; "));
    }
    Ok(())
}
