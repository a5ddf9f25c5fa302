//! Seeded random instances.

use bamnet::features::CandidateFeatures;
use bamnet::kb::{KbBuilder, KnowledgeBase};
use bamnet::model::ModelConfig;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A KB whose entity `i` has id `e{i:03}` (so index `i`) and relation `r`
/// id `r{r:02}`, with the triple list it was built from.
pub struct RandomKb {
    pub kb: KnowledgeBase,
    pub n: usize,
    pub triples: Vec<(usize, usize, usize)>,
}

pub fn random_kb(rng: &mut ChaCha8Rng, n: usize, relations: usize, triples: usize) -> RandomKb {
    let mut b = KbBuilder::new();
    for i in 0..n {
        b.entity(&format!("e{i:03}"), &format!("entity {i}"), "thing", false)
            .expect("fresh id");
    }
    for r in 0..relations {
        b.relation(&format!("r{r:02}"), &format!("test.rel.r{r:02}"))
            .expect("fresh id");
    }
    let mut list = Vec::with_capacity(triples);
    for _ in 0..triples {
        let s = rng.gen_range(0..n);
        let mut o = rng.gen_range(0..n - 1);
        if o >= s {
            o += 1;
        }
        let r = rng.gen_range(0..relations);
        b.triple(
            &format!("e{s:03}"),
            &format!("r{r:02}"),
            &format!("e{o:03}"),
        );
        list.push((s, r, o));
    }
    let kb = b.build().expect("valid random KB");
    for i in 0..n {
        assert_eq!(kb.entity_ix(&format!("e{i:03}")), Some(i));
    }
    for r in 0..relations {
        assert_eq!(kb.relation_ix(&format!("r{r:02}")), Some(r));
    }
    RandomKb {
        kb,
        n,
        triples: list,
    }
}

/// Small dimensions for gradient and normalization checks.
pub fn tiny_config(d: usize) -> ModelConfig {
    ModelConfig {
        d,
        d_v: 5,
        d_p: 3,
        d_t: 2,
        n_words: 12,
        n_relations: 4,
        n_types: 3,
        dropout_embed: 0.0,
        dropout_question: 0.0,
        dropout_answer: 0.0,
    }
}

fn words(rng: &mut ChaCha8Rng, cfg: &ModelConfig, lo: usize, hi: usize) -> Vec<usize> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(2..cfg.n_words)).collect()
}

pub fn random_question(rng: &mut ChaCha8Rng, cfg: &ModelConfig, len: usize) -> Vec<usize> {
    words(rng, cfg, len, len)
}

pub fn random_candidate(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    entity: usize,
) -> CandidateFeatures {
    let hops = rng.gen_range(1..=2);
    let n_ctx = rng.gen_range(0..=2);
    CandidateFeatures {
        entity,
        type_words: words(rng, cfg, 1, 2),
        type_class: rng.gen_range(0..cfg.n_types),
        path_words: words(rng, cfg, 1, 4),
        path_relations: (0..hops)
            .map(|_| rng.gen_range(0..cfg.n_relations))
            .collect(),
        context: (0..n_ctx).map(|_| words(rng, cfg, 1, 3)).collect(),
    }
}

/// A keep mask of `n` slots with `real` leading real slots.
pub fn keep_mask(real: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| i < real).collect()
}

pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
