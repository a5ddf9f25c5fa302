//! From questions and the KB to index-level model inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::EvalQuestion;
use crate::kb::{
    build_candidates, type_placeholder, CandidateAnswer, ContextQuery, EntityIx, KnowledgeBase,
};
use crate::text::{
    delexicalize, DelexOptions, QuestionRecord, Span, Stopwords, Vocabulary, NO_WH, UNK,
};

/// Word and entity-type vocabularies. Relations are indexed by the KB.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub words: Vocabulary,
    pub types: Vocabulary,
}

impl Vocabs {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.words.save(&dir.join("words.txt"))?;
        self.types.save(&dir.join("types.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Vocabs {
            words: Vocabulary::load(&dir.join("words.txt"))?,
            types: Vocabulary::load(&dir.join("types.txt"))?,
        })
    }
}

/// Index form of a [`CandidateAnswer`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CandidateFeatures {
    pub entity: EntityIx,
    pub type_words: Vec<usize>,
    pub type_class: usize,
    pub path_words: Vec<usize>,
    pub path_relations: Vec<usize>,
    pub context: Vec<Vec<usize>>,
}

/// A question ready for the model: delexicalized words, interrogative row,
/// every candidate within `h` hops, and gold membership per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub delex_tokens: Vec<String>,
    pub words: Vec<usize>,
    pub wh: usize,
    pub topic: EntityIx,
    pub candidates: Vec<CandidateFeatures>,
    pub gold: Vec<bool>,
}

impl Example {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.gold.len()).filter(|&i| self.gold[i]).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.gold.len()).filter(|&i| !self.gold[i]).collect()
    }
}

/// Question-dependent views built against one KB.
#[derive(Clone, Copy)]
pub struct Featurizer<'a> {
    pub kb: &'a KnowledgeBase,
    pub stopwords: &'a Stopwords,
    pub hops: usize,
    pub delex: DelexOptions,
}

impl<'a> Featurizer<'a> {
    pub fn new(
        kb: &'a KnowledgeBase,
        stopwords: &'a Stopwords,
        hops: usize,
        delex: DelexOptions,
    ) -> Self {
        Featurizer {
            kb,
            stopwords,
            hops,
            delex,
        }
    }

    /// Topic span for `q`: the gold mention when it names `topic`, else
    /// none.
    fn topic_span(&self, q: &QuestionRecord, topic: EntityIx) -> Option<Span> {
        q.topic
            .as_ref()
            .filter(|t| self.kb.entity_ix(&t.entity_id) == Some(topic))
            .map(|t| t.span())
    }

    pub fn delex_tokens(&self, q: &QuestionRecord, topic: EntityIx) -> Result<Vec<String>> {
        let placeholder = type_placeholder(&self.kb.entity(topic).type_label);
        let span = self.topic_span(q, topic);
        let cons: Vec<(Span, _)> = q.constraints.iter().map(|c| (c.span(), c.kind)).collect();
        delexicalize(
            &q.tokens,
            span.map(|s| (s, placeholder.as_str())),
            &cons,
            self.delex,
        )
    }

    /// Candidate answers with context matched against the question minus
    /// the topic mention.
    pub fn candidates(&self, q: &QuestionRecord, topic: EntityIx) -> Result<Vec<CandidateAnswer>> {
        let span = self.topic_span(q, topic);
        let kinds_all = q.constraint_kinds();
        let keep: Vec<usize> = (0..q.tokens.len())
            .filter(|&i| !span.is_some_and(|s| s.contains(i)))
            .collect();
        let tokens: Vec<String> = keep.iter().map(|&i| q.tokens[i].clone()).collect();
        let kinds: Vec<_> = keep.iter().map(|&i| kinds_all[i]).collect();
        let query = ContextQuery {
            tokens: &tokens,
            kinds: &kinds,
            stopwords: self.stopwords,
            delex_constraints: self.delex.constraints,
        };
        build_candidates(self.kb, topic, self.hops, &query)
    }

    /// Gold topic entity of `q`.
    pub fn gold_topic(&self, q: &QuestionRecord) -> Result<EntityIx> {
        let t = q.topic.as_ref().ok_or_else(|| {
            Error::Invalid(format!("question has no topic mention: {:?}", q.text))
        })?;
        self.kb.resolve(&t.entity_id)
    }

    pub fn example(&self, q: &QuestionRecord, topic: EntityIx, vocabs: &Vocabs) -> Result<Example> {
        let delex_tokens = self.delex_tokens(q, topic)?;
        if delex_tokens.is_empty() {
            return Err(Error::Invalid("empty question".into()));
        }
        let words = vocabs.words.encode(&delex_tokens);
        let cands = self.candidates(q, topic)?;
        let gold = cands
            .iter()
            .map(|c| q.gold_answers.contains(&self.kb.entity(c.entity).id))
            .collect();
        let candidates = cands
            .iter()
            .map(|c| self.candidate_features(c, vocabs))
            .collect();
        Ok(Example {
            wh: q.interrogative.unwrap_or(NO_WH),
            delex_tokens,
            words,
            topic,
            candidates,
            gold,
        })
    }

    pub fn candidate_features(&self, c: &CandidateAnswer, vocabs: &Vocabs) -> CandidateFeatures {
        let nonempty = |ids: Vec<usize>| if ids.is_empty() { vec![UNK] } else { ids };
        let label = &self.kb.entity(c.entity).type_label;
        CandidateFeatures {
            entity: c.entity,
            type_words: nonempty(vocabs.words.encode(&c.type_tokens)),
            type_class: vocabs.types.encode_token(label),
            path_words: nonempty(vocabs.words.encode(&c.path_tokens)),
            path_relations: c.path_relations.clone(),
            context: c
                .context_nodes
                .iter()
                .map(|n| nonempty(vocabs.words.encode(n)))
                .collect(),
        }
    }

    /// Gold-topic training examples; questions whose topic cannot be
    /// resolved are dropped with a warning.
    pub fn training_examples(
        &self,
        questions: &[QuestionRecord],
        vocabs: &Vocabs,
    ) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(questions.len());
        for q in questions {
            match self.gold_topic(q) {
                Ok(topic) => out.push(self.example(q, topic, vocabs)?),
                Err(e) => log::warn!("skipping training question {:?}: {e}", q.text),
            }
        }
        Ok(out)
    }

    /// Gold-topic evaluation questions. A question without a resolvable
    /// topic or without candidates keeps no example and scores 0.
    pub fn eval_questions(
        &self,
        questions: &[QuestionRecord],
        vocabs: &Vocabs,
    ) -> Result<Vec<EvalQuestion>> {
        questions
            .iter()
            .map(|q| {
                let example = match self.gold_topic(q) {
                    Ok(topic) => {
                        Some(self.example(q, topic, vocabs)?).filter(|e| !e.candidates.is_empty())
                    }
                    Err(_) => None,
                };
                Ok(EvalQuestion {
                    text: q.text.clone(),
                    example,
                    gold: q.gold_answers.clone(),
                })
            })
            .collect()
    }

    /// Vocabularies from the given questions (with their gold topics) and
    /// the KB neighborhoods they reach; entity types cover the whole KB.
    pub fn build_vocabs(&self, questions: &[QuestionRecord]) -> Result<Vocabs> {
        let mut words: Vec<String> = Vec::new();
        for q in questions {
            let topic = self.gold_topic(q)?;
            words.extend(self.delex_tokens(q, topic)?);
            for c in self.candidates(q, topic)? {
                words.extend(c.type_tokens);
                words.extend(c.path_tokens);
                words.extend(c.context_nodes.into_iter().flatten());
            }
        }
        let labels = self.kb.type_labels();
        Ok(Vocabs {
            words: Vocabulary::build(words.iter().map(String::as_str)),
            types: Vocabulary::build(labels.iter().map(String::as_str)),
        })
    }
}
