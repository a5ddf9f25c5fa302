//! Answer prediction and macro-F1 evaluation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Example;
use crate::kb::KnowledgeBase;
use crate::model::{AblationFlags, BamNet, QuestionInput, QuestionPass};
use crate::scoring::{infer_answers, ScoredCandidates};
use crate::tensor::{Forward, Mode, ParamStore};

/// A question ready for evaluation. `example` is absent when no topic
/// entity could be found or the topic has no candidates; such questions
/// score F1 0.
#[derive(Clone, Debug)]
pub struct EvalQuestion {
    pub text: String,
    pub example: Option<Example>,
    pub gold: BTreeSet<String>,
}

/// Predicted answers (entity ids, candidate order) and every candidate's
/// score, aligned with `candidates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question: String,
    pub answers: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub candidates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub questions: usize,
    pub skipped: usize,
    pub per_question: Vec<f64>,
}

/// Set F1; an empty prediction scores 0.
pub fn f1<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> f64 {
    let hit = predicted.intersection(gold).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / predicted.len() as f64;
    let r = hit / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-question F1. An empty question list scores 0.
pub fn macro_f1<T: Ord>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} questions",
            predicted.len(),
            gold.len()
        )));
    }
    let per_question: Vec<f64> = predicted.iter().zip(gold).map(|(p, g)| f1(p, g)).collect();
    let n = per_question.len();
    let macro_f1 = if n == 0 {
        0.0
    } else {
        per_question.iter().sum::<f64>() / n as f64
    };
    Ok(EvalReport {
        macro_f1,
        questions: n,
        skipped: 0,
        per_question,
    })
}

/// Eval-mode forward of one question over all of its candidates.
pub fn forward_one<'s>(
    model: &BamNet,
    store: &'s ParamStore,
    example: &Example,
    flags: AblationFlags,
) -> Result<(Forward<'s>, QuestionPass)> {
    let mut f = Forward::new(store, Mode::Eval, 0);
    let input = QuestionInput {
        words: &example.words,
        wh: example.wh,
        candidates: example.candidates.iter().collect(),
    };
    let pass = model.forward(&mut f, &[input], flags, None)?.remove(0);
    Ok((f, pass))
}

pub fn predict(
    model: &BamNet,
    store: &ParamStore,
    kb: &KnowledgeBase,
    question: &EvalQuestion,
    theta: f64,
    flags: AblationFlags,
) -> Result<Prediction> {
    let Some(ex) = &question.example else {
        return Ok(Prediction {
            question: question.text.clone(),
            answers: vec![],
            scores: vec![],
            candidates: vec![],
        });
    };
    let (f, pass) = forward_one(model, store, ex, flags)?;
    let scored = ScoredCandidates::unmasked(f.g.value(pass.scores).data().to_vec());
    let picked = infer_answers(&scored, theta)?;
    let candidates: Vec<String> = ex
        .candidates
        .iter()
        .map(|c| kb.entity(c.entity).id.clone())
        .collect();
    Ok(Prediction {
        question: question.text.clone(),
        answers: picked.into_iter().map(|i| candidates[i].clone()).collect(),
        scores: scored.scores,
        candidates,
    })
}

/// Predictions for every question, in input order.
pub fn predict_all(
    model: &BamNet,
    store: &ParamStore,
    kb: &KnowledgeBase,
    questions: &[EvalQuestion],
    theta: f64,
    flags: AblationFlags,
) -> Result<Vec<Prediction>> {
    questions
        .par_iter()
        .map(|q| predict(model, store, kb, q, theta, flags))
        .collect()
}

pub fn evaluate(
    model: &BamNet,
    store: &ParamStore,
    kb: &KnowledgeBase,
    questions: &[EvalQuestion],
    theta: f64,
    flags: AblationFlags,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_all(model, store, kb, questions, theta, flags)?;
    let sets: Vec<BTreeSet<String>> = preds
        .iter()
        .map(|p| p.answers.iter().cloned().collect())
        .collect();
    let gold: Vec<BTreeSet<String>> = questions.iter().map(|q| q.gold.clone()).collect();
    let mut report = macro_f1(&sets, &gold)?;
    report.skipped = questions.iter().filter(|q| q.example.is_none()).count();
    Ok((report, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn set_f1() {
        assert_eq!(f1(&set(&["a"]), &set(&["a"])), 1.0);
        assert_eq!(f1(&set(&["a", "b"]), &set(&["a"])), 2.0 / 3.0);
        assert_eq!(f1(&set(&["c"]), &set(&["a"])), 0.0);
        assert_eq!(f1(&set(&[]), &set(&["a"])), 0.0);
        assert_eq!(f1(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        let r = macro_f1(
            &[set(&["a"]), set(&["x"])],
            &[set(&["a"]), set(&["a", "b"])],
        )
        .unwrap();
        assert_eq!(r.macro_f1, 0.5);
        assert_eq!(r.per_question, vec![1.0, 0.0]);
        assert!(macro_f1(&[set(&["a"])], &[]).is_err());
    }
}
