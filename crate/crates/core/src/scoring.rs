//! Dot-product answer scoring and thresholded answer-set inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores per memory slot; padded slots hold `-inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidates {
    pub scores: Vec<f64>,
    pub keep: Vec<bool>,
}

/// `scores[i] = q̂ · M̄_k[i]` for kept slots.
pub fn score_all(q_hat: &[f64], mk_bar: &Tensor, keep: &[bool]) -> Result<ScoredCandidates> {
    if mk_bar.rank() != 2 || mk_bar.cols() != q_hat.len() || mk_bar.rows() != keep.len() {
        return Err(Error::shape(
            "score_all",
            format!(
                "query {} vs memory {:?} with {} mask slots",
                q_hat.len(),
                mk_bar.shape(),
                keep.len()
            ),
        ));
    }
    let scores = (0..keep.len())
        .map(|i| {
            if keep[i] {
                mk_bar
                    .row_slice(i)
                    .iter()
                    .zip(q_hat)
                    .map(|(a, b)| a * b)
                    .sum()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(ScoredCandidates {
        scores,
        keep: keep.to_vec(),
    })
}

impl ScoredCandidates {
    pub fn unmasked(scores: Vec<f64>) -> Self {
        let keep = vec![true; scores.len()];
        ScoredCandidates { scores, keep }
    }

    /// Index of the highest kept score (lowest index on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in (0..self.scores.len()).filter(|&i| self.keep[i]) {
            if best.is_none_or(|b| self.scores[i] > self.scores[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// Slots whose score is within `theta` of the maximum (strictly), plus
/// every slot attaining the maximum. Ascending slot order.
pub fn infer_answers(scored: &ScoredCandidates, theta: f64) -> Result<Vec<usize>> {
    if theta.is_nan() || theta < 0.0 {
        return Err(Error::Invalid(format!(
            "threshold must be non-negative, got {theta}"
        )));
    }
    let best = scored
        .argmax()
        .ok_or_else(|| Error::Invalid("no unmasked candidate to answer from".into()))?;
    let max = scored.scores[best];
    Ok((0..scored.scores.len())
        .filter(|&i| scored.keep[i] && (max - scored.scores[i] < theta || scored.scores[i] == max))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_products() {
        let mk = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let s = score_all(&[0.0, 0.0], &mk, &[true; 3]).unwrap();
        assert_eq!(s.scores, vec![0.0; 3]);
        let s = score_all(&[0.0, 1.0], &mk, &[true, true, false]).unwrap();
        assert_eq!(s.scores[..2], [0.0, 1.0]);
        assert_eq!(s.scores[2], f64::NEG_INFINITY);
    }

    #[test]
    fn threshold_rule() {
        let s = ScoredCandidates::unmasked(vec![2.0, 1.5, 0.2]);
        assert_eq!(infer_answers(&s, 0.7).unwrap(), vec![0, 1]);
        let s = ScoredCandidates::unmasked(vec![1.0, 3.0, 3.0, 2.9999]);
        assert_eq!(infer_answers(&s, 1e-9).unwrap(), vec![1, 2]);
        assert_eq!(infer_answers(&s, 1e9).unwrap(), vec![0, 1, 2, 3]);
        let masked = ScoredCandidates {
            scores: vec![1.0, f64::NEG_INFINITY],
            keep: vec![true, false],
        };
        assert_eq!(infer_answers(&masked, 1e9).unwrap(), vec![0]);
        let none = ScoredCandidates {
            scores: vec![f64::NEG_INFINITY],
            keep: vec![false],
        };
        assert!(infer_answers(&none, 0.7).is_err());
        assert!(infer_answers(&ScoredCandidates::unmasked(vec![]), 0.7).is_err());
    }
}
