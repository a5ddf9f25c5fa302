//! Margin ranking loss with intermediate supervision, memory sampling and
//! the epoch loop with plateau schedule and early stopping.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalQuestion};
use crate::features::Example;
use crate::kb::KnowledgeBase;
use crate::model::{AblationFlags, BamNet, QuestionInput, QuestionPass};
use crate::tensor::{
    apply_buffer_updates, AdamState, Checkpoint, CheckpointHeader, Forward, Graph, Mode,
    ParamStore, Var,
};

pub fn hinge(pos: f64, neg: f64) -> f64 {
    (1.0 + neg - pos).max(0.0)
}

fn check_partition(n: usize, pos: &[usize], neg: &[usize]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid(format!(
            "ranking loss needs positives and negatives, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    if let Some(i) = pos.iter().chain(neg).find(|&&i| i >= n) {
        return Err(Error::Invalid(format!(
            "candidate {i} out of range for {n} slots"
        )));
    }
    if pos.iter().any(|p| neg.contains(p)) {
        return Err(Error::Invalid(
            "positive and negative candidates overlap".into(),
        ));
    }
    Ok(())
}

/// Sum of hinge terms over every (positive, negative) pair of `scores`.
pub fn pairwise_loss(scores: &[f64], pos: &[usize], neg: &[usize]) -> Result<f64> {
    check_partition(scores.len(), pos, neg)?;
    Ok(pos
        .iter()
        .flat_map(|&p| neg.iter().map(move |&n| (p, n)))
        .map(|(p, n)| hinge(scores[p], scores[n]))
        .sum())
}

/// Differentiable pair sum for `scores = memory · queryᵀ` with `query` of
/// shape `1 × k` and `memory` of shape `n × k`.
pub fn pairwise_loss_g(
    g: &mut Graph<'_>,
    query: Var,
    memory: Var,
    pos: &[usize],
    neg: &[usize],
) -> Result<Var> {
    check_partition(g.shape(memory)[0], pos, neg)?;
    let qt = g.transpose(query)?;
    let scores = g.matmul(memory, qt)?;
    let p = g.index_select(scores, pos)?;
    let n = g.index_select(scores, neg)?;
    let n = g.reshape(n, &[1, neg.len()])?;
    let diff = g.sub(n, p)?;
    let margin = g.add_scalar(diff, 1.0)?;
    let h = g.relu(margin)?;
    g.sum_all(h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Word-attention summary against summed keys, enhanced query against
    /// enhanced memory, final query against enhanced memory, interrogative
    /// against entity type.
    pub terms: [f64; 4],
    pub total: f64,
}

pub struct QuestionLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// The four-term loss of one question. `pos` and `neg` index the
/// question's real memory slots. The type-matching term is dropped under
/// its ablation flag.
pub fn total_loss(
    g: &mut Graph<'_>,
    pass: &QuestionPass,
    pos: &[usize],
    neg: &[usize],
    flags: AblationFlags,
) -> Result<QuestionLoss> {
    check_partition(pass.memory.real(), pos, neg)?;
    let summary = g.matmul(pass.a_q, pass.h_q)?;
    let keys = g.sum_reduce(pass.memory.keys, 1)?;
    let mut vars = vec![
        pairwise_loss_g(g, summary, keys, pos, neg)?,
        pairwise_loss_g(g, pass.q_tilde, pass.mk_bar, pos, neg)?,
        pairwise_loss_g(g, pass.q_hat, pass.mk_bar, pos, neg)?,
    ];
    if !flags.no_joint_type_matching {
        vars.push(pairwise_loss_g(g, pass.q_w, pass.h_t2, pos, neg)?);
    }
    let mut breakdown = LossBreakdown::default();
    for (i, v) in vars.iter().enumerate() {
        breakdown.terms[i] = g.value(*v).data()[0];
    }
    breakdown.total = breakdown.terms.iter().sum();
    let mut total = vars[0];
    for v in &vars[1..] {
        total = g.add(total, *v)?;
    }
    Ok(QuestionLoss { total, breakdown })
}

/// Candidate slots for one training question, ascending. With room for
/// every positive, all positives are kept and negatives fill the rest;
/// otherwise up to half the memory goes to negatives and positives fill
/// the remainder.
pub fn sample_memory(pos: &[usize], neg: &[usize], n_max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out: Vec<usize> = if n_max > pos.len() {
        let k = (n_max - pos.len()).min(neg.len());
        pos.iter()
            .copied()
            .chain(neg.choose_multiple(rng, k).copied())
            .collect()
    } else {
        let k = (n_max / 2).min(neg.len());
        let negs: Vec<usize> = neg.choose_multiple(rng, k).copied().collect();
        let poss: Vec<usize> = pos.choose_multiple(rng, n_max - k).copied().collect();
        poss.into_iter().chain(negs).collect()
    };
    out.sort_unstable();
    out
}

/// Learning-rate reduction on plateau with early stopping. An epoch
/// improves when its dev score strictly beats the best so far.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience_lr: usize,
    pub patience_stop: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    /// Epochs since the best one.
    pub stagnant: usize,
    /// Stagnant epochs since the last improvement or reduction.
    pub since_reduce: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.lr,
            factor: cfg.lr_decay_factor,
            patience_lr: cfg.patience_lr,
            patience_stop: cfg.patience_stop,
            best: None,
            best_epoch: 0,
            stagnant: 0,
            since_reduce: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> ScheduleStep {
        let improved = self.best.is_none_or(|b| score > b);
        let mut reduced = false;
        if improved {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stagnant = 0;
            self.since_reduce = 0;
        } else {
            self.stagnant += 1;
            self.since_reduce += 1;
            if self.since_reduce >= self.patience_lr {
                self.lr /= self.factor;
                self.since_reduce = 0;
                reduced = true;
            }
        }
        ScheduleStep {
            improved,
            reduced,
            stop: self.stagnant >= self.patience_stop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History(pub Vec<EpochRecord>);

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,dev_f1\n");
        for r in &self.0 {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.dev_f1
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .skip(1)
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let err = |message: String| Error::Parse {
                file: "history".into(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(e.to_string()));
            out.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                dev_f1: num(f[3])?,
            });
        }
        Ok(History(out))
    }
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct FitOutputs {
    /// Best-dev checkpoint, rewritten on every improvement.
    pub checkpoint: Option<(PathBuf, CheckpointHeader)>,
    pub history: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub history: History,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub skipped_questions: usize,
}

/// Deterministic seed derivation.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const SAMPLE_STREAM: u64 = 2;
pub(crate) const DROPOUT_STREAM: u64 = 3;

/// Batches of `size`, with a trailing singleton folded into the previous
/// batch so batch normalization always sees two rows.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("two batches").end = last.end;
    }
    out
}

/// One optimizer step on `batch` (example indices into `data`); returns
/// the summed per-question loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &BamNet,
    store: &mut ParamStore,
    adam: &mut AdamState,
    data: &[&Example],
    batch: &[usize],
    cfg: &TrainConfig,
    flags: AblationFlags,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let slots: Vec<Vec<usize>> = batch
        .iter()
        .map(|&i| {
            let ex = data[i];
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed ^ SAMPLE_STREAM,
                epoch as u64,
                i as u64,
            ));
            sample_memory(&ex.positives(), &ex.negatives(), cfg.n_max, &mut rng)
        })
        .collect();
    let (loss_sum, grads, updates) = {
        let mut f = Forward::new(
            store,
            Mode::Train,
            mix_seed(cfg.seed ^ DROPOUT_STREAM, epoch as u64, step as u64),
        );
        let inputs: Vec<QuestionInput> = batch
            .iter()
            .zip(&slots)
            .map(|(&i, s)| QuestionInput {
                words: &data[i].words,
                wh: data[i].wh,
                candidates: s.iter().map(|&c| &data[i].candidates[c]).collect(),
            })
            .collect();
        let passes = model.forward(&mut f, &inputs, flags, None)?;
        let mut total: Option<Var> = None;
        let mut loss_sum = 0.0;
        for ((&i, s), pass) in batch.iter().zip(&slots).zip(&passes) {
            let gold = &data[i].gold;
            let pos: Vec<usize> = (0..s.len()).filter(|&k| gold[s[k]]).collect();
            let neg: Vec<usize> = (0..s.len()).filter(|&k| !gold[s[k]]).collect();
            let l = total_loss(&mut f.g, pass, &pos, &neg, flags)?;
            loss_sum += l.breakdown.total;
            total = Some(match total {
                Some(t) => f.g.add(t, l.total)?,
                None => l.total,
            });
        }
        let mean =
            f.g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
        let grads = f.g.backward(mean)?;
        (loss_sum, grads, f.take_buffer_updates())
    };
    store.zero_grad();
    grads.accumulate_into(store)?;
    adam.step(store)?;
    apply_buffer_updates(store, updates)?;
    Ok(loss_sum)
}

/// Train on `train` (gold-topic examples) with dev-set model selection.
/// Parameters end at the best-dev snapshot.
pub fn fit(
    model: &BamNet,
    store: &mut ParamStore,
    kb: &KnowledgeBase,
    train: &[Example],
    dev: &[EvalQuestion],
    cfg: &TrainConfig,
    flags: AblationFlags,
    outputs: &FitOutputs,
) -> Result<FitReport> {
    cfg.validate()?;
    flags.validate()?;
    let data: Vec<&Example> = train
        .iter()
        .filter(|e| !e.positives().is_empty() && !e.negatives().is_empty())
        .collect();
    let skipped = train.len() - data.len();
    if skipped > 0 {
        warn!("skipping {skipped} training questions without both gold and non-gold candidates");
    }
    if data.is_empty() {
        return Err(Error::Invalid("no usable training questions".into()));
    }
    if dev.is_empty() {
        return Err(Error::Invalid("empty dev set".into()));
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut history = History::default();
    let mut best = store.snapshot();
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr;
        adam.lr = lr;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed ^ SHUFFLE_STREAM,
            epoch as u64,
            0,
        )));
        let mut loss = 0.0;
        for (step, r) in batch_ranges(order.len(), cfg.batch).into_iter().enumerate() {
            loss += train_step(
                model, store, &mut adam, &data, &order[r], cfg, flags, epoch, step,
            )?;
        }
        let train_loss = loss / data.len() as f64;
        let (report, _) = evaluate(model, store, kb, dev, cfg.theta, flags)?;
        history.0.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            dev_f1: report.macro_f1,
        });
        let step = schedule.observe(epoch, report.macro_f1);
        info!(
            "epoch {epoch}: lr {lr:.2e} loss {train_loss:.5} dev F1 {:.4}",
            report.macro_f1
        );
        if step.improved {
            best = store.snapshot();
            if let Some((path, header)) = &outputs.checkpoint {
                Checkpoint::from_store(header.clone(), store, Some(&adam)).save(path)?;
            }
        }
        if let Some(path) = &outputs.history {
            history.save(path)?;
        }
        if step.reduced {
            info!(
                "dev F1 stagnant for {} epochs: lr -> {:.2e}",
                schedule.patience_lr, schedule.lr
            );
        }
        if step.stop {
            info!(
                "stopping: no dev improvement in {} epochs",
                schedule.patience_stop
            );
            break;
        }
    }
    store.restore(&best);
    Ok(FitReport {
        history,
        best_epoch: schedule.best_epoch,
        best_dev_f1: schedule.best.unwrap_or(0.0),
        skipped_questions: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_values() {
        assert_eq!(hinge(2.0, 0.5), 0.0);
        assert_eq!(hinge(1.0, 1.0), 1.0);
        assert_eq!(hinge(0.0, 0.5), 1.5);
    }

    #[test]
    fn pair_sums() {
        assert_eq!(pairwise_loss(&[2.5, 0.1, 0.3], &[0], &[1, 2]).unwrap(), 0.0);
        let s = [0.0, 0.1, 0.2, 0.3, 0.4];
        let v = pairwise_loss(&s, &[0, 1], &[2, 3, 4]).unwrap();
        assert!((v - (1.2 + 1.3 + 1.4 + 1.1 + 1.2 + 1.3)).abs() < 1e-12);
        assert!(pairwise_loss(&s, &[], &[1]).is_err());
        assert!(pairwise_loss(&s, &[1], &[1]).is_err());
    }

    #[test]
    fn graph_pair_sum_matches_plain() {
        let mut g = Graph::detached();
        let mem =
            crate::tensor::Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])
                .unwrap();
        let q = g.constant(crate::tensor::Tensor::row(&[0.3, -0.2]));
        let m = g.constant(mem);
        let v = pairwise_loss_g(&mut g, q, m, &[0], &[1, 2]).unwrap();
        let plain = pairwise_loss(&[0.3, -0.2, 0.1], &[0], &[1, 2]).unwrap();
        assert!((g.value(v).data()[0] - plain).abs() < 1e-12);
    }

    #[test]
    fn sampling_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..2).collect();
        let neg: Vec<usize> = (2..202).collect();
        let s = sample_memory(&pos, &neg, 96, &mut rng);
        assert_eq!(s.len(), 96);
        assert_eq!(s.iter().filter(|&&i| i < 2).count(), 2);
        let pos: Vec<usize> = (0..100).collect();
        let neg: Vec<usize> = (100..110).collect();
        let s = sample_memory(&pos, &neg, 96, &mut rng);
        assert_eq!(s.iter().filter(|&&i| i >= 100).count(), 10);
        assert_eq!(s.iter().filter(|&&i| i < 100).count(), 86);
    }

    #[test]
    fn schedule_rule() {
        let mut s = PlateauSchedule::new(&TrainConfig::default());
        let steps: Vec<_> = [0.2, 0.3, 0.3, 0.3, 0.3]
            .iter()
            .enumerate()
            .map(|(i, f)| s.observe(i + 1, *f))
            .collect();
        assert!(steps[..4].iter().all(|x| !x.reduced));
        assert!(steps[4].reduced);
        assert!((s.lr - 1e-4).abs() < 1e-18);
        assert_eq!(s.best_epoch, 2);
        let mut s = PlateauSchedule::new(&TrainConfig::default());
        s.observe(1, 0.5);
        let stops: Vec<bool> = (2..=11).map(|e| s.observe(e, 0.1).stop).collect();
        assert_eq!(stops.iter().filter(|x| **x).count(), 1);
        assert!(stops[9]);
    }

    #[test]
    fn batches_fold_trailing_singleton() {
        assert_eq!(batch_ranges(65, 32), vec![0..32, 32..65]);
        assert_eq!(batch_ranges(64, 32), vec![0..32, 32..64]);
        assert_eq!(batch_ranges(1, 32), vec![0..1]);
    }

    #[test]
    fn history_round_trip() {
        let h = History(vec![EpochRecord {
            epoch: 1,
            lr: 0.001,
            train_loss: 2.5,
            dev_f1: 0.25,
        }]);
        assert_eq!(History::parse(&h.to_csv()).unwrap(), h);
    }
}
