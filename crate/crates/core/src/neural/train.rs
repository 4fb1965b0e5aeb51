use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{LstmLm, LstmState};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::{csv_err, ppl, StateReset};
use crate::noise::{clean_pair, corrupt_for_input, corrupt_for_target, Channel, CorruptedPair, EditStats, TargetMode};
use crate::rng::rng_for;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_CORRUPT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum HalvingPolicy {
    /// Halve after every epoch that does not beat the best dev PPL.
    OnNoImprove,
    /// Halve once `k` consecutive epochs fail to beat the best dev PPL.
    Patience { k: usize },
}

/// Learning-rate schedule driven by development perplexity.
#[derive(Clone, Debug)]
pub struct LrController {
    pub lr: f64,
    initial: f64,
    policy: HalvingPolicy,
    floor_divisor: f64,
    best: f64,
    stale: usize,
}

impl LrController {
    pub fn new(initial: f64, policy: HalvingPolicy, floor_divisor: f64) -> Self {
        LrController {
            lr: initial,
            initial,
            policy,
            floor_divisor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a dev PPL before any training, without touching the rate.
    pub fn set_reference(&mut self, dev_ppl: f64) {
        self.best = dev_ppl;
    }

    /// Feeds the dev PPL after an epoch; returns true if the rate was halved.
    pub fn observe(&mut self, dev_ppl: f64) -> bool {
        if dev_ppl < self.best {
            self.best = dev_ppl;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        let fire = match self.policy {
            HalvingPolicy::OnNoImprove => true,
            HalvingPolicy::Patience { k } => self.stale >= k,
        };
        if fire {
            self.lr /= 2.0;
            self.stale = 0;
        }
        fire
    }

    pub fn exhausted(&self) -> bool {
        self.lr < self.initial / self.floor_divisor
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub initial_lr: f64,
    pub halving: HalvingPolicy,
    pub shuffle: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once the rate drops below `initial_lr / lr_floor_divisor`.
    #[serde(default = "default_floor")]
    pub lr_floor_divisor: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Use the model's label-smoothing weight in this stage.
    #[serde(default)]
    pub label_smoothing: bool,
    /// Gradient normalization; defaults to per sentence when pretraining
    /// and per token when finetuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<GradNorm>,
}

/// What the summed token-loss gradient of an update is divided by.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNorm {
    PerSentence,
    PerToken,
}

fn default_floor() -> f64 {
    1024.0
}

fn default_clip() -> f64 {
    5.0
}

impl TrainSchedule {
    /// Shuffled lines, batches of 32, rate 2.0.
    pub fn pretrain() -> Self {
        TrainSchedule {
            stage: Stage::Pretrain,
            initial_lr: 2.0,
            halving: HalvingPolicy::OnNoImprove,
            shuffle: true,
            batch_size: 32,
            max_epochs: 30,
            lr_floor_divisor: default_floor(),
            clip_norm: default_clip(),
            label_smoothing: true,
            grad_norm: None,
        }
    }

    /// Ordered text with state carried through sessions, rate 0.2.
    pub fn finetune() -> Self {
        TrainSchedule {
            stage: Stage::Finetune,
            initial_lr: 0.2,
            halving: HalvingPolicy::OnNoImprove,
            shuffle: false,
            batch_size: 1,
            max_epochs: 10,
            lr_floor_divisor: default_floor(),
            clip_norm: default_clip(),
            label_smoothing: false,
            grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lr_floor_divisor < 1.0 {
            return bad("lr_floor_divisor must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if let HalvingPolicy::Patience { k: 0 } = self.halving {
            return bad("patience must be positive");
        }
        Ok(())
    }

    pub fn effective_grad_norm(&self) -> GradNorm {
        self.grad_norm.unwrap_or(match self.stage {
            Stage::Pretrain => GradNorm::PerSentence,
            Stage::Finetune => GradNorm::PerToken,
        })
    }

    fn divisor(&self, tokens: usize, sentences: usize) -> f64 {
        let n = match self.effective_grad_norm() {
            GradNorm::PerSentence => sentences,
            GradNorm::PerToken => tokens,
        };
        n.max(1) as f64
    }

    pub fn reset(&self) -> StateReset {
        match self.stage {
            Stage::Pretrain => StateReset::PerSentence,
            Stage::Finetune => StateReset::PerSession,
        }
    }
}

/// Corruption applied to training pairs, resampled every epoch.
#[derive(Clone, Debug)]
pub enum Augmentation {
    Input(Channel),
    Target(Channel, TargetMode),
}

impl Augmentation {
    /// The pair training sees for sentence `idx` in `epoch` (1-based) when
    /// the stage runs with `seed`.
    pub fn corrupt(&self, s: &crate::corpus::Sentence, seed: u64, epoch: usize, idx: usize) -> CorruptedPair {
        let mut rng = rng_for(seed, &[STREAM_CORRUPT, epoch as u64, idx as u64]);
        match self {
            Augmentation::Input(ch) => corrupt_for_input(s, ch, &mut rng),
            Augmentation::Target(ch, mode) => corrupt_for_target(s, ch, &mut rng, *mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    /// Mean per-token training loss (smoothed when label smoothing is on).
    pub train_loss: f64,
    pub train_tokens: usize,
    /// Clean development perplexity after the epoch.
    pub dev_ppl: f64,
    pub halved: bool,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    /// Clean dev PPL of the model before the first epoch.
    pub initial_dev_ppl: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = the starting model).
    pub best_epoch: usize,
    pub best_dev_ppl: f64,
}

impl TrainLog {
    pub fn extend(&mut self, other: &TrainLog) {
        self.epochs.extend(other.epochs.iter().cloned());
        self.best_epoch = other.best_epoch;
        self.best_dev_ppl = other.best_dev_ppl;
    }

    /// Header plus one row per epoch.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.epochs {
            out.serialize(e).map_err(csv_err)?;
        }
        if self.epochs.is_empty() {
            out.write_record([
                "stage", "epoch", "lr", "train_loss", "train_tokens", "dev_ppl", "halved", "sub_rate", "del_rate",
                "ins_rate",
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn clip(grads: &mut super::model::Gradients, max_norm: f64) {
    let n = grads.norm();
    if n > max_norm {
        grads.scale(max_norm / n);
    }
}

/// Plain-SGD training of one stage. Returns the parameters with the best
/// clean dev perplexity seen (the starting model included) and the log.
pub fn train_stage(
    mut lm: LstmLm,
    train: &Corpus,
    dev: &Corpus,
    sched: &TrainSchedule,
    augmentation: Option<&Augmentation>,
    seed: u64,
) -> Result<(LstmLm, TrainLog)> {
    sched.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let reset = sched.reset();
    let eps = if sched.label_smoothing {
        lm.config().label_smoothing
    } else {
        0.0
    };
    let mut ctl = LrController::new(sched.initial_lr, sched.halving, sched.lr_floor_divisor);
    let initial = ppl(&lm, dev, reset).ppl;
    ctl.set_reference(initial);
    let mut log = TrainLog {
        initial_dev_ppl: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_ppl: initial,
    };
    let mut best = lm.params().to_vec();

    for epoch in 1..=sched.max_epochs {
        let lr = ctl.lr;
        let mut stats = EditStats::default();
        let make_pair = |idx: usize| match augmentation {
            Some(a) => a.corrupt(&train.sentences()[idx], seed, epoch, idx),
            None => clean_pair(&train.sentences()[idx]),
        };
        let (loss_sum, tokens) = match sched.stage {
            Stage::Pretrain => {
                let mut order: Vec<usize> = (0..train.len()).collect();
                if sched.shuffle {
                    order.shuffle(&mut rng_for(seed, &[STREAM_SHUFFLE, epoch as u64]));
                }
                let (mut loss_sum, mut tokens) = (0.0, 0);
                for (b, chunk) in order.chunks(sched.batch_size).enumerate() {
                    let batch: Vec<CorruptedPair> = chunk.iter().map(|&i| make_pair(i)).collect();
                    batch.iter().for_each(|p| stats.add(p));
                    let mut drng = rng_for(seed, &[STREAM_DROPOUT, epoch as u64, b as u64]);
                    let out = lm.loss_and_grads_with(&batch, eps, None, Some(&mut drng));
                    let mut g = out.grads;
                    g.scale(out.tokens as f64 / sched.divisor(out.tokens, batch.len()));
                    clip(&mut g, sched.clip_norm);
                    lm.apply(&g, lr);
                    loss_sum += out.loss_sum;
                    tokens += out.tokens;
                }
                (loss_sum, tokens)
            }
            Stage::Finetune => {
                let (mut loss_sum, mut tokens) = (0.0, 0);
                for range in train.session_ranges() {
                    let mut state: LstmState = LstmState::zeros(lm.config());
                    let idx: Vec<usize> = range.collect();
                    for chunk in idx.chunks(sched.batch_size) {
                        // Sentences of a chunk are processed as one stream.
                        let mut g_sum = lm.zero_grads();
                        let mut chunk_tokens = 0;
                        for &i in chunk {
                            let pair = make_pair(i);
                            stats.add(&pair);
                            let mut drng = rng_for(seed, &[STREAM_DROPOUT, epoch as u64, i as u64]);
                            let out = lm.loss_and_grads_with(
                                std::slice::from_ref(&pair),
                                eps,
                                Some(std::slice::from_ref(&state)),
                                Some(&mut drng),
                            );
                            let mut g = out.grads;
                            g.scale(out.tokens as f64);
                            g_sum.merge(&g);
                            chunk_tokens += out.tokens;
                            loss_sum += out.loss_sum;
                            state = out.final_states.into_iter().next().expect("one state per pair");
                        }
                        g_sum.scale(1.0 / sched.divisor(chunk_tokens, chunk.len()));
                        clip(&mut g_sum, sched.clip_norm);
                        lm.apply(&g_sum, lr);
                        tokens += chunk_tokens;
                    }
                }
                (loss_sum, tokens)
            }
        };
        let train_loss = if tokens == 0 {
            0.0
        } else {
            loss_sum / tokens as f64
        };
        if !train_loss.is_finite() || lm.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                log: Box::new(log),
            });
        }
        let dev_ppl = ppl(&lm, dev, reset).ppl;
        if !dev_ppl.is_finite() {
            return Err(Error::Diverged {
                epoch,
                log: Box::new(log),
            });
        }
        if dev_ppl < log.best_dev_ppl {
            log.best_dev_ppl = dev_ppl;
            log.best_epoch = epoch;
            best.copy_from_slice(lm.params());
        }
        let halved = ctl.observe(dev_ppl);
        log::info!(
            "{:?} epoch {epoch}: lr {lr:.4} loss {train_loss:.4} dev ppl {dev_ppl:.3}{}",
            sched.stage,
            if halved { " (halving)" } else { "" }
        );
        log.epochs.push(EpochLog {
            stage: sched.stage,
            epoch,
            lr,
            train_loss,
            train_tokens: tokens,
            dev_ppl,
            halved,
            sub_rate: stats.sub_rate(),
            del_rate: stats.del_rate(),
            ins_rate: stats.ins_rate(),
        });
        if ctl.exhausted() {
            break;
        }
    }
    lm.params_mut().copy_from_slice(&best);
    Ok((lm, log))
}
