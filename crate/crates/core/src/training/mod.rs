//! Teacher training, soft-label generation and student distillation.

mod student;
mod teacher;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::data::{Corpus, EncodedBatch, EncodedSentence, LabelScheme, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{entity_f1, MetricsResult};
use crate::model::{argmax_rows, split_predictions, Bindings, LayeredModel};
use crate::optim::OptimizerConfig;

pub use student::{distill_single_channel, distill_student, generate_soft_labels, SoftLabelStore};
pub use teacher::{train_teacher, train_teacher_with_language_mmd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_teacher: f64,
    pub lr_student: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    /// Overrides the encoder's dropout rate while training.
    pub dropout: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub eval_batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_teacher: 5e-5,
            lr_student: 2e-5,
            batch_size: 32,
            epochs: 10,
            max_len: 128,
            dropout: 0.1,
            seed: 0,
            warmup_fraction: 0.1,
            eval_batch_size: 64,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_teacher > 0.0 && self.lr_student > 0.0) {
            return bad(format!(
                "learning rates must be positive (teacher {}, student {})",
                self.lr_teacher, self.lr_student
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if self.max_len < 3 {
            return bad(format!("max_len must be at least 3, got {}", self.max_len));
        }
        self.optimizer.validate()
    }
}

/// Per-step loss terms. For the teacher `objective` is the mixture loss;
/// for the student it is the distillation loss before the MMD terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub objective: f64,
    pub main: f64,
    pub aux: BTreeMap<usize, f64>,
    pub aux_weighted: Option<f64>,
    pub mmd_model: Option<f64>,
    pub mmd_language: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        grad_norm: f64,
        losses: StepLosses,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        /// Dev entity-F1 of every evaluated channel.
        dev_f1: BTreeMap<usize, f64>,
        mixture: BTreeMap<usize, f64>,
        best_so_far: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn steps(&self) -> impl Iterator<Item = (usize, &StepLosses)> {
        self.records.iter().filter_map(|r| match r {
            HistoryRecord::Step { step, losses, .. } => Some((*step, losses)),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records.iter().filter(|r| matches!(r, HistoryRecord::Epoch { .. }))
    }

    /// Total loss of every step, in order.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps().map(|(_, l)| l.total).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        crate::util::write_atomic(path, &buf)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(History { records })
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            writeln!(out).map_err(|e| Error::io("<history>", e))?;
        }
        Ok(())
    }
}

/// A corpus subtokenized once for repeated batching.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub sentences: Vec<EncodedSentence>,
    pub gold: Option<Vec<Vec<String>>>,
}

impl EncodedCorpus {
    pub fn new(corpus: &Corpus, vocab: &Vocab, scheme: &LabelScheme, max_len: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data(format!(
                "{} {} corpus is empty",
                corpus.language(),
                corpus.split()
            )));
        }
        let sentences = corpus
            .sentences()
            .iter()
            .map(|s| EncodedSentence::encode(s, vocab, scheme, max_len))
            .collect::<Result<_>>()?;
        Ok(EncodedCorpus {
            sentences,
            gold: corpus.gold(),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> EncodedBatch {
        let refs: Vec<&EncodedSentence> = indices.iter().map(|&i| &self.sentences[i]).collect();
        EncodedBatch::from_encoded(&refs)
    }

    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size)
            .map(<[usize]>::to_vec)
            .collect::<Vec<_>>()
            .into_iter()
    }
}

/// Endless stream of shuffled index batches; reshuffles after each pass.
pub(crate) struct BatchCycle {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycle {
    pub(crate) fn new(n: usize, rng: ChaCha8Rng) -> Self {
        BatchCycle {
            n,
            order: Vec::new(),
            pos: n,
            rng,
        }
    }

    /// One pass worth of batches.
    pub(crate) fn epoch(&mut self, size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(size).map(<[usize]>::to_vec).collect()
    }

    /// Next `k` indices, wrapping into a fresh shuffle as needed.
    pub(crate) fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.n {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Collects gradients of the model's trainable parameters that were reached.
pub(crate) fn collect_grads(
    model: &LayeredModel,
    bindings: &Bindings,
    grads: &mut Gradients,
) -> BTreeMap<String, ndarray::Array2<f64>> {
    model
        .trainable_names()
        .into_iter()
        .filter_map(|name| grads.take(bindings[&name]).map(|g| (name, g)))
        .collect()
}

pub(crate) fn check_finite(tape: &Tape, v: crate::autograd::Var, what: &str) -> Result<f64> {
    let x = tape.scalar(v);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} became {x}")))
    }
}

/// Entity-F1 of each requested channel on a labeled corpus.
pub fn evaluate_channels(
    model: &LayeredModel,
    data: &EncodedCorpus,
    channels: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<usize, MetricsResult>> {
    let gold = data
        .gold
        .as_ref()
        .ok_or_else(|| Error::Data("evaluation corpus is unlabeled".into()))?;
    let mut preds: BTreeMap<usize, Vec<Vec<String>>> = channels.iter().map(|&m| (m, Vec::new())).collect();
    for idx in data.chunks(batch_size) {
        let batch = data.batch(&idx);
        let (probs, _) = model.valid_channel_probs(&batch, channels)?;
        for (m, p) in probs {
            let tags = split_predictions(&batch, &argmax_rows(p.view()));
            preds.get_mut(&m).expect("requested channel").extend(
                tags.into_iter()
                    .map(|s| s.into_iter().map(|i| model.scheme.tag(i).to_string()).collect()),
            );
        }
    }
    preds.into_iter().map(|(m, p)| Ok((m, entity_f1(&p, gold)?))).collect()
}

/// Main-channel tag predictions for every sentence of `corpus`.
pub fn predict_corpus(
    model: &LayeredModel,
    vocab: &Vocab,
    corpus: &Corpus,
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<Vec<String>>> {
    let data = EncodedCorpus::new(corpus, vocab, &model.scheme, max_len)?;
    let mut out = Vec::with_capacity(data.len());
    for idx in data.chunks(batch_size) {
        out.extend(model.predict_tags(&data.batch(&idx))?);
    }
    Ok(out)
}

pub fn evaluate_corpus(
    model: &LayeredModel,
    vocab: &Vocab,
    corpus: &Corpus,
    max_len: usize,
    batch_size: usize,
) -> Result<MetricsResult> {
    let gold = corpus
        .gold()
        .ok_or_else(|| Error::Data("evaluation corpus is unlabeled".into()))?;
    entity_f1(&predict_corpus(model, vocab, corpus, max_len, batch_size)?, &gold)
}
