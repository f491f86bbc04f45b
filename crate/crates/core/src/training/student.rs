use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{concatenate, Array1, Array2, Axis};

use super::{
    check_finite, collect_grads, evaluate_channels, steps_per_epoch, BatchCycle, EncodedCorpus, History, HistoryRecord,
    StepLosses, TrainConfig,
};
use crate::autograd::Tape;
use crate::data::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::losses::{graph, LossConfig};
use crate::model::{EncoderWeights, LayeredModel, ParamMap};
use crate::optim::{AdamW, LinearSchedule};
use crate::util::{rng_for, Stream};

pub(crate) fn student_terminal_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2).wrapping_add(1)
}

/// Teacher output distributions for every target-train sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelStore {
    channels: Vec<usize>,
    /// Per sentence, per channel: `[surviving words x |C|]`.
    sentences: Vec<BTreeMap<usize, Array2<f64>>>,
}

impl SoftLabelStore {
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, sentence: usize, channel: usize) -> Option<&Array2<f64>> {
        self.sentences.get(sentence)?.get(&channel)
    }

    /// Rows of `channel` for `indices`, stacked in batch order.
    pub fn stacked(&self, indices: &[usize], channel: usize) -> Result<Array2<f64>> {
        let views = indices
            .iter()
            .map(|&i| {
                self.get(i, channel)
                    .map(Array2::view)
                    .ok_or_else(|| Error::Config(format!("no soft labels for sentence {i} channel {channel}")))
            })
            .collect::<Result<Vec<_>>>()?;
        concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Inference-mode channel distributions of `teacher` on every sentence of
/// `target_train`, for all of the teacher's active channels.
pub fn generate_soft_labels(
    teacher: &LayeredModel,
    vocab: &Vocab,
    target_train: &Corpus,
    cfg: &TrainConfig,
) -> Result<SoftLabelStore> {
    let data = EncodedCorpus::new(target_train, vocab, &teacher.scheme, cfg.max_len)?;
    soft_labels_for(teacher, &data, &teacher.config.active_channels(), cfg.eval_batch_size)
}

fn soft_labels_for(
    teacher: &LayeredModel,
    data: &EncodedCorpus,
    channels: &[usize],
    batch_size: usize,
) -> Result<SoftLabelStore> {
    let mut sentences = Vec::with_capacity(data.len());
    for idx in data.chunks(batch_size) {
        let batch = data.batch(&idx);
        let (probs, _) = teacher.valid_channel_probs(&batch, channels)?;
        let mut offset = 0;
        for firsts in &batch.first_subtoken_index {
            let n = firsts.len();
            sentences.push(
                probs
                    .iter()
                    .map(|(&m, p)| (m, p.slice(ndarray::s![offset..offset + n, ..]).to_owned()))
                    .collect(),
            );
            offset += n;
        }
    }
    Ok(SoftLabelStore {
        channels: channels.to_vec(),
        sentences,
    })
}

fn check_compatible(teacher: &LayeredModel, base: &EncoderWeights) -> Result<()> {
    let mut a = teacher.config.clone();
    let mut b = base.config.clone();
    a.dropout = 0.0;
    b.dropout = 0.0;
    if a != b {
        return Err(Error::Config(format!(
            "teacher encoder {:?} does not match student base {:?}",
            teacher.config, base.config
        )));
    }
    Ok(())
}

/// Teacher [CLS] vectors of source sentences, filled in as sentences are
/// first drawn. The teacher is fixed and runs without dropout, so each
/// sentence's vector never changes.
#[derive(Default)]
struct ClsCache {
    rows: HashMap<usize, Array1<f64>>,
}

impl ClsCache {
    fn rows(&mut self, teacher: &LayeredModel, data: &EncodedCorpus, indices: &[usize]) -> Result<Array2<f64>> {
        let mut missing: Vec<usize> = indices.iter().copied().filter(|i| !self.rows.contains_key(i)).collect();
        missing.sort_unstable();
        missing.dedup();
        if !missing.is_empty() {
            let cls = teacher
                .encode::<rand_chacha::ChaCha8Rng>(&data.batch(&missing), None)?
                .cls;
            for (i, row) in missing.into_iter().zip(cls.rows()) {
                self.rows.insert(i, row.to_owned());
            }
        }
        let views: Vec<_> = indices.iter().map(|i| self.rows[i].view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }
}

struct Selector {
    best: Option<(f64, ParamMap)>,
}

impl Selector {
    fn offer(&mut self, f1: f64, params: &ParamMap) -> bool {
        let better = self.best.as_ref().is_none_or(|(b, _)| f1 > *b);
        if better {
            self.best = Some((f1, params.clone()));
        }
        better
    }
}

/// Distills `teacher` into a student initialized from `base`, optionally
/// aligning [CLS] populations across models and languages with MMD on
/// paired source batches. Selects the epoch with the best target-dev F1.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    teacher: &LayeredModel,
    base: &EncoderWeights,
    vocab: &Vocab,
    store: &SoftLabelStore,
    target_train: &Corpus,
    source_train: &Corpus,
    target_dev: &Corpus,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(LayeredModel, History)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    check_compatible(teacher, base)?;
    let scheme = &teacher.scheme;
    let mut student = LayeredModel::from_base(base, scheme, student_terminal_seed(cfg.seed))?;
    student.config.dropout = cfg.dropout;
    let main = student.main_channel();
    let all_channels = student.config.active_channels();
    let channels = if loss_cfg.use_aux_channels {
        all_channels.clone()
    } else {
        vec![main]
    };
    if store.len() != target_train.len() {
        return Err(Error::Config(format!(
            "soft labels cover {} sentences, target train has {}",
            store.len(),
            target_train.len()
        )));
    }
    if let Some(m) = channels.iter().find(|m| !store.channels.contains(m)) {
        return Err(Error::Config(format!("soft labels lack channel {m}")));
    }

    let train_e = EncodedCorpus::new(&target_train.strip_labels(), vocab, scheme, cfg.max_len)?;
    let dev_e = EncodedCorpus::new(target_dev, vocab, scheme, cfg.max_len)?;
    if dev_e.gold.is_none() {
        return Err(Error::Data(
            "student selection needs a labeled target dev corpus".into(),
        ));
    }
    let mut source = if loss_cfg.uses_source_batches() {
        let e = EncodedCorpus::new(&source_train.strip_labels(), vocab, scheme, cfg.max_len)?;
        let cycle = BatchCycle::new(e.len(), rng_for(cfg.seed, Stream::PairedOrder));
        Some((e, cycle, rng_for(cfg.seed, Stream::PairedDropout)))
    } else {
        None
    };

    let mut teacher_cls = ClsCache::default();
    let mut order = BatchCycle::new(train_e.len(), rng_for(cfg.seed, Stream::TrainOrder));
    let mut dropout_rng = rng_for(cfg.seed, Stream::Dropout);
    let total_steps = cfg.epochs * steps_per_epoch(train_e.len(), cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.lr_student, total_steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(cfg.optimizer.clone())?;
    let mut history = History::default();
    let mut selector = Selector { best: None };
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = order.epoch(cfg.batch_size);
        let n_batches = batches.len();
        for idx in batches {
            let batch = train_e.batch(&idx);
            let mut tape = Tape::new();
            let bindings = student.bind(&mut tape, true);
            let fwd = student.forward(&mut tape, &bindings, &batch, Some(&mut dropout_rng))?;
            let rows = Rc::new(batch.valid_positions());
            let mut student_probs = BTreeMap::new();
            let mut teacher_probs = BTreeMap::new();
            for &m in &channels {
                student_probs.insert(m, student.channel_probs(&mut tape, &bindings, &fwd, m, &rows)?);
                teacher_probs.insert(m, Rc::new(store.stacked(&idx, m)?));
            }
            let mixture = student.mixture_vars(&bindings);
            let terms = graph::student_objective(&mut tape, &student_probs, &teacher_probs, main, &mixture, loss_cfg)?;

            let (mut mmd_model, mut mmd_language) = (None, None);
            if let Some((src, cycle, src_rng)) = source.as_mut() {
                let src_idx = cycle.take(idx.len());
                let sb = src.batch(&src_idx);
                let teacher_cls = tape.constant(teacher_cls.rows(teacher, src, &src_idx)?);
                if loss_cfg.use_mmd_model {
                    let sf = student.forward(&mut tape, &bindings, &sb, Some(src_rng))?;
                    mmd_model = Some(graph::mmd(&mut tape, teacher_cls, sf.cls, loss_cfg)?);
                }
                if loss_cfg.use_mmd_language {
                    mmd_language = Some(graph::mmd(&mut tape, teacher_cls, fwd.cls, loss_cfg)?);
                }
            }
            let total = graph::final_objective(&mut tape, terms.total, mmd_model, mmd_language, loss_cfg)?;
            let loss = check_finite(&tape, total, "student loss")?;
            let mut grads = tape.backward(total);
            let lr = schedule.lr(step);
            let update = collect_grads(&student, &bindings, &mut grads);
            let grad_norm = opt.step(&mut student.params, update, lr)?;
            loss_sum += loss;
            history.records.push(HistoryRecord::Step {
                step,
                epoch,
                lr,
                grad_norm,
                losses: StepLosses {
                    total: loss,
                    objective: tape.scalar(terms.total),
                    main: tape.scalar(terms.main),
                    aux: terms.aux.iter().map(|(&m, &v)| (m, tape.scalar(v))).collect(),
                    aux_weighted: terms.aux_weighted.map(|v| tape.scalar(v)),
                    mmd_model: mmd_model.map(|v| tape.scalar(v)),
                    mmd_language: mmd_language.map(|v| tape.scalar(v)),
                },
            });
            step += 1;
        }
        let dev_f1: BTreeMap<usize, f64> = evaluate_channels(&student, &dev_e, &all_channels, cfg.eval_batch_size)?
            .into_iter()
            .map(|(m, r)| (m, r.f1()))
            .collect();
        let best_so_far = selector.offer(dev_f1[&main], &student.params);
        history.records.push(HistoryRecord::Epoch {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            dev_f1,
            mixture: student.mixture(),
            best_so_far,
        });
    }
    student.params = selector.best.expect("at least one epoch").1;
    Ok((student, history))
}

/// Plain distillation from the teacher's main channel alone: the student
/// regresses the teacher's final-layer distributions on target text and
/// nothing else.
#[allow(clippy::too_many_arguments)]
pub fn distill_single_channel(
    teacher: &LayeredModel,
    base: &EncoderWeights,
    vocab: &Vocab,
    target_train: &Corpus,
    target_dev: &Corpus,
    cfg: &TrainConfig,
) -> Result<(LayeredModel, History)> {
    cfg.validate()?;
    check_compatible(teacher, base)?;
    let scheme = &teacher.scheme;
    let mut student = LayeredModel::from_base(base, scheme, student_terminal_seed(cfg.seed))?;
    student.config.dropout = cfg.dropout;
    let main = student.main_channel();

    let train_e = EncodedCorpus::new(&target_train.strip_labels(), vocab, scheme, cfg.max_len)?;
    let dev_e = EncodedCorpus::new(target_dev, vocab, scheme, cfg.max_len)?;
    let soft = soft_labels_for(teacher, &train_e, &[main], cfg.eval_batch_size)?;

    let mut order = BatchCycle::new(train_e.len(), rng_for(cfg.seed, Stream::TrainOrder));
    let mut dropout_rng = rng_for(cfg.seed, Stream::Dropout);
    let total_steps = cfg.epochs * steps_per_epoch(train_e.len(), cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.lr_student, total_steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(cfg.optimizer.clone())?;
    let mut history = History::default();
    let mut selector = Selector { best: None };
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = order.epoch(cfg.batch_size);
        let n_batches = batches.len();
        for idx in batches {
            let batch = train_e.batch(&idx);
            let mut tape = Tape::new();
            let bindings = student.bind(&mut tape, true);
            let fwd = student.forward(&mut tape, &bindings, &batch, Some(&mut dropout_rng))?;
            let rows = Rc::new(batch.valid_positions());
            let p = student.channel_probs(&mut tape, &bindings, &fwd, main, &rows)?;
            let loss_var = tape.mse(p, Rc::new(soft.stacked(&idx, main)?));
            let loss = check_finite(&tape, loss_var, "student loss")?;
            let mut grads = tape.backward(loss_var);
            let lr = schedule.lr(step);
            let update = collect_grads(&student, &bindings, &mut grads);
            let grad_norm = opt.step(&mut student.params, update, lr)?;
            loss_sum += loss;
            history.records.push(HistoryRecord::Step {
                step,
                epoch,
                lr,
                grad_norm,
                losses: StepLosses {
                    total: loss,
                    objective: loss,
                    main: loss,
                    aux: BTreeMap::new(),
                    aux_weighted: None,
                    mmd_model: None,
                    mmd_language: None,
                },
            });
            step += 1;
        }
        let dev_f1: BTreeMap<usize, f64> = evaluate_channels(&student, &dev_e, &[main], cfg.eval_batch_size)?
            .into_iter()
            .map(|(m, r)| (m, r.f1()))
            .collect();
        let best_so_far = selector.offer(dev_f1[&main], &student.params);
        history.records.push(HistoryRecord::Epoch {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            dev_f1,
            mixture: student.mixture(),
            best_so_far,
        });
    }
    student.params = selector.best.expect("at least one epoch").1;
    Ok((student, history))
}
