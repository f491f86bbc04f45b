use std::collections::BTreeMap;
use std::rc::Rc;

use super::{
    check_finite, collect_grads, evaluate_channels, steps_per_epoch, BatchCycle, EncodedCorpus, History, HistoryRecord,
    StepLosses, TrainConfig,
};
use crate::autograd::Tape;
use crate::data::{Corpus, LabelScheme, Vocab};
use crate::error::{Error, Result};
use crate::losses::{graph, LossConfig};
use crate::model::{EncoderWeights, LayeredModel};
use crate::optim::{AdamW, LinearSchedule};
use crate::util::{rng_for, Stream};

pub(crate) fn teacher_terminal_seed(seed: u64) -> u64 {
    seed.wrapping_mul(2)
}

/// Supervised training on the labeled source corpus, selecting the epoch
/// with the best source-dev F1 of the main channel.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher(
    base: &EncoderWeights,
    scheme: &LabelScheme,
    vocab: &Vocab,
    source_train: &Corpus,
    source_dev: &Corpus,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(LayeredModel, History)> {
    fit(base, scheme, vocab, source_train, source_dev, None, cfg, loss_cfg)
}

/// As [`train_teacher`], plus `weight * MMD^2` between the teacher's [CLS]
/// vectors on each source batch and on a paired unlabeled target batch.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher_with_language_mmd(
    base: &EncoderWeights,
    scheme: &LabelScheme,
    vocab: &Vocab,
    source_train: &Corpus,
    source_dev: &Corpus,
    target_train: &Corpus,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    weight: f64,
) -> Result<(LayeredModel, History)> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Config(format!(
            "MMD weight must be finite and non-negative, got {weight}"
        )));
    }
    let target = (weight > 0.0).then_some((target_train, weight));
    fit(base, scheme, vocab, source_train, source_dev, target, cfg, loss_cfg)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    base: &EncoderWeights,
    scheme: &LabelScheme,
    vocab: &Vocab,
    train: &Corpus,
    dev: &Corpus,
    target: Option<(&Corpus, f64)>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(LayeredModel, History)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if !train.labeled() {
        return Err(Error::Data(
            "teacher training needs a labeled source train corpus".into(),
        ));
    }
    if !dev.labeled() {
        return Err(Error::Data(
            "teacher selection needs a labeled source dev corpus".into(),
        ));
    }
    let mut model = LayeredModel::from_base(base, scheme, teacher_terminal_seed(cfg.seed))?;
    model.config.dropout = cfg.dropout;
    let main = model.main_channel();
    let all_channels = model.config.active_channels();
    let channels = if loss_cfg.use_aux_channels {
        all_channels.clone()
    } else {
        vec![main]
    };

    let train_e = EncodedCorpus::new(train, vocab, scheme, cfg.max_len)?;
    let dev_e = EncodedCorpus::new(dev, vocab, scheme, cfg.max_len)?;
    let mut paired = match target {
        Some((corpus, w)) => {
            let e = EncodedCorpus::new(corpus, vocab, scheme, cfg.max_len)?;
            let cycle = BatchCycle::new(e.len(), rng_for(cfg.seed, Stream::PairedOrder));
            Some((e, cycle, w, rng_for(cfg.seed, Stream::PairedDropout)))
        }
        None => None,
    };

    let mut order = BatchCycle::new(train_e.len(), rng_for(cfg.seed, Stream::TrainOrder));
    let mut dropout_rng = rng_for(cfg.seed, Stream::Dropout);
    let total_steps = cfg.epochs * steps_per_epoch(train_e.len(), cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.lr_teacher, total_steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(cfg.optimizer.clone())?;
    let mut history = History::default();
    let mut best: Option<(f64, crate::model::ParamMap)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = order.epoch(cfg.batch_size);
        let n_batches = batches.len();
        for idx in batches {
            let batch = train_e.batch(&idx);
            let mut tape = Tape::new();
            let bindings = model.bind(&mut tape, true);
            let fwd = model.forward(&mut tape, &bindings, &batch, Some(&mut dropout_rng))?;
            let rows = Rc::new(batch.valid_positions());
            let targets = Rc::new(batch.valid_labels().expect("labeled corpus"));
            let mut probs = BTreeMap::new();
            for &m in &channels {
                probs.insert(m, model.channel_probs(&mut tape, &bindings, &fwd, m, &rows)?);
            }
            let mixture = model.mixture_vars(&bindings);
            let terms = graph::teacher_objective(&mut tape, &probs, targets, main, &mixture, loss_cfg)?;
            let mut total = terms.total;
            let mut mmd_language = None;
            if let Some((tgt, cycle, w, rng)) = paired.as_mut() {
                let tb = tgt.batch(&cycle.take(idx.len()));
                let tf = model.forward(&mut tape, &bindings, &tb, Some(rng))?;
                let m = graph::mmd(&mut tape, fwd.cls, tf.cls, loss_cfg)?;
                mmd_language = Some(tape.scalar(m));
                total = tape.weighted_sum(vec![(terms.total, 1.0), (m, *w)]);
            }
            let loss = check_finite(&tape, total, "teacher loss")?;
            let mut grads = tape.backward(total);
            let lr = schedule.lr(step);
            let update = collect_grads(&model, &bindings, &mut grads);
            let grad_norm = opt.step(&mut model.params, update, lr)?;
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
                    mmd_model: None,
                    mmd_language,
                },
            });
            step += 1;
        }
        let dev_f1: BTreeMap<usize, f64> = evaluate_channels(&model, &dev_e, &all_channels, cfg.eval_batch_size)?
            .into_iter()
            .map(|(m, r)| (m, r.f1()))
            .collect();
        let f1 = dev_f1[&main];
        let best_so_far = best.as_ref().is_none_or(|(b, _)| f1 > *b);
        if best_so_far {
            best = Some((f1, model.params.clone()));
        }
        history.records.push(HistoryRecord::Epoch {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            dev_f1,
            mixture: model.mixture(),
            best_so_far,
        });
    }
    model.params = best.expect("at least one epoch").1;
    Ok((model, history))
}
