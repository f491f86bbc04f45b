//! Training objectives built on an autodiff [`Tape`].
//!
//! Inputs are probability rows already gathered at valid positions. Disabled
//! terms are never added to the tape, so they contribute neither value nor
//! gradient.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;

use super::LossConfig;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MixtureTerms {
    pub main: Var,
    pub aux: BTreeMap<usize, Var>,
    /// `sum_m lambda_m * loss_m`, present when auxiliary channels are on.
    pub aux_weighted: Option<Var>,
    pub total: Var,
}

fn missing(m: usize) -> Error {
    Error::Config(format!("no probabilities for channel {m}"))
}

fn mixture_terms(
    tape: &mut Tape,
    main: Var,
    aux_losses: BTreeMap<usize, Var>,
    mixture: &BTreeMap<usize, Var>,
    weight: f64,
    enabled: bool,
) -> MixtureTerms {
    if !enabled || aux_losses.is_empty() {
        return MixtureTerms {
            main,
            aux: aux_losses,
            aux_weighted: None,
            total: main,
        };
    }
    let weighted: Vec<(Var, f64)> = aux_losses
        .iter()
        .map(|(m, &loss)| (tape.mul(mixture[m], loss), 1.0))
        .collect();
    let aux_weighted = tape.weighted_sum(weighted);
    let total = tape.weighted_sum(vec![(main, 1.0), (aux_weighted, weight)]);
    MixtureTerms {
        main,
        aux: aux_losses,
        aux_weighted: Some(aux_weighted),
        total,
    }
}

/// Teacher objective `L_main + alpha * sum_m lambda_m CE_m`.
pub fn teacher_objective(
    tape: &mut Tape,
    channel_probs: &BTreeMap<usize, Var>,
    targets: Rc<Vec<usize>>,
    main_channel: usize,
    mixture: &BTreeMap<usize, Var>,
    cfg: &LossConfig,
) -> Result<MixtureTerms> {
    if targets.is_empty() {
        return Err(Error::Degenerate("no labeled positions in batch".into()));
    }
    let main_p = *channel_probs.get(&main_channel).ok_or_else(|| missing(main_channel))?;
    let main = tape.nll(main_p, targets.clone());
    let mut aux = BTreeMap::new();
    if cfg.use_aux_channels {
        for &m in mixture.keys() {
            let p = *channel_probs.get(&m).ok_or_else(|| missing(m))?;
            aux.insert(m, tape.nll(p, targets.clone()));
        }
    }
    Ok(mixture_terms(tape, main, aux, mixture, cfg.alpha, cfg.use_aux_channels))
}

/// Student objective `L_KD_main + beta * sum_m lambda'_m L_KD_m` against
/// constant teacher probabilities.
pub fn student_objective(
    tape: &mut Tape,
    student_probs: &BTreeMap<usize, Var>,
    teacher_probs: &BTreeMap<usize, Rc<Array2<f64>>>,
    main_channel: usize,
    mixture: &BTreeMap<usize, Var>,
    cfg: &LossConfig,
) -> Result<MixtureTerms> {
    let kd = |tape: &mut Tape, m: usize| -> Result<Var> {
        let s = *student_probs.get(&m).ok_or_else(|| missing(m))?;
        let t = teacher_probs.get(&m).ok_or_else(|| missing(m))?.clone();
        if tape.value(s).nrows() == 0 {
            return Err(Error::Degenerate("empty distillation mask".into()));
        }
        Ok(tape.mse(s, t))
    };
    let main = kd(tape, main_channel)?;
    let mut aux = BTreeMap::new();
    if cfg.use_aux_channels {
        for &m in mixture.keys() {
            aux.insert(m, kd(tape, m)?);
        }
    }
    Ok(mixture_terms(tape, main, aux, mixture, cfg.beta, cfg.use_aux_channels))
}

/// `L_stu + alpha' * MMD_M + beta' * MMD_L`. Returns `l_stu` itself when
/// both MMD terms are disabled.
pub fn final_objective(
    tape: &mut Tape,
    l_stu: Var,
    mmd_model: Option<Var>,
    mmd_language: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut terms = vec![(l_stu, 1.0)];
    if cfg.use_mmd_model {
        let v = mmd_model.ok_or_else(|| Error::Config("cross-model MMD enabled but not computed".into()))?;
        terms.push((v, cfg.alpha_prime));
    }
    if cfg.use_mmd_language {
        let v = mmd_language.ok_or_else(|| Error::Config("cross-language MMD enabled but not computed".into()))?;
        terms.push((v, cfg.beta_prime));
    }
    if terms.len() == 1 {
        return Ok(l_stu);
    }
    Ok(tape.weighted_sum(terms))
}

/// Squared MMD between two row sets with bandwidths resolved from their
/// current values (bandwidths are treated as constants).
pub fn mmd(tape: &mut Tape, s: Var, t: Var, cfg: &LossConfig) -> Result<Var> {
    let (sv, tv) = (tape.value(s), tape.value(t));
    if sv.nrows() == 0 || tv.nrows() == 0 {
        return Err(Error::Degenerate("MMD needs non-empty samples".into()));
    }
    if sv.ncols() != tv.ncols() {
        return Err(Error::Shape(format!(
            "MMD samples have dimensions {} and {}",
            sv.ncols(),
            tv.ncols()
        )));
    }
    let sigmas = cfg.kernel.resolve(sv.view(), tv.view())?;
    Ok(tape.mmd(s, t, sigmas))
}
