//! Scalar objectives: channel cross-entropy, the teacher and student mixture
//! losses, squared MMD between [CLS] populations, the final student loss and
//! the divergence statistics used by diagnostics.
//!
//! Functions here take plain arrays and return values. The [`graph`]
//! submodule builds the same objectives on an autodiff tape for training.

pub mod graph;
pub mod kernel;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
pub use kernel::{Bandwidths, KernelConfig, KernelKind};

/// Named ablation settings; each maps to one row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    NoDistillers,
    NoMmdLanguage,
    NoMmdModel,
    Baseline,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Full,
        Preset::NoDistillers,
        Preset::NoMmdLanguage,
        Preset::NoMmdModel,
        Preset::Baseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::NoDistillers => "no_distillers",
            Preset::NoMmdLanguage => "no_mmd_language",
            Preset::NoMmdModel => "no_mmd_model",
            Preset::Baseline => "baseline",
        }
    }

    /// `(use_aux_channels, use_mmd_model, use_mmd_language)`
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Preset::Full => (true, true, true),
            Preset::NoDistillers => (false, true, true),
            Preset::NoMmdLanguage => (true, true, false),
            Preset::NoMmdModel => (true, false, true),
            Preset::Baseline => (false, false, false),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the auxiliary channels in the teacher loss.
    pub alpha: f64,
    /// Weight of the auxiliary channels in the student distillation loss.
    pub beta: f64,
    /// Weight of the cross-model MMD term.
    pub alpha_prime: f64,
    /// Weight of the cross-language MMD term.
    pub beta_prime: f64,
    pub use_aux_channels: bool,
    pub use_mmd_model: bool,
    pub use_mmd_language: bool,
    pub kernel: KernelConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.05,
            beta: 0.05,
            alpha_prime: 0.001,
            beta_prime: 0.001,
            use_aux_channels: true,
            use_mmd_model: true,
            use_mmd_language: true,
            kernel: KernelConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        let (aux, model, language) = preset.flags();
        self.use_aux_channels = aux;
        self.use_mmd_model = model;
        self.use_mmd_language = language;
        self
    }

    pub fn preset(&self) -> Option<Preset> {
        let flags = (self.use_aux_channels, self.use_mmd_model, self.use_mmd_language);
        Preset::ALL.into_iter().find(|p| p.flags() == flags)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_prime", self.alpha_prime),
            ("beta_prime", self.beta_prime),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite, got {v}")));
            }
        }
        self.kernel.validate()
    }

    pub fn uses_source_batches(&self) -> bool {
        self.use_mmd_model || self.use_mmd_language
    }
}

/// Per-term values of a mixture objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureBreakdown {
    pub main: f64,
    /// Unweighted per-channel loss of each auxiliary channel.
    pub aux: BTreeMap<usize, f64>,
    /// `sum_m lambda_m * loss_m` (0 when auxiliary channels are disabled).
    pub aux_weighted: f64,
    pub total: f64,
}

fn check_labels(n_rows: usize, labels: &[i64]) -> Result<()> {
    if n_rows != labels.len() {
        return Err(Error::Shape(format!(
            "{n_rows} probability rows but {} labels",
            labels.len()
        )));
    }
    Ok(())
}

/// Mean `-ln p[y]` over positions whose label is not [`IGNORE_INDEX`].
/// Rows of `probs` are positions, columns are tags.
pub fn ce_channel_loss(probs: ArrayView2<f64>, labels: &[i64]) -> Result<f64> {
    check_labels(probs.nrows(), labels)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y == IGNORE_INDEX {
            continue;
        }
        let y = usize::try_from(y)
            .ok()
            .filter(|&y| y < probs.ncols())
            .ok_or_else(|| Error::Shape(format!("label {y} out of range")))?;
        sum -= row[y].max(crate::autograd::PROB_FLOOR).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no labeled positions in batch".into()));
    }
    Ok(sum / n as f64)
}

fn missing_channel(m: usize) -> Error {
    Error::Config(format!("no probabilities for channel {m}"))
}

/// `L_main + alpha * sum_m lambda_m * CE_m`; auxiliary channels are the keys
/// of `mixture`.
pub fn teacher_loss(
    channel_probs: &BTreeMap<usize, ndarray::Array2<f64>>,
    labels: &[i64],
    main_channel: usize,
    mixture: &BTreeMap<usize, f64>,
    cfg: &LossConfig,
) -> Result<MixtureBreakdown> {
    let main = ce_channel_loss(
        channel_probs
            .get(&main_channel)
            .ok_or_else(|| missing_channel(main_channel))?
            .view(),
        labels,
    )?;
    let mut aux = BTreeMap::new();
    let mut aux_weighted = 0.0;
    if cfg.use_aux_channels {
        for (&m, &lambda) in mixture {
            let p = channel_probs.get(&m).ok_or_else(|| missing_channel(m))?;
            let ce = ce_channel_loss(p.view(), labels)?;
            aux.insert(m, ce);
            aux_weighted += lambda * ce;
        }
    }
    let total = if cfg.use_aux_channels {
        main + cfg.alpha * aux_weighted
    } else {
        main
    };
    Ok(MixtureBreakdown {
        main,
        aux,
        aux_weighted,
        total,
    })
}

/// Mean over valid positions of the class-averaged squared difference.
pub fn kd_channel_loss(teacher: ArrayView2<f64>, student: ArrayView2<f64>, valid: &[bool]) -> Result<f64> {
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    check_labels(teacher.nrows(), &vec![0; valid.len()])?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((t, s), &ok) in teacher.rows().into_iter().zip(student.rows()).zip(valid) {
        if !ok {
            continue;
        }
        sum += t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("empty distillation mask".into()));
    }
    Ok(sum / n as f64)
}

/// `L_KD_main + beta * sum_m lambda'_m * L_KD_m`. `pairs` maps a channel to
/// (teacher, student) probabilities.
pub fn student_kd_loss(
    pairs: &BTreeMap<usize, (ndarray::Array2<f64>, ndarray::Array2<f64>)>,
    valid: &[bool],
    main_channel: usize,
    mixture: &BTreeMap<usize, f64>,
    cfg: &LossConfig,
) -> Result<MixtureBreakdown> {
    let kd = |m: usize| -> Result<f64> {
        let (t, s) = pairs.get(&m).ok_or_else(|| missing_channel(m))?;
        kd_channel_loss(t.view(), s.view(), valid)
    };
    let main = kd(main_channel)?;
    let mut aux = BTreeMap::new();
    let mut aux_weighted = 0.0;
    if cfg.use_aux_channels {
        for (&m, &lambda) in mixture {
            let v = kd(m)?;
            aux.insert(m, v);
            aux_weighted += lambda * v;
        }
    }
    let total = if cfg.use_aux_channels {
        main + cfg.beta * aux_weighted
    } else {
        main
    };
    Ok(MixtureBreakdown {
        main,
        aux,
        aux_weighted,
        total,
    })
}

/// Biased squared MMD between two row sets.
pub fn mmd_squared(s: ArrayView2<f64>, t: ArrayView2<f64>, kernel: &KernelConfig) -> Result<f64> {
    if s.nrows() == 0 || t.nrows() == 0 {
        return Err(Error::Degenerate("MMD needs non-empty samples".into()));
    }
    if s.ncols() != t.ncols() {
        return Err(Error::Shape(format!(
            "MMD samples have dimensions {} and {}",
            s.ncols(),
            t.ncols()
        )));
    }
    let sigmas = kernel.resolve(s, t)?;
    Ok(kernel::mmd_value(s, t, &sigmas))
}

/// MMD between teacher and student [CLS] vectors of one source batch.
pub fn mmd_cross_model(
    cls_teacher_src: ArrayView2<f64>,
    cls_student_src: ArrayView2<f64>,
    kernel: &KernelConfig,
) -> Result<f64> {
    mmd_squared(cls_teacher_src, cls_student_src, kernel)
}

/// MMD between teacher source [CLS] vectors and student target [CLS] vectors.
pub fn mmd_cross_language(
    cls_teacher_src: ArrayView2<f64>,
    cls_student_tgt: ArrayView2<f64>,
    kernel: &KernelConfig,
) -> Result<f64> {
    mmd_squared(cls_teacher_src, cls_student_tgt, kernel)
}

/// `L_stu + alpha' * MMD_M + beta' * MMD_L`, with disabled terms omitted.
/// An enabled term must be supplied.
pub fn final_student_loss(
    l_stu: f64,
    mmd_model: Option<f64>,
    mmd_language: Option<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut total = l_stu;
    if cfg.use_mmd_model {
        total += cfg.alpha_prime
            * mmd_model.ok_or_else(|| Error::Config("cross-model MMD enabled but not computed".into()))?;
    }
    if cfg.use_mmd_language {
        total += cfg.beta_prime
            * mmd_language.ok_or_else(|| Error::Config("cross-language MMD enabled but not computed".into()))?;
    }
    Ok(total)
}

pub const SYM_KL_EPS: f64 = 1e-8;

fn check_distribution(p: ArrayView1<f64>, name: &str) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Numeric(format!("{name} has invalid entry {bad}")));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `KL(P~||Q~) + KL(Q~||P~)` after adding `eps` to every entry and renormalizing.
pub fn sym_kl(p: ArrayView1<f64>, q: ArrayView1<f64>, eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let smooth = |x: ArrayView1<f64>| {
        let z = x.sum() + eps * x.len() as f64;
        x.mapv(|v| (v + eps) / z)
    };
    let (ps, qs) = (smooth(p), smooth(q));
    Ok(ps.iter().zip(&qs).map(|(&a, &b)| (a - b) * (a.ln() - b.ln())).sum())
}

pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn ce_examples() {
        let onehot = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(ce_channel_loss(onehot.view(), &[0, 2]).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 9), 1.0 / 9.0);
        approx(ce_channel_loss(uniform.view(), &[0, 4, 8]).unwrap(), 9f64.ln(), 1e-12);
        approx(ce_channel_loss(uniform.view(), &[0, 4, 8]).unwrap(), 2.1972, 1e-4);
        let p = array![[0.5, 0.5], [0.75, 0.25], [0.1, 0.9]];
        approx(ce_channel_loss(p.view(), &[0, 1, IGNORE_INDEX]).unwrap(), 1.0397, 1e-4);
    }

    #[test]
    fn ce_all_sentinel_is_degenerate() {
        let p = array![[0.5, 0.5]];
        assert!(matches!(
            ce_channel_loss(p.view(), &[IGNORE_INDEX]),
            Err(Error::Degenerate(_))
        ));
    }

    /// Probabilities whose gold-label cross-entropy is exactly `ce`.
    fn probs_with_ce(ce: f64) -> Array2<f64> {
        let p = (-ce).exp();
        array![[p, 1.0 - p]]
    }

    #[test]
    fn teacher_loss_example() {
        let mut probs = BTreeMap::new();
        probs.insert(4, probs_with_ce(0.3));
        probs.insert(2, probs_with_ce(1.0));
        probs.insert(3, probs_with_ce(2.0));
        let mixture = BTreeMap::from([(2, 2.0), (3, 0.5)]);
        let cfg = LossConfig {
            alpha: 0.1,
            ..LossConfig::default()
        };
        let b = teacher_loss(&probs, &[0], 4, &mixture, &cfg).unwrap();
        approx(b.total, 0.6, 1e-12);
        let zero = LossConfig {
            alpha: 0.0,
            ..cfg.clone()
        };
        approx(
            teacher_loss(&probs, &[0], 4, &mixture, &zero).unwrap().total,
            0.3,
            1e-12,
        );
        let off = cfg.clone().with_preset(Preset::Baseline);
        assert_eq!(teacher_loss(&probs, &[0], 4, &mixture, &off).unwrap().total, b.main);
        probs.remove(&3);
        assert!(matches!(
            teacher_loss(&probs, &[0], 4, &mixture, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kd_examples() {
        let t = array![[1.0, 0.0]];
        let s = array![[0.5, 0.5]];
        approx(kd_channel_loss(t.view(), s.view(), &[true]).unwrap(), 0.25, 1e-15);
        assert_eq!(kd_channel_loss(t.view(), t.view(), &[true]).unwrap(), 0.0);
        let t2 = array![[1.0, 0.0], [0.2, 0.8], [1.0, 0.0], [0.2, 0.8]];
        let s2 = array![[0.5, 0.5], [0.4, 0.6], [0.5, 0.5], [0.4, 0.6]];
        let v2 = kd_channel_loss(t2.view(), s2.view(), &[true; 4]).unwrap();
        let v1 = kd_channel_loss(
            t2.slice(ndarray::s![0..2, ..]),
            s2.slice(ndarray::s![0..2, ..]),
            &[true; 2],
        )
        .unwrap();
        approx(v1, v2, 1e-15);
        assert!(matches!(
            kd_channel_loss(t.view(), s.view(), &[false]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn student_kd_example() {
        // Per-channel MSE values 0.2, 0.1, 0.3 from single-token pairs.
        let pair = |v: f64| {
            let d = v.sqrt();
            (array![[0.5 + d, 0.5 - d]], array![[0.5, 0.5]])
        };
        let pairs = BTreeMap::from([(4, pair(0.2)), (2, pair(0.1)), (3, pair(0.3))]);
        let mixture = BTreeMap::from([(2, 1.0), (3, 1.0)]);
        let cfg = LossConfig {
            beta: 0.1,
            ..LossConfig::default()
        };
        let b = student_kd_loss(&pairs, &[true], 4, &mixture, &cfg).unwrap();
        approx(b.total, 0.24, 1e-12);
        let off = cfg.clone().with_preset(Preset::NoDistillers);
        approx(
            student_kd_loss(&pairs, &[true], 4, &mixture, &off).unwrap().total,
            0.2,
            1e-12,
        );
    }

    #[test]
    fn mmd_examples() {
        let s = array![[0.0]];
        let t = array![[1.0]];
        let k = KernelConfig::single(1.0);
        let expected = 2.0 - 2.0 * (-0.5f64).exp();
        approx(mmd_squared(s.view(), t.view(), &k).unwrap(), expected, 1e-12);
        approx(expected, 0.78694, 1e-5);
        let pts = array![[0.1, 0.2], [0.3, -1.0], [2.0, 0.5]];
        assert!(mmd_squared(pts.view(), pts.view(), &k).unwrap().abs() < 1e-9);
        assert!(
            mmd_squared(pts.view(), pts.view(), &KernelConfig::default())
                .unwrap()
                .abs()
                < 1e-9
        );
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            mmd_squared(empty.view(), pts.view(), &k),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(mmd_squared(s.view(), pts.view(), &k), Err(Error::Shape(_))));
        assert_eq!(
            mmd_cross_model(pts.view(), s.view().broadcast((3, 2)).unwrap(), &k).unwrap(),
            mmd_squared(pts.view(), s.view().broadcast((3, 2)).unwrap(), &k).unwrap()
        );
        assert_eq!(
            mmd_cross_language(pts.view(), pts.view(), &k).unwrap(),
            mmd_squared(pts.view(), pts.view(), &k).unwrap()
        );
    }

    #[test]
    fn final_loss_examples() {
        let cfg = LossConfig::default();
        approx(
            final_student_loss(0.5, Some(2.0), Some(3.0), &cfg).unwrap(),
            0.505,
            1e-15,
        );
        let off = cfg.clone().with_preset(Preset::Baseline);
        assert_eq!(final_student_loss(0.5, None, None, &off).unwrap(), 0.5);
        let no_l = cfg.clone().with_preset(Preset::NoMmdLanguage);
        approx(
            final_student_loss(0.5, Some(2.0), Some(3.0), &no_l).unwrap(),
            0.502,
            1e-15,
        );
        assert!(final_student_loss(0.5, None, Some(3.0), &cfg).is_err());
    }

    #[test]
    fn sym_kl_examples() {
        let p = array![0.8, 0.2];
        let q = array![0.2, 0.8];
        approx(sym_kl(p.view(), p.view(), SYM_KL_EPS).unwrap(), 0.0, 1e-15);
        approx(sym_kl(p.view(), q.view(), 0.0).unwrap(), 1.2 * 4f64.ln(), 1e-12);
        approx(sym_kl(p.view(), q.view(), SYM_KL_EPS).unwrap(), 1.6636, 1e-4);
        assert_eq!(
            sym_kl(p.view(), q.view(), 1e-8).unwrap(),
            sym_kl(q.view(), p.view(), 1e-8).unwrap()
        );
        let onehot = array![1.0, 0.0];
        assert!(sym_kl(onehot.view(), q.view(), SYM_KL_EPS).unwrap().is_finite());
        let neg = array![1.2, -0.2];
        assert!(sym_kl(neg.view(), q.view(), SYM_KL_EPS).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = array![1.0, 0.0];
        approx(cosine_sim(u.view(), u.view()).unwrap(), 1.0, 1e-15);
        approx(cosine_sim(u.view(), array![0.0, 3.0].view()).unwrap(), 0.0, 1e-15);
        approx(
            cosine_sim(u.view(), array![1.0, 1.0].view()).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-12,
        );
        assert!(matches!(
            cosine_sim(u.view(), array![0.0, 0.0].view()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn preset_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
            assert_eq!(LossConfig::default().with_preset(p).preset(), Some(p));
        }
    }
}
