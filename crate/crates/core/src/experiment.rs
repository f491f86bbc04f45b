//! Run configuration and the end-to-end pipeline shared by the command line
//! and the test suites: corpora and vocabulary preparation, the seeded base
//! encoder, teacher/student runs and the multi-seed ablation.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::translation_key;
use crate::data::{
    parse_conll, synth_cipher_corpora, write_conll, Corpus, CorpusSet, LabelScheme, Split, SynthSizes, Vocab,
};
use crate::diagnostics::{collect_cls, domain_report, DiagnosticsReport, Domain, DomainSample, LanguageTag, ModelTag};
use crate::error::{Error, Result};
use crate::evaluation::MetricsResult;
use crate::losses::{KernelConfig, LossConfig, Preset};
use crate::model::{EncoderConfig, EncoderWeights, LayeredModel};
use crate::optim::OptimizerConfig;
use crate::training::{
    distill_student, evaluate_corpus, generate_soft_labels, train_teacher, train_teacher_with_language_mmd, History,
    TrainConfig,
};
use crate::util::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `{language}.{split}.conll`; synthetic corpora are
    /// generated in memory when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub source_language: String,
    pub target_language: String,
    pub entity_types: Vec<String>,
    pub synth_seed: u64,
    pub sizes: SynthSizes,
    /// Byte-pair merges learned for the shared subtoken vocabulary.
    pub bpe_merges: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            source_language: crate::data::synth::SOURCE_LANGUAGE.into(),
            target_language: crate::data::synth::TARGET_LANGUAGE.into(),
            entity_types: LabelScheme::synthetic().entity_types().to_vec(),
            synth_seed: 0,
            sizes: SynthSizes::default(),
            bpe_merges: 400,
        }
    }
}

/// The shared starting encoder of teacher and student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub seed: u64,
    /// Correlation between the embeddings of a subtoken and its
    /// translation (synthetic language pair only; 0 disables).
    pub alignment: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            seed: 0,
            alignment: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub presets: Vec<Preset>,
    /// Also run the teacher-side language-MMD pipeline followed by plain
    /// distillation.
    pub language_mmd_teacher: bool,
    pub language_mmd_weight: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3, 4, 5],
            presets: Preset::ALL.to_vec(),
            language_mmd_teacher: true,
            language_mmd_weight: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub n_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { n_samples: 100 }
    }
}

/// Everything a command needs. Defaults describe the desk-scale synthetic
/// setup; `preset` decides the three ablation flags of `loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub base: BaseConfig,
    /// `vocab_size = 0` means "size of the trained vocabulary".
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub ablation: AblationConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Full,
            data: DataConfig::default(),
            base: BaseConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig {
                lr_teacher: 5e-3,
                lr_student: 5e-3,
                max_len: 64,
                warmup_fraction: 0.3,
                optimizer: OptimizerConfig {
                    mixture_lr_scale: 0.05,
                    ..Default::default()
                },
                ..Default::default()
            },
            loss: LossConfig::default(),
            ablation: AblationConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, filling anything it leaves out from
    /// [`RunConfig::default`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, over);
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies the preset to the loss flags and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.loss = self.loss.with_preset(self.preset);
        self.validate()?;
        Ok(self)
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.preset = preset;
        self.loss = self.loss.with_preset(preset);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        if self.loss.preset() != Some(self.preset) {
            return Err(Error::Config("loss flags disagree with the preset".into()));
        }
        if !(0.0..=1.0).contains(&self.base.alignment) {
            return Err(Error::Config(format!(
                "base.alignment must be in [0, 1], got {}",
                self.base.alignment
            )));
        }
        if self.diagnostics.n_samples < 2 {
            return Err(Error::Config("diagnostics.n_samples must be at least 2".into()));
        }
        if self.ablation.seeds.is_empty() || self.ablation.presets.is_empty() {
            return Err(Error::Config("ablation needs at least one seed and one preset".into()));
        }
        let w = self.ablation.language_mmd_weight;
        if w.is_nan() || w < 0.0 {
            return Err(Error::Config(
                "ablation.language_mmd_weight must be non-negative".into(),
            ));
        }
        LabelScheme::new(self.data.entity_types.iter().cloned())?;
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn scheme(&self) -> Result<LabelScheme> {
        LabelScheme::new(self.data.entity_types.iter().cloned())
    }
}

pub fn corpus_path(dir: &Path, language: &str, split: Split) -> PathBuf {
    dir.join(format!("{language}.{split}.conll"))
}

/// Writes both languages' splits as `{language}.{split}.conll`.
pub fn write_corpora(dir: &Path, sets: &[&CorpusSet]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for set in sets {
        for split in [Split::Train, Split::Dev, Split::Test] {
            let corpus = set.get(split);
            let path = corpus_path(dir, corpus.language(), split);
            write_conll(corpus, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Corpora, vocabulary and base encoder for one configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub scheme: LabelScheme,
    pub source: CorpusSet,
    pub target: CorpusSet,
    pub vocab: Vocab,
    pub base: EncoderWeights,
}

impl Workspace {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let (scheme, source, target) = load_corpora(cfg)?;
        let words = source
            .train
            .sentences()
            .iter()
            .chain(target.train.sentences())
            .flat_map(|s| s.tokens.iter().map(String::as_str));
        let vocab = Vocab::train_bpe(words, cfg.data.bpe_merges);
        Self::with_vocab(cfg, scheme, source, target, vocab)
    }

    /// Uses an existing vocabulary (e.g. from a teacher checkpoint).
    pub fn with_vocab(
        cfg: &RunConfig,
        scheme: LabelScheme,
        source: CorpusSet,
        target: CorpusSet,
        vocab: Vocab,
    ) -> Result<Self> {
        let base = build_base(cfg, &vocab)?;
        Ok(Workspace {
            scheme,
            source,
            target,
            vocab,
            base,
        })
    }

    pub fn evaluate(&self, model: &LayeredModel, corpus: &Corpus, cfg: &RunConfig) -> Result<MetricsResult> {
        evaluate_corpus(model, &self.vocab, corpus, cfg.train.max_len, cfg.train.eval_batch_size)
    }
}

pub fn load_corpora(cfg: &RunConfig) -> Result<(LabelScheme, CorpusSet, CorpusSet)> {
    let scheme = cfg.scheme()?;
    let d = &cfg.data;
    match &d.dir {
        None => {
            let (src, tgt) = synth_cipher_corpora(d.synth_seed, d.sizes, &scheme)?;
            Ok((scheme, src, tgt))
        }
        Some(dir) => {
            let load = |lang: &str| -> Result<CorpusSet> {
                let get = |split| parse_conll(corpus_path(dir, lang, split), &scheme, lang, split);
                Ok(CorpusSet {
                    train: get(Split::Train)?,
                    dev: get(Split::Dev)?,
                    test: get(Split::Test)?,
                })
            };
            let source = load(&d.source_language)?;
            let mut target = load(&d.target_language)?;
            target.train = target.train.strip_labels();
            Ok((scheme, source, target))
        }
    }
}

pub fn build_base(cfg: &RunConfig, vocab: &Vocab) -> Result<EncoderWeights> {
    let mut enc = cfg.encoder.clone();
    if enc.vocab_size == 0 {
        enc.vocab_size = vocab.len();
    } else if enc.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder.vocab_size is {} but the vocabulary has {} pieces",
            enc.vocab_size,
            vocab.len()
        )));
    }
    enc.dropout = cfg.train.dropout;
    let base = EncoderWeights::random(&enc, cfg.base.seed)?;
    if cfg.base.alignment == 0.0 {
        return Ok(base);
    }
    let keys: Vec<String> = (0..vocab.len() as u32)
        .map(|i| translation_key(vocab.piece(i)))
        .collect();
    base.align_tokens(&keys, cfg.base.alignment, cfg.base.seed)
}

pub fn run_teacher(ws: &Workspace, cfg: &RunConfig) -> Result<(LayeredModel, History)> {
    train_teacher(
        &ws.base,
        &ws.scheme,
        &ws.vocab,
        &ws.source.train,
        &ws.source.dev,
        &cfg.train,
        &cfg.loss,
    )
}

pub fn run_language_mmd_teacher(ws: &Workspace, cfg: &RunConfig, weight: f64) -> Result<(LayeredModel, History)> {
    train_teacher_with_language_mmd(
        &ws.base,
        &ws.scheme,
        &ws.vocab,
        &ws.source.train,
        &ws.source.dev,
        &ws.target.train,
        &cfg.train,
        &cfg.loss,
        weight,
    )
}

pub fn run_student(ws: &Workspace, cfg: &RunConfig, teacher: &LayeredModel) -> Result<(LayeredModel, History)> {
    let store = generate_soft_labels(teacher, &ws.vocab, &ws.target.train, &cfg.train)?;
    distill_student(
        teacher,
        &ws.base,
        &ws.vocab,
        &store,
        &ws.target.train,
        &ws.source.train,
        &ws.target.dev,
        &cfg.train,
        &cfg.loss,
    )
}

/// [CLS] samples of the four domains, drawn from the source and target test
/// splits with the diagnostics kernel at fixed widths.
pub fn diagnose(
    ws: &Workspace,
    cfg: &RunConfig,
    teacher: &LayeredModel,
    student: &LayeredModel,
) -> Result<(DiagnosticsReport, Vec<DomainSample>)> {
    let mut samples = Vec::new();
    for d in Domain::ALL {
        let model = match d.model {
            ModelTag::Teacher => teacher,
            ModelTag::Student => student,
        };
        let corpus = match d.language {
            LanguageTag::Source => &ws.source.test,
            LanguageTag::Target => &ws.target.test,
        };
        samples.push(collect_cls(
            model,
            &ws.vocab,
            corpus,
            d,
            cfg.diagnostics.n_samples,
            cfg.train.seed,
            cfg.train.max_len,
            cfg.train.eval_batch_size,
        )?);
    }
    let kernel = KernelConfig::fixed_for_dim(teacher.config.hidden_dim);
    Ok((domain_report(&samples, &kernel)?, samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// A preset name, or `language_mmd_teacher`.
    pub variant: String,
    pub seed: u64,
    pub target_test_f1: f64,
    pub teacher_target_test_f1: f64,
    pub mmd_tea_src_stu_src: f64,
    pub mmd_tea_src_stu_tgt: f64,
}

pub const LANGUAGE_MMD_VARIANT: &str = "language_mmd_teacher";

fn outcome(
    ws: &Workspace,
    cfg: &RunConfig,
    variant: &str,
    teacher: &LayeredModel,
    teacher_f1: f64,
    student: &LayeredModel,
) -> Result<RunOutcome> {
    let (report, _) = diagnose(ws, cfg, teacher, student)?;
    let [tea_src, _, stu_src, stu_tgt] = Domain::ALL;
    Ok(RunOutcome {
        variant: variant.to_string(),
        seed: cfg.train.seed,
        target_test_f1: ws.evaluate(student, &ws.target.test, cfg)?.f1(),
        teacher_target_test_f1: teacher_f1,
        mmd_tea_src_stu_src: report.mmd(tea_src, stu_src),
        mmd_tea_src_stu_tgt: report.mmd(tea_src, stu_tgt),
    })
}

/// Runs every configured preset (and optionally the language-MMD teacher
/// pipeline) for one seed. Presets that agree on the auxiliary-channel
/// flag share one teacher.
pub fn run_ablation_seed(
    ws: &Workspace,
    cfg: &RunConfig,
    seed: u64,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<RunOutcome>> {
    let mut teachers: BTreeMap<bool, (LayeredModel, f64)> = BTreeMap::new();
    let mut out = Vec::new();
    for &preset in &cfg.ablation.presets {
        let run_cfg = cfg.clone().with_preset(preset).with_seed(seed);
        let aux = run_cfg.loss.use_aux_channels;
        if let Entry::Vacant(slot) = teachers.entry(aux) {
            progress(&format!(
                "seed {seed}: teacher (auxiliary channels {})",
                if aux { "on" } else { "off" }
            ));
            let (t, _) = run_teacher(ws, &run_cfg)?;
            let f1 = ws.evaluate(&t, &ws.target.test, &run_cfg)?.f1();
            slot.insert((t, f1));
        }
        let (teacher, teacher_f1) = &teachers[&aux];
        progress(&format!("seed {seed}: student {preset}"));
        let (student, _) = run_student(ws, &run_cfg, teacher)?;
        out.push(outcome(ws, &run_cfg, preset.as_str(), teacher, *teacher_f1, &student)?);
    }
    if cfg.ablation.language_mmd_teacher {
        let run_cfg = cfg.clone().with_preset(Preset::Baseline).with_seed(seed);
        progress(&format!("seed {seed}: language-MMD teacher"));
        let (teacher, _) = run_language_mmd_teacher(ws, &run_cfg, cfg.ablation.language_mmd_weight)?;
        let teacher_f1 = ws.evaluate(&teacher, &ws.target.test, &run_cfg)?.f1();
        let (student, _) = run_student(ws, &run_cfg, &teacher)?;
        out.push(outcome(
            ws,
            &run_cfg,
            LANGUAGE_MMD_VARIANT,
            &teacher,
            teacher_f1,
            &student,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub n: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub mmd_tea_src_stu_src: f64,
    pub mmd_tea_src_stu_tgt: f64,
}

/// Per-variant means over seeds, in first-appearance order.
pub fn summarize(outcomes: &[RunOutcome]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for o in outcomes {
        if !order.contains(&o.variant.as_str()) {
            order.push(&o.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let rows: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.variant == v).collect();
            let f1: Vec<f64> = rows.iter().map(|o| o.target_test_f1).collect();
            let (f1_mean, f1_std) = mean_std(&f1);
            let mean = |f: fn(&RunOutcome) -> f64| rows.iter().map(|o| f(o)).sum::<f64>() / rows.len() as f64;
            SummaryRow {
                variant: v.to_string(),
                n: rows.len(),
                f1_mean,
                f1_std,
                mmd_tea_src_stu_src: mean(|o| o.mmd_tea_src_stu_src),
                mmd_tea_src_stu_tgt: mean(|o| o.mmd_tea_src_stu_tgt),
            }
        })
        .collect()
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<22} {:>3} {:>16} {:>14} {:>14}\n",
        "variant", "n", "target F1", "mmd tea/stu src", "mmd src/tgt"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<22} {:>3} {:>8.4} ± {:<6.4} {:>14.6} {:>14.6}\n",
            r.variant, r.n, r.f1_mean, r.f1_std, r.mmd_tea_src_stu_src, r.mmd_tea_src_stu_tgt
        ));
    }
    out
}

/// One-sided sign test p-value for "differences tend to be positive";
/// zero differences are dropped.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    let k = diffs.iter().filter(|d| **d > 0.0).count();
    let choose = |n: usize, r: usize| (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (k..=n).map(|i| choose(n, i)).sum::<f64>() / 2f64.powi(n as i32)
}
