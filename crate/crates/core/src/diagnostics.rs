//! Domain-discrepancy statistics between teacher/student [CLS] populations
//! on source/target text, and a TSV dump of the vectors for external
//! projection.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_rows;
use crate::data::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::losses::{cosine_sim, mmd_squared, sym_kl, KernelConfig, SYM_KL_EPS};
use crate::model::LayeredModel;
use crate::training::EncodedCorpus;
use crate::util::{rng_for, write_atomic, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageTag {
    Source,
    Target,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Teacher => "teacher",
            ModelTag::Student => "student",
        }
    }

    fn short(self) -> &'static str {
        match self {
            ModelTag::Teacher => "tea",
            ModelTag::Student => "stu",
        }
    }
}

impl LanguageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LanguageTag::Source => "source",
            LanguageTag::Target => "target",
        }
    }

    fn short(self) -> &'static str {
        match self {
            LanguageTag::Source => "src",
            LanguageTag::Target => "tgt",
        }
    }
}

/// One of the four domains, e.g. `tea_src`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Domain {
    pub model: ModelTag,
    pub language: LanguageTag,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::new(ModelTag::Teacher, LanguageTag::Source),
        Domain::new(ModelTag::Teacher, LanguageTag::Target),
        Domain::new(ModelTag::Student, LanguageTag::Source),
        Domain::new(ModelTag::Student, LanguageTag::Target),
    ];

    pub const fn new(model: ModelTag, language: LanguageTag) -> Self {
        Domain { model, language }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.model.short(), self.language.short())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub domain: Domain,
    /// Corpus index of each sampled sentence, ascending.
    pub indices: Vec<usize>,
    /// `[n x hidden_dim]`
    pub vectors: Array2<f64>,
}

/// Draws `min(n_samples, |corpus|)` sentences (all of them, in order, when
/// the corpus is no larger) and returns their inference-mode [CLS] vectors.
#[allow(clippy::too_many_arguments)]
pub fn collect_cls(
    model: &LayeredModel,
    vocab: &Vocab,
    corpus: &Corpus,
    domain: Domain,
    n_samples: usize,
    seed: u64,
    max_len: usize,
    batch_size: usize,
) -> Result<DomainSample> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot sample [CLS] vectors from an empty corpus".into()));
    }
    let n = n_samples.min(corpus.len());
    let indices: Vec<usize> = if n == corpus.len() {
        (0..n).collect()
    } else {
        let mut v = index::sample(&mut rng_for(seed, Stream::Sampling), corpus.len(), n).into_vec();
        v.sort_unstable();
        v
    };
    let data = EncodedCorpus::new(corpus, vocab, &model.scheme, max_len)?;
    let mut parts = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        parts.push(model.encode::<rand_chacha::ChaCha8Rng>(&data.batch(chunk), None)?.cls);
    }
    let views: Vec<_> = parts.iter().map(Array2::view).collect();
    let vectors = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(DomainSample {
        domain,
        indices,
        vectors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub a: String,
    pub b: String,
    pub mmd: f64,
    pub sym_kl: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub kernel: KernelConfig,
    pub sample_sizes: BTreeMap<String, usize>,
    pub pairs: Vec<PairMetrics>,
}

impl DiagnosticsReport {
    /// Metrics of a pair in either order.
    pub fn get(&self, a: Domain, b: Domain) -> Option<&PairMetrics> {
        let (a, b) = (a.to_string(), b.to_string());
        self.pairs
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
    }

    pub fn mmd(&self, a: Domain, b: Domain) -> f64 {
        self.get(a, b).map_or(f64::NAN, |p| p.mmd)
    }

    /// One JSON record per pair.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>12} {:>9}\n", "pair", "mmd", "sym_kl", "cosine");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{:<16} {:>12.6} {:>12.6} {:>9.5}",
                format!("{}/{}", p.a, p.b),
                p.mmd,
                p.sym_kl,
                p.cosine
            );
        }
        out
    }
}

/// Pairwise statistics over the four domains. MMD is computed on the full
/// populations; the KL divergence and cosine similarity compare the mean
/// vectors, softmax-normalized for the divergence.
pub fn domain_report(samples: &[DomainSample], kernel: &KernelConfig) -> Result<DiagnosticsReport> {
    kernel.validate()?;
    let mut by_domain = BTreeMap::new();
    for s in samples {
        if s.vectors.nrows() < 2 {
            return Err(Error::Degenerate(format!("{} has fewer than 2 vectors", s.domain)));
        }
        if s.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} contains non-finite values", s.domain)));
        }
        if by_domain.insert(s.domain, s).is_some() {
            return Err(Error::Config(format!("domain {} given twice", s.domain)));
        }
    }
    for d in Domain::ALL {
        if !by_domain.contains_key(&d) {
            return Err(Error::Config(format!("missing domain {d}")));
        }
    }
    let means: BTreeMap<Domain, Array1<f64>> = by_domain
        .iter()
        .map(|(&d, s)| (d, s.vectors.mean_axis(Axis(0)).expect("non-empty")))
        .collect();
    let mut pairs = Vec::new();
    for (i, &a) in Domain::ALL.iter().enumerate() {
        for &b in &Domain::ALL[i + 1..] {
            let (sa, sb) = (by_domain[&a], by_domain[&b]);
            let (ma, mb) = (&means[&a], &means[&b]);
            let pa = softmax_rows(ma.view().insert_axis(Axis(0))).row(0).to_owned();
            let pb = softmax_rows(mb.view().insert_axis(Axis(0))).row(0).to_owned();
            pairs.push(PairMetrics {
                a: a.to_string(),
                b: b.to_string(),
                mmd: mmd_squared(sa.vectors.view(), sb.vectors.view(), kernel)?,
                sym_kl: sym_kl(pa.view(), pb.view(), SYM_KL_EPS)?,
                cosine: cosine_sim(ma.view(), mb.view())?,
            });
        }
    }
    Ok(DiagnosticsReport {
        kernel: kernel.clone(),
        sample_sizes: by_domain
            .iter()
            .map(|(d, s)| (d.to_string(), s.vectors.nrows()))
            .collect(),
        pairs,
    })
}

const EXPORT_HEADER: &str = "model\tlanguage\tindex";

/// Renders the TSV dump: a header, then one row per vector sorted by model,
/// language and sentence index, with shortest round-trip decimals.
pub fn render_embeddings(samples: &[DomainSample]) -> Result<String> {
    let dim = samples.first().map_or(0, |s| s.vectors.ncols());
    if samples
        .iter()
        .any(|s| s.vectors.ncols() != dim || s.indices.len() != s.vectors.nrows())
    {
        return Err(Error::Shape("samples disagree on vector dimension or count".into()));
    }
    let mut rows: Vec<(&str, &str, usize, ndarray::ArrayView1<f64>)> = samples
        .iter()
        .flat_map(|s| {
            s.indices
                .iter()
                .zip(s.vectors.rows())
                .map(move |(&i, v)| (s.domain.model.as_str(), s.domain.language.as_str(), i, v))
        })
        .collect();
    rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    let mut out = String::from(EXPORT_HEADER);
    for k in 0..dim {
        let _ = write!(out, "\tv{k}");
    }
    out.push('\n');
    for (m, l, i, v) in rows {
        let _ = write!(out, "{m}\t{l}\t{i}");
        for x in v {
            let _ = write!(out, "\t{x:?}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(samples: &[DomainSample], path: &Path) -> Result<()> {
    write_atomic(path, render_embeddings(samples)?.as_bytes())
}

/// `(model, language, index, vector)`.
pub type EmbeddingRow = (String, String, usize, Vec<f64>);

/// Parses a dump written by [`export_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.starts_with(EXPORT_HEADER) => {}
        _ => return Err(bad(1, "missing header".into())),
    }
    lines
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(bad(n + 1, "too few columns".into()));
            }
            let index = cols[2].parse().map_err(|e| bad(n + 1, format!("{e}")))?;
            let vector = cols[3..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| bad(n + 1, format!("{e}"))))
                .collect::<Result<_>>()?;
            Ok((cols[0].to_string(), cols[1].to_string(), index, vector))
        })
        .collect()
}
