//! Entity-level precision, recall and F1 over BIO tag sequences.
//!
//! Spans are decoded with conlleval chunk semantics: an `I-X` that does not
//! continue an open `X` span starts a new one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::scheme::split_tag;
use crate::data::{Corpus, LabelScheme};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub entity_type: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        EntitySpan {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

pub fn extract_spans(tags: &[impl AsRef<str>]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let parsed = split_tag(tag.as_ref());
        let continues = matches!((parsed, open), (Some(('I', ty)), Some((_, cur))) if ty == cur);
        if continues {
            continue;
        }
        if let Some((start, ty)) = open.take() {
            spans.push(EntitySpan::new(start, i, ty));
        }
        if let Some((_, ty)) = parsed {
            open = Some((i, ty));
        }
    }
    if let Some((start, ty)) = open {
        spans.push(EntitySpan::new(start, tags.len(), ty));
    }
    spans
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// Predicted entities.
    pub predicted: usize,
    /// Correct predicted entities.
    pub correct: usize,
    /// Gold entities.
    pub gold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl From<Counts> for Scores {
    fn from(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.correct, c.predicted);
        let recall = ratio(c.correct, c.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
            counts: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_type: BTreeMap<String, Scores>,
}

impl MetricsResult {
    pub fn f1(&self) -> f64 {
        self.overall.f1
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}",
            "type", "precision", "recall", "f1", "pred", "correct", "gold"
        );
        let mut row = |name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                name, s.precision, s.recall, s.f1, s.counts.predicted, s.counts.correct, s.counts.gold
            );
        };
        for (ty, s) in &self.per_type {
            row(ty, s);
        }
        row("overall", &self.overall);
        out
    }
}

pub fn entity_f1<P: AsRef<str>, G: AsRef<str>>(pred: &[Vec<P>], gold: &[Vec<G>]) -> Result<MetricsResult> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted sentences vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut total = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "sentence {i}: {} predicted tags vs {} gold",
                p.len(),
                g.len()
            )));
        }
        let ps = extract_spans(p);
        let gs = extract_spans(g);
        for s in &gs {
            total.gold += 1;
            per_type.entry(s.entity_type.clone()).or_default().gold += 1;
        }
        for s in &ps {
            total.predicted += 1;
            let c = per_type.entry(s.entity_type.clone()).or_default();
            c.predicted += 1;
            if gs.binary_search(s).is_ok() {
                total.correct += 1;
                c.correct += 1;
            }
        }
    }
    Ok(MetricsResult {
        overall: total.into(),
        per_type: per_type.into_iter().map(|(k, c)| (k, c.into())).collect(),
    })
}

/// Reads a two-column `token tag` file (blank lines between sentences)
/// and checks it token-by-token against `gold`. Tags must belong to `scheme`.
pub fn read_predictions(path: &Path, gold: &Corpus, scheme: &LabelScheme) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut sentences: Vec<Vec<(String, String)>> = Vec::new();
    let mut current = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(parse_err(n + 1, format!("expected 2 columns, found {}", cols.len())));
        }
        if !scheme.contains(cols[1]) {
            return Err(Error::UnknownTag(cols[1].to_string()));
        }
        current.push((cols[0].to_string(), cols[1].to_string()));
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    if sentences.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} has {} sentences, gold has {}",
            path.display(),
            sentences.len(),
            gold.len()
        )));
    }
    sentences
        .into_iter()
        .zip(gold.sentences())
        .enumerate()
        .map(|(i, (pred, g))| {
            if pred.len() != g.tokens.len() || pred.iter().zip(&g.tokens).any(|((t, _), gt)| t != gt) {
                return Err(Error::Data(format!("sentence {} tokens do not match gold", i + 1)));
            }
            Ok(pred.into_iter().map(|(_, tag)| tag).collect())
        })
        .collect()
}
