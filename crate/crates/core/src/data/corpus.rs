use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scheme::{split_tag, LabelScheme};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" | "testa" => Ok(Split::Dev),
            "test" | "testb" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub gold_tags: Option<Vec<String>>,
}

impl Sentence {
    pub fn labeled(tokens: Vec<String>, tags: Vec<String>) -> Self {
        debug_assert_eq!(tokens.len(), tags.len());
        Sentence {
            tokens,
            gold_tags: Some(tags),
        }
    }

    pub fn unlabeled(tokens: Vec<String>) -> Self {
        Sentence {
            tokens,
            gold_tags: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A tokenized corpus for one language and split. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    sentences: Vec<Sentence>,
    language: String,
    split: Split,
    labeled: bool,
}

impl Corpus {
    pub fn new(
        sentences: Vec<Sentence>,
        language: impl Into<String>,
        split: Split,
        scheme: &LabelScheme,
    ) -> Result<Self> {
        let language = language.into();
        if language.is_empty() {
            return Err(Error::Data("corpus language must be non-empty".into()));
        }
        let labeled = !sentences.is_empty() && sentences.iter().all(|s| s.gold_tags.is_some());
        for (i, s) in sentences.iter().enumerate() {
            if let Some(tags) = &s.gold_tags {
                if !labeled {
                    return Err(Error::Data(format!(
                        "sentence {i} is labeled but the corpus mixes labeled and unlabeled sentences"
                    )));
                }
                if tags.len() != s.tokens.len() {
                    return Err(Error::Data(format!(
                        "sentence {i} has {} tokens but {} tags",
                        s.tokens.len(),
                        tags.len()
                    )));
                }
                for tag in tags {
                    scheme.index(tag)?;
                }
            }
        }
        Ok(Corpus {
            sentences,
            language,
            split,
            labeled,
        })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labeled(&self) -> bool {
        self.labeled
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Copy of this corpus with gold tags removed.
    pub fn strip_labels(&self) -> Corpus {
        Corpus {
            sentences: self
                .sentences
                .iter()
                .map(|s| Sentence::unlabeled(s.tokens.clone()))
                .collect(),
            language: self.language.clone(),
            split: self.split,
            labeled: false,
        }
    }

    pub fn gold(&self) -> Option<Vec<Vec<String>>> {
        self.sentences.iter().map(|s| s.gold_tags.clone()).collect()
    }
}

/// Parses a CoNLL column file: token in column 0, tag in the final column,
/// blank lines between sentences. `-DOCSTART-` lines are skipped.
pub fn parse_conll(path: impl AsRef<Path>, scheme: &LabelScheme, language: &str, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll_str(&text, path, scheme, language, split)
}

pub fn parse_conll_str(
    text: &str,
    origin: impl AsRef<Path>,
    scheme: &LabelScheme,
    language: &str,
    split: Split,
) -> Result<Corpus> {
    let origin = origin.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut columns: Option<usize> = None;
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, labeled: bool| {
        if tokens.is_empty() {
            return;
        }
        let toks = std::mem::take(tokens);
        let sentence = if labeled {
            Sentence::labeled(toks, std::mem::take(tags))
        } else {
            Sentence::unlabeled(toks)
        };
        sentences.push(sentence);
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, columns.unwrap_or(1) > 1);
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "-DOCSTART-" {
            continue;
        }
        let expected = *columns.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(parse_err(
                line_no,
                format!("expected {expected} columns, found {}", fields.len()),
            ));
        }
        tokens.push(fields[0].to_string());
        if expected > 1 {
            let tag = fields[expected - 1];
            if !scheme.contains(tag) {
                return Err(Error::UnknownTag(tag.to_string()));
            }
            tags.push(tag.to_string());
        }
    }
    flush(&mut tokens, &mut tags, columns.unwrap_or(1) > 1);

    Corpus::new(sentences, language, split, scheme)
}

/// Writes a corpus in two-column (labeled) or one-column (unlabeled) CoNLL format.
pub fn write_conll(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    render_conll(corpus.sentences(), &mut out).map_err(|e| Error::io(path, e))?;
    crate::util::write_atomic(path, &out)
}

pub fn render_conll(sentences: &[Sentence], out: &mut impl Write) -> std::io::Result<()> {
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        match &s.gold_tags {
            Some(tags) => {
                for (tok, tag) in s.tokens.iter().zip(tags) {
                    writeln!(out, "{tok} {tag}")?;
                }
            }
            None => {
                for tok in &s.tokens {
                    writeln!(out, "{tok}")?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub position: usize,
    pub tag: String,
    /// The tag prefix that would have been valid here: `B-X`.
    pub expected: String,
}

/// Lists every `I-X` that does not follow `B-X` or `I-X`.
pub fn validate_bio(tags: &[impl AsRef<str>], scheme: &LabelScheme) -> Vec<BioViolation> {
    let mut violations = Vec::new();
    let mut previous: Option<&str> = None;
    for (position, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        debug_assert!(scheme.contains(tag), "tag {tag} not in scheme");
        if let Some(('I', ty)) = split_tag(tag) {
            let continues = matches!(previous.and_then(split_tag), Some((_, prev)) if prev == ty);
            if !continues {
                violations.push(BioViolation {
                    position,
                    tag: tag.to_string(),
                    expected: format!("B-{ty}"),
                });
            }
        }
        previous = Some(tag);
    }
    violations
}
