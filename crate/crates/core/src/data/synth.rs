//! Desk-scale stand-in for a source/target language pair.
//!
//! Source sentences come from a small set of templates with planted LOC, ORG
//! and PER entities. The target language is a deterministic transform of the
//! source: function words are swapped for a different closed-class inventory
//! and every token then goes through a case-preserving letter substitution.
//! Tags are copied unchanged, so sentence `i` of a target split has the same
//! gold sequence as sentence `i` of the matching source split.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Sentence, Split};
use super::scheme::LabelScheme;
use crate::error::{Error, Result};
use crate::util::{rng_for, Stream};

pub const SOURCE_LANGUAGE: &str = "src";
pub const TARGET_LANGUAGE: &str = "tgt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            n_train: 1000,
            n_dev: 200,
            n_test: 500,
        }
    }
}

/// Train/dev/test corpora for one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSet {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl CorpusSet {
    pub fn get(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn language(&self) -> &str {
        self.train.language()
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "ro", "li", "mar", "ten", "sa", "vo", "dan", "el", "ber", "tor", "mi", "na", "gu", "fel", "har", "lin", "os",
    "pe", "ri", "sun", "ta", "ul", "ve", "wen", "zo", "cas", "bri", "mon", "del", "ar", "kit", "sel", "ham",
];
const PER_SUFFIX: &[&str] = &["son", "er", "ez", "ova", "ski", "man", "ini", ""];
const LOC_SUFFIX: &[&str] = &["burg", "ville", "stad", "ford", "polis", "mouth", "land", "ia"];
const LOC_HEAD: &[&str] = &["Lake", "Port", "Mount", "Saint"];
const ORG_HEAD: &[&str] = &[
    "Corp",
    "Group",
    "Bank",
    "Union",
    "Institute",
    "Motors",
    "Party",
    "Council",
];
const DAYS: &[&str] = &["Monday", "Tuesday", "Friday", "Sunday"];
const ADVERBS: &[&str] = &["quietly", "recently", "again", "finally", "reportedly"];

/// Closed-class words that the target language replaces wholesale.
const FUNCTION_WORDS: &[(&str, &str)] = &[
    ("the", "der"),
    ("of", "vom"),
    ("in", "im"),
    ("a", "ein"),
    ("and", "und"),
    ("with", "mit"),
    ("for", "fur"),
    ("from", "aus"),
    ("on", "am"),
    ("to", "zu"),
    ("that", "dass"),
    ("was", "war"),
    ("were", "waren"),
    ("will", "wird"),
    ("at", "bei"),
    ("by", "durch"),
];

/// Letter pairs swapped by the target cipher (case-preserving, involutive).
const CIPHER_PAIRS: &[(char, char)] = &[('a', 'e'), ('c', 'k'), ('s', 'z'), ('w', 'v'), ('t', 'd'), ('o', 'u')];

#[derive(Debug, Clone, Copy)]
enum Slot {
    Word(&'static str),
    Per,
    Loc,
    Org,
    Day,
    Num,
    Adverb,
}

use Slot::*;

const TEMPLATES: &[&[Slot]] = &[
    &[Per, Word("visited"), Loc, Word("on"), Day, Word(".")],
    &[
        Org,
        Word("opened"),
        Word("a"),
        Word("new"),
        Word("office"),
        Word("in"),
        Loc,
        Word("."),
    ],
    &[Per, Word("works"), Word("for"), Org, Word("in"), Loc, Word(".")],
    &[
        Word("the"),
        Org,
        Word("board"),
        Word("met"),
        Word("with"),
        Per,
        Word("in"),
        Loc,
        Word("."),
    ],
    &[
        Per,
        Word("said"),
        Word("the"),
        Word("talks"),
        Word("in"),
        Loc,
        Word("were"),
        Word("positive"),
        Word("."),
    ],
    &[
        Word("shares"),
        Word("of"),
        Org,
        Word("rose"),
        Num,
        Word("percent"),
        Word("on"),
        Day,
        Word("."),
    ],
    &[Per, Word("and"), Per, Word("arrived"), Word("from"), Loc, Word(".")],
    &[
        Word("officials"),
        Word("in"),
        Loc,
        Adverb,
        Word("criticized"),
        Org,
        Word("."),
    ],
    &[
        Org,
        Word("said"),
        Per,
        Word("will"),
        Word("lead"),
        Word("the"),
        Word("team"),
        Word("."),
    ],
    &[
        Loc,
        Word("beat"),
        Loc,
        Num,
        Word("-"),
        Num,
        Word("at"),
        Word("home"),
        Word("."),
    ],
    &[
        Word("the"),
        Word("weather"),
        Word("was"),
        Word("cold"),
        Word("on"),
        Day,
        Word("."),
    ],
    &[
        Per,
        Word("told"),
        Word("reporters"),
        Word("that"),
        Org,
        Word("would"),
        Adverb,
        Word("expand"),
        Word("."),
    ],
    &[
        Word("a"),
        Word("spokesman"),
        Word("for"),
        Org,
        Word("declined"),
        Word("to"),
        Word("comment"),
        Word("."),
    ],
    &[Per, Adverb, Word("left"), Loc, Word("for"), Loc, Word(".")],
    &[
        Word("talks"),
        Word("between"),
        Org,
        Word("and"),
        Org,
        Word("stalled"),
        Word("."),
    ],
    &[
        Word("police"),
        Word("in"),
        Loc,
        Word("arrested"),
        Per,
        Word("on"),
        Day,
        Word("."),
    ],
];

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn name_stem<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(1..=2);
    (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

fn entity<R: Rng>(slot: Slot, rng: &mut R, tokens: &mut Vec<String>, tags: &mut Vec<String>) {
    let (ty, words): (&str, Vec<String>) = match slot {
        Per => {
            let first = capitalize(&name_stem(rng));
            let last = capitalize(&format!("{}{}", name_stem(rng), PER_SUFFIX.choose(rng).unwrap()));
            if rng.random_bool(0.3) {
                ("PER", vec![last])
            } else {
                ("PER", vec![first, last])
            }
        }
        Loc => {
            let stem = capitalize(&format!("{}{}", name_stem(rng), LOC_SUFFIX.choose(rng).unwrap()));
            if rng.random_bool(0.25) {
                ("LOC", vec![LOC_HEAD.choose(rng).unwrap().to_string(), stem])
            } else {
                ("LOC", vec![stem])
            }
        }
        Org => {
            let mut words = vec![capitalize(&name_stem(rng))];
            if rng.random_bool(0.3) {
                words.push(capitalize(&name_stem(rng)));
            }
            words.push(ORG_HEAD.choose(rng).unwrap().to_string());
            ("ORG", words)
        }
        _ => unreachable!("not an entity slot"),
    };
    for (i, w) in words.into_iter().enumerate() {
        tokens.push(w);
        tags.push(format!("{}-{ty}", if i == 0 { 'B' } else { 'I' }));
    }
}

fn source_sentence<R: Rng>(rng: &mut R) -> Sentence {
    let template = TEMPLATES.choose(rng).unwrap();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for &slot in template.iter() {
        match slot {
            Word(w) => {
                tokens.push(w.to_string());
                tags.push("O".to_string());
            }
            Day => {
                tokens.push(DAYS.choose(rng).unwrap().to_string());
                tags.push("O".to_string());
            }
            Num => {
                tokens.push(rng.random_range(0..100).to_string());
                tags.push("O".to_string());
            }
            Adverb => {
                if rng.random_bool(0.5) {
                    tokens.push(ADVERBS.choose(rng).unwrap().to_string());
                    tags.push("O".to_string());
                }
            }
            Per | Loc | Org => entity(slot, rng, &mut tokens, &mut tags),
        }
    }
    Sentence::labeled(tokens, tags)
}

fn substitute(c: char) -> char {
    let lower = c.to_ascii_lowercase();
    let mapped = CIPHER_PAIRS.iter().find_map(|&(a, b)| {
        if lower == a {
            Some(b)
        } else if lower == b {
            Some(a)
        } else {
            None
        }
    });
    match mapped {
        Some(m) if c.is_ascii_uppercase() => m.to_ascii_uppercase(),
        Some(m) => m,
        None => c,
    }
}

fn cipher_word(word: &str) -> String {
    word.chars().map(substitute).collect()
}

/// Maps a source token to its target-language form.
pub fn encipher_token(token: &str) -> String {
    let swapped = FUNCTION_WORDS
        .iter()
        .find(|(src, _)| *src == token)
        .map(|(_, tgt)| *tgt)
        .unwrap_or(token);
    cipher_word(swapped)
}

/// Inverse of [`encipher_token`].
pub fn decipher_token(token: &str) -> String {
    // The letter substitution is an involution.
    let plain = cipher_word(token);
    let inverse: HashMap<&str, &str> = FUNCTION_WORDS.iter().map(|(s, t)| (*t, *s)).collect();
    inverse.get(plain.as_str()).map(|s| s.to_string()).unwrap_or(plain)
}

/// Entity names are shared between the two languages; everything else is
/// translated.
/// Key shared by a subtoken and its translation: pieces that map onto each
/// other under the letter substitution, and whole function words paired
/// with their replacements, get the same key.
pub fn translation_key(piece: &str) -> String {
    let (prefix, body) = match piece.strip_prefix("##") {
        Some(rest) => ("##", rest),
        None => ("", piece),
    };
    if prefix.is_empty() {
        if let Some((src, _)) = FUNCTION_WORDS
            .iter()
            .find(|(src, tgt)| *src == body || cipher_word(tgt) == body)
        {
            return format!("word:{src}");
        }
    }
    let ciphered = cipher_word(body);
    format!("{prefix}{}", body.min(ciphered.as_str()))
}

fn translate(sentence: &Sentence) -> Sentence {
    let tags = sentence.gold_tags.as_ref().expect("generated sentences are labeled");
    Sentence {
        tokens: sentence
            .tokens
            .iter()
            .zip(tags)
            .map(|(t, tag)| if tag == "O" { encipher_token(t) } else { t.clone() })
            .collect(),
        gold_tags: sentence.gold_tags.clone(),
    }
}

/// Generates parallel source/target corpora. The target train split is
/// returned without gold tags; every other split is labeled.
pub fn synth_cipher_corpora(seed: u64, sizes: SynthSizes, scheme: &LabelScheme) -> Result<(CorpusSet, CorpusSet)> {
    for ty in ["LOC", "ORG", "PER"] {
        if !scheme.entity_types().iter().any(|t| t == ty) {
            return Err(Error::Config(format!(
                "synthetic corpora need entity type {ty} in the label scheme"
            )));
        }
    }
    if sizes.n_train == 0 || sizes.n_dev == 0 || sizes.n_test == 0 {
        return Err(Error::Config("synthetic split sizes must be at least 1".into()));
    }
    let mut rng = rng_for(seed, Stream::Synth);
    let mut build = |split: Split, n: usize| -> Result<(Corpus, Corpus)> {
        let src: Vec<Sentence> = (0..n).map(|_| source_sentence(&mut rng)).collect();
        let tgt: Vec<Sentence> = src.iter().map(translate).collect();
        Ok((
            Corpus::new(src, SOURCE_LANGUAGE, split, scheme)?,
            Corpus::new(tgt, TARGET_LANGUAGE, split, scheme)?,
        ))
    };
    let (src_train, tgt_train) = build(Split::Train, sizes.n_train)?;
    let (src_dev, tgt_dev) = build(Split::Dev, sizes.n_dev)?;
    let (src_test, tgt_test) = build(Split::Test, sizes.n_test)?;
    Ok((
        CorpusSet {
            train: src_train,
            dev: src_dev,
            test: src_test,
        },
        CorpusSet {
            train: tgt_train.strip_labels(),
            dev: tgt_dev,
            test: tgt_test,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_keys_pair_up() {
        for w in ["the", "Lake", "said", "##burg", "reporters", "x"] {
            assert_eq!(translation_key(w), translation_key(&encipher_token(w)), "{w}");
        }
        assert_ne!(translation_key("the"), translation_key("of"));
        assert_ne!(translation_key("##son"), translation_key("son"));
    }

    #[test]
    fn token_cipher_round_trips() {
        for w in ["the", "Lake", "Marburg", "said", "42", ".", "Corp"] {
            assert_eq!(decipher_token(&encipher_token(w)), w, "{w}");
        }
        assert_eq!(encipher_token("the"), "tar");
        assert_eq!(encipher_token("Casa"), "Keze");
    }

    #[test]
    fn sizes_and_labels() {
        let sizes = SynthSizes {
            n_train: 100,
            n_dev: 7,
            n_test: 9,
        };
        let (src, tgt) = synth_cipher_corpora(3, sizes, &LabelScheme::synthetic()).unwrap();
        assert_eq!(src.train.len(), 100);
        assert!(src.train.labeled());
        assert_eq!(tgt.train.len(), 100);
        assert!(!tgt.train.labeled());
        assert!(tgt.dev.labeled() && tgt.test.labeled());
        assert_eq!(tgt.test.len(), 9);
    }

    #[test]
    fn zero_size_rejected() {
        let sizes = SynthSizes {
            n_train: 0,
            n_dev: 1,
            n_test: 1,
        };
        assert!(synth_cipher_corpora(1, sizes, &LabelScheme::synthetic()).is_err());
    }
}
