use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const CONTINUATION: &str = "##";

/// Subtoken vocabulary: word-initial pieces plus `##`-prefixed continuations,
/// learned by byte-pair merges over characters and applied by greedy
/// longest-match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    pieces: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_pieces(r.pieces)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { pieces: v.pieces }
    }
}

fn base_alphabet() -> impl Iterator<Item = char> {
    ('a'..='z')
        .chain('A'..='Z')
        .chain('0'..='9')
        .chain(".,;:!?-'\"()%&/".chars())
}

impl Vocab {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let specials = [PAD, UNK, CLS, SEP];
        if pieces.len() < specials.len() || pieces[..4].iter().zip(specials).any(|(p, s)| p != s) {
            return Err(Error::Config(
                "vocabulary must start with [PAD], [UNK], [CLS], [SEP]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary piece `{p}`")));
            }
        }
        let max_piece_chars = pieces
            .iter()
            .map(|p| p.trim_start_matches(CONTINUATION).chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocab {
            pieces,
            index,
            max_piece_chars,
        })
    }

    /// Learns `n_merges` byte-pair merges from the given words.
    pub fn train_bpe<'a>(words: impl IntoIterator<Item = &'a str>, n_merges: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }

        let mut pieces: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        let mut push = |p: String, pieces: &mut Vec<String>| {
            if seen.insert(p.clone()) {
                pieces.push(p);
            }
        };
        for c in base_alphabet() {
            push(c.to_string(), &mut pieces);
            push(format!("{CONTINUATION}{c}"), &mut pieces);
        }

        let mut words: Vec<(Vec<String>, usize)> = counts
            .into_iter()
            .map(|(w, n)| {
                let symbols = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        }
                    })
                    .collect::<Vec<_>>();
                (symbols, n)
            })
            .collect();
        for (symbols, _) in &words {
            for s in symbols {
                push(s.clone(), &mut pieces);
            }
        }

        for _ in 0..n_merges {
            let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (symbols, n) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts.entry((&pair[0], &pair[1])).or_default() += n;
                }
            }
            // Highest count wins; ties go to the lexicographically smallest pair.
            let best = pair_counts
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), _)) = best else {
                break;
            };
            let (left, right) = (left.to_string(), right.to_string());
            let merged = format!("{left}{}", right.trim_start_matches(CONTINUATION));
            for (symbols, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < symbols.len() {
                    if symbols[i] == left && symbols[i + 1] == right {
                        symbols[i] = merged.clone();
                        symbols.remove(i + 1);
                    }
                    i += 1;
                }
            }
            push(merged, &mut pieces);
        }
        Vocab::from_pieces(pieces).expect("trained vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    /// Greedy longest-match segmentation of one word. Characters with no
    /// matching piece become `[UNK]`.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            let longest = self.max_piece_chars.min(chars.len() - start);
            for len in (1..=longest).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[start..start + len]);
                if let Some(id) = self.id(&buf) {
                    found = Some((id, len));
                    break;
                }
            }
            match found {
                Some((id, len)) => {
                    out.push(id);
                    start += len;
                }
                None => {
                    out.push(UNK_ID);
                    start += 1;
                }
            }
        }
        if out.is_empty() {
            out.push(UNK_ID);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::util::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
