use ndarray::Array2;

use super::corpus::Sentence;
use super::scheme::LabelScheme;
use super::vocab::{Vocab, CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

/// Label id for positions excluded from every loss and metric.
pub const IGNORE_INDEX: i64 = -100;

/// One sentence after subtokenization and truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    /// `[CLS] pieces... [SEP]`
    pub ids: Vec<u32>,
    /// Subtoken position of each surviving word's first piece.
    pub first_subtoken: Vec<usize>,
    /// Gold tag index per surviving word.
    pub labels: Option<Vec<usize>>,
    /// Word count before truncation.
    pub n_words: usize,
}

impl EncodedSentence {
    pub fn encode(sentence: &Sentence, vocab: &Vocab, scheme: &LabelScheme, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
        }
        let budget = max_len - 2;
        let mut ids = vec![CLS_ID];
        let mut first_subtoken = Vec::new();
        for word in &sentence.tokens {
            if ids.len() > budget {
                break;
            }
            let pieces = vocab.tokenize_word(word);
            first_subtoken.push(ids.len());
            let room = budget - (ids.len() - 1);
            ids.extend(pieces.iter().take(room));
        }
        ids.push(SEP_ID);
        let labels = match &sentence.gold_tags {
            Some(tags) => Some(
                tags.iter()
                    .take(first_subtoken.len())
                    .map(|t| scheme.index(t))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(EncodedSentence {
            ids,
            first_subtoken,
            labels,
            n_words: sentence.len(),
        })
    }

    pub fn n_surviving(&self) -> usize {
        self.first_subtoken.len()
    }
}

/// A padded batch of encoded sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub subtoken_ids: Array2<u32>,
    pub attention_mask: Array2<u8>,
    /// Gold tag index at first-subtoken positions of labeled sentences,
    /// [`IGNORE_INDEX`] elsewhere.
    pub label_ids: Array2<i64>,
    pub first_subtoken_index: Vec<Vec<usize>>,
    pub n_words: Vec<usize>,
}

impl EncodedBatch {
    pub fn from_encoded(sentences: &[&EncodedSentence]) -> Self {
        let b = sentences.len();
        let t = sentences.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let mut ids = Array2::from_elem((b, t), PAD_ID);
        let mut mask = Array2::zeros((b, t));
        let mut labels = Array2::from_elem((b, t), IGNORE_INDEX);
        for (row, s) in sentences.iter().enumerate() {
            for (col, &id) in s.ids.iter().enumerate() {
                ids[[row, col]] = id;
                mask[[row, col]] = 1;
            }
            if let Some(gold) = &s.labels {
                for (&pos, &label) in s.first_subtoken.iter().zip(gold) {
                    labels[[row, pos]] = label as i64;
                }
            }
        }
        EncodedBatch {
            subtoken_ids: ids,
            attention_mask: mask,
            label_ids: labels,
            first_subtoken_index: sentences.iter().map(|s| s.first_subtoken.clone()).collect(),
            n_words: sentences.iter().map(|s| s.n_words).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.subtoken_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.subtoken_ids.ncols()
    }

    /// Flattened `row * seq_len + col` index of every first subtoken, in
    /// sentence-then-word order.
    pub fn valid_positions(&self) -> Vec<usize> {
        let t = self.seq_len();
        self.first_subtoken_index
            .iter()
            .enumerate()
            .flat_map(|(row, firsts)| firsts.iter().map(move |&c| row * t + c))
            .collect()
    }

    /// Gold labels at [`Self::valid_positions`]; `None` if any row is unlabeled.
    pub fn valid_labels(&self) -> Option<Vec<usize>> {
        let t = self.seq_len();
        let flat = self.label_ids.as_slice()?;
        self.valid_positions()
            .into_iter()
            .map(|p| {
                let l = flat[p];
                debug_assert!(p / t < self.batch_size());
                (l >= 0).then_some(l as usize)
            })
            .collect()
    }
}

/// Subtokenizes, truncates to `max_len` positions and pads.
pub fn encode_batch(
    sentences: &[Sentence],
    vocab: &Vocab,
    scheme: &LabelScheme,
    max_len: usize,
) -> Result<EncodedBatch> {
    let encoded = sentences
        .iter()
        .map(|s| EncodedSentence::encode(s, vocab, scheme, max_len))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EncodedSentence> = encoded.iter().collect();
    Ok(EncodedBatch::from_encoded(&refs))
}
