//! Corpora, label schemes, synthetic data and subtoken batching.

pub mod batch;
pub mod corpus;
pub mod scheme;
pub mod synth;
pub mod vocab;

pub use batch::{encode_batch, EncodedBatch, EncodedSentence, IGNORE_INDEX};
pub use corpus::{
    parse_conll, parse_conll_str, render_conll, validate_bio, write_conll, BioViolation, Corpus, Sentence, Split,
};
pub use scheme::LabelScheme;
pub use synth::{synth_cipher_corpora, CorpusSet, SynthSizes};
pub use vocab::Vocab;
