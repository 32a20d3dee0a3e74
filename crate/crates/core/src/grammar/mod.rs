//! Minimal-pair templates, the word-level vocabulary, and synthetic corpora.
//!
//! Wh-questions and topicalization share six aligned slots (prefix, filler,
//! auxiliary/complementizer, article, subject, verb) so a direction learned at
//! a slot of one construction can be applied at the same slot of the other.

mod corpus;
mod lexicon;
mod pairs;

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub use corpus::{split_at_bos, ConstructionMix, CorpusSpec, SentenceKind};
pub use lexicon::{FunctionWords, Lexicon, LexiconSizes, VerbForms, Vocabulary};
pub use pairs::{
    Animacy, Construction, MinimalPair, Split, TemplateVariant, SLOT_COUNT, SLOT_NAMES,
};

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("word {0:?} is not in the vocabulary")]
    Vocabulary(String),
    #[error("requested {requested} pairs but only {available} are available (combination space {space})")]
    Capacity {
        requested: u64,
        available: u64,
        space: u64,
    },
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pair dump: {0}")]
    Json(#[from] serde_json::Error),
}

/// A validated lexicon together with its vocabulary.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
}

impl Grammar {
    pub fn new(lexicon: Lexicon) -> Result<Self, GrammarError> {
        lexicon.validate()?;
        let vocab = Vocabulary::from_lexicon(&lexicon);
        Ok(Self { lexicon, vocab })
    }

    pub fn bos(&self) -> u32 {
        self.vocab
            .id(&self.lexicon.function_words.bos)
            .expect("bos is in vocabulary")
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, GrammarError> {
        self.vocab.tokenize(text)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, GrammarError> {
        self.vocab.detokenize(ids)
    }
}

/// Writes one JSON object per pair.
pub fn write_pairs_jsonl<W: Write>(mut w: W, pairs: &[MinimalPair]) -> Result<(), GrammarError> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(r: R) -> Result<Vec<MinimalPair>, GrammarError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<MinimalPair>, GrammarError> {
    let f = std::fs::File::open(path)?;
    read_pairs_jsonl(std::io::BufReader::new(f))
}
