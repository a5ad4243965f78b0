//! Frozen preprocessing (BPE codes + per-side vocabularies), id-encoded
//! corpora tagged with the hashes of the artifacts that produced them, and
//! the word-level translator built on a checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{beam_decode, greedy_decode};
use crate::subword::{learn_bpe_from, BpeCodes, DEFAULT_EOW};
use crate::train::Checkpoint;
use crate::vocab::{build_vocab, TokenId, Vocabulary};

pub const CODES_FILE: &str = "codes.bpe";
pub const SRC_VOCAB_FILE: &str = "vocab.src";
pub const TGT_VOCAB_FILE: &str = "vocab.tgt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepHashes {
    pub codes: String,
    pub src_vocab: String,
    pub tgt_vocab: String,
}

#[derive(Debug, Clone)]
pub struct Preprocessing {
    pub codes: BpeCodes,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl Preprocessing {
    /// Joint BPE over both sides of every corpus, then one vocabulary per side.
    pub fn fit(corpora: &[&ParallelCorpus], num_merges: usize, max_vocab: usize) -> Result<Self> {
        let pooled = corpora.iter().flat_map(|c| c.sources().chain(c.targets()));
        let codes = learn_bpe_from(pooled, num_merges, DEFAULT_EOW)?;
        let src: Vec<Vec<String>> = corpora.iter().flat_map(|c| c.sources()).map(|s| codes.apply(s)).collect();
        let tgt: Vec<Vec<String>> = corpora.iter().flat_map(|c| c.targets()).map(|s| codes.apply(s)).collect();
        let src_vocab = build_vocab(src.iter().map(Vec::as_slice), max_vocab)?;
        let tgt_vocab = build_vocab(tgt.iter().map(Vec::as_slice), max_vocab)?;
        Ok(Preprocessing {
            codes,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn hashes(&self) -> PrepHashes {
        PrepHashes {
            codes: self.codes.content_hash(),
            src_vocab: self.src_vocab.content_hash(),
            tgt_vocab: self.tgt_vocab.content_hash(),
        }
    }

    pub fn encode_source(&self, words: &[String]) -> Vec<TokenId> {
        self.src_vocab.encode(&self.codes.apply(words))
    }

    pub fn encode_target(&self, words: &[String]) -> Vec<TokenId> {
        self.tgt_vocab.encode(&self.codes.apply(words))
    }

    pub fn decode_target(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        Ok(self.codes.decode(&self.tgt_vocab.decode(ids)?))
    }

    pub fn prepare(&self, corpus: &ParallelCorpus) -> PreparedCorpus {
        PreparedCorpus {
            name: corpus.name.clone(),
            content_hash: corpus.content_hash(),
            examples: corpus
                .pairs
                .iter()
                .map(|p| (self.encode_source(&p.source), self.encode_target(&p.target)))
                .collect(),
            prep: self.hashes(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.codes.save(&dir.join(CODES_FILE))?;
        self.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
        self.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(CODES_FILE), &dir.join(SRC_VOCAB_FILE), &dir.join(TGT_VOCAB_FILE))
    }

    pub fn load(codes: &Path, src_vocab: &Path, tgt_vocab: &Path) -> Result<Self> {
        Ok(Preprocessing {
            codes: BpeCodes::load(codes)?,
            src_vocab: Vocabulary::load(src_vocab)?,
            tgt_vocab: Vocabulary::load(tgt_vocab)?,
        })
    }
}

/// A corpus mapped to ids, remembering which preprocessing produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    pub name: String,
    pub content_hash: String,
    pub examples: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub prep: PrepHashes,
}

impl PreparedCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn concat(&self, other: &PreparedCorpus, name: impl Into<String>) -> Result<PreparedCorpus> {
        if self.prep != other.prep {
            return Err(Error::Incompatible(format!(
                "cannot concatenate {} and {}: different preprocessing",
                self.name, other.name
            )));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Ok(PreparedCorpus {
            name: name.into(),
            content_hash: format!("{}+{}", self.content_hash, other.content_hash),
            examples,
            prep: self.prep.clone(),
        })
    }

    pub fn prefix(&self, n: usize) -> PreparedCorpus {
        PreparedCorpus {
            name: format!("{}[..{n}]", self.name),
            content_hash: format!("{}[..{n}]", self.content_hash),
            examples: self.examples[..n.min(self.len())].to_vec(),
            prep: self.prep.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeStrategy {
    Greedy,
    Beam { size: usize, alpha: f64 },
}

/// Anything that maps a tokenized source sentence to a tokenized target.
pub trait TranslationSystem: Sync {
    fn translate(&self, source: &[String]) -> Result<Vec<String>>;

    fn translate_all(&self, sources: &[Vec<String>], exec: Exec) -> Result<Vec<Vec<String>>> {
        exec.map(sources, |s| self.translate(s)).into_iter().collect()
    }
}

/// Word in, word out: BPE + vocabulary around a checkpoint's model.
#[derive(Debug, Clone)]
pub struct Translator {
    pub prep: Preprocessing,
    pub checkpoint: Checkpoint,
    pub strategy: DecodeStrategy,
}

impl Translator {
    pub fn new(prep: Preprocessing, checkpoint: Checkpoint, strategy: DecodeStrategy) -> Result<Self> {
        checkpoint.check_compatible(&prep.hashes())?;
        Ok(Translator {
            prep,
            checkpoint,
            strategy,
        })
    }

    pub fn translate_ids(&self, src: &[TokenId]) -> Result<Vec<TokenId>> {
        let (p, cfg) = (&self.checkpoint.params, &self.checkpoint.config);
        match self.strategy {
            DecodeStrategy::Greedy => greedy_decode(p, cfg, src),
            DecodeStrategy::Beam { size, alpha } => beam_decode(p, cfg, src, size, alpha),
        }
    }
}

impl TranslationSystem for Translator {
    fn translate(&self, source: &[String]) -> Result<Vec<String>> {
        if source.is_empty() {
            return Ok(Vec::new());
        }
        let ids = self.translate_ids(&self.prep.encode_source(source))?;
        self.prep.decode_target(&ids)
    }
}
