// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token sequences and the random-token baseline corpus.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vocabulary of `size` ids with some ids reserved (special tokens and the like).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    size: usize,
    excluded: BTreeSet<usize>,
}

impl VocabSpec {
    pub fn new(size: usize, excluded: impl IntoIterator<Item = usize>) -> Result<Self> {
        let excluded: BTreeSet<usize> = excluded.into_iter().collect();
        if let Some(&bad) = excluded.iter().find(|&&id| id >= size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: size,
            });
        }
        if excluded.len() >= size {
            return Err(Error::EmptyVocabulary);
        }
        Ok(Self { size, excluded })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn excluded(&self) -> &BTreeSet<usize> {
        &self.excluded
    }

    pub fn is_allowed(&self, id: usize) -> bool {
        id < self.size && !self.excluded.contains(&id)
    }

    pub fn allowed_ids(&self) -> Vec<usize> {
        (0..self.size).filter(|id| !self.excluded.contains(id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids, language: None }
    }

    pub fn tagged(ids: Vec<usize>, language: impl Into<String>) -> Self {
        Self {
            ids,
            language: Some(language.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `len` ids drawn uniformly with replacement from the allowed part of `vocab`.
pub fn random_sequence(len: usize, vocab: &VocabSpec, seed: u64) -> Result<TokenSequence> {
    let allowed = vocab.allowed_ids();
    if allowed.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..len)
        .map(|_| allowed[rng.random_range(0..allowed.len())])
        .collect();
    Ok(TokenSequence {
        ids,
        language: Some("random".to_string()),
    })
}

/// Length of the random sequence paired with a sentence of `target_len` tokens.
pub fn matched_length(target_len: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::invalid(format!("length ratio must be > 0, got {ratio}")));
    }
    if target_len == 0 {
        return Err(Error::EmptyInput);
    }
    // f64::round is half-away-from-zero.
    Ok(((target_len as f64 * ratio).round() as usize).max(1))
}

/// One random sequence per target sentence, the i-th seeded with `seed ^ i`.
pub fn random_corpus(
    targets: &[TokenSequence],
    vocab: &VocabSpec,
    ratio: f64,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| random_sequence(matched_length(t.len(), ratio)?, vocab, seed ^ i as u64))
        .collect()
}
