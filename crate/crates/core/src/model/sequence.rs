// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use crate::error::{NxlError, Result};
use crate::model::ModelConfig;

/// A pre-tokenized input. Position 0 is always special (the CLS-analogue);
/// an optional MASK position is special too.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    token_ids: Vec<usize>,
    special: BTreeSet<usize>,
    mask_position: Option<usize>,
}

impl TokenSequence {
    /// `special` may omit position 0; it is added regardless.
    pub fn new(token_ids: Vec<usize>, special: impl IntoIterator<Item = usize>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(NxlError::Shape("token sequence must not be empty".into()));
        }
        let mut set: BTreeSet<usize> = special.into_iter().collect();
        if let Some(&p) = set.iter().find(|&&p| p >= token_ids.len()) {
            return Err(NxlError::Index(format!(
                "special position {p} outside sequence of length {}",
                token_ids.len()
            )));
        }
        set.insert(0);
        Ok(TokenSequence {
            token_ids,
            special: set,
            mask_position: None,
        })
    }

    /// Flags `position` as the MASK slot (and as special).
    pub fn with_mask_position(mut self, position: usize) -> Result<Self> {
        if position >= self.len() {
            return Err(NxlError::Index(format!(
                "mask position {position} outside sequence of length {}",
                self.len()
            )));
        }
        self.special.insert(position);
        self.mask_position = Some(position);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn special_positions(&self) -> &BTreeSet<usize> {
        &self.special
    }

    pub fn is_special(&self, position: usize) -> bool {
        self.special.contains(&position)
    }

    pub fn mask_position(&self) -> Option<usize> {
        self.mask_position
    }

    /// Non-special positions in increasing order.
    pub fn eligible_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|p| !self.special.contains(p)).collect()
    }

    /// Copy with `token_ids[position] = token`.
    pub fn with_token(&self, position: usize, token: usize) -> TokenSequence {
        let mut out = self.clone();
        out.token_ids[position] = token;
        out
    }

    /// Copy with `positions` removed; survivors keep their order and the
    /// special / MASK flags follow them.
    pub fn without_positions(&self, positions: &BTreeSet<usize>) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(self.len());
        let mut special = BTreeSet::new();
        let mut mask = None;
        for (i, &id) in self.token_ids.iter().enumerate() {
            if positions.contains(&i) {
                continue;
            }
            let new_pos = ids.len();
            if self.special.contains(&i) {
                special.insert(new_pos);
            }
            if self.mask_position == Some(i) {
                mask = Some(new_pos);
            }
            ids.push(id);
        }
        if ids.is_empty() {
            return Err(NxlError::Protocol("deletion removed every token".into()));
        }
        let mut out = TokenSequence {
            token_ids: ids,
            special,
            mask_position: mask,
        };
        out.special.insert(0);
        Ok(out)
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        if self.len() > config.max_seq_len {
            return Err(NxlError::Shape(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.len(),
                config.max_seq_len
            )));
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(NxlError::Vocabulary {
                id,
                vocab_size: config.vocab_size,
            });
        }
        Ok(())
    }
}
