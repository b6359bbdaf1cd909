//! Synthetic multimodal task: a grid of coloured patches ("image tokens")
//! followed by a question naming one patch by row and column. The answer is
//! the colour token of that patch.
//!
//! Vocabulary layout, in order: colours, position words (one per grid cell,
//! naming its row and column), system words, question words. Prompt layout:
//! system words, the `grid_side²` patch colours in row-major order, then the
//! question words followed by the position word of the queried cell.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, TokenLayout};
use crate::rng;

/// Split label for training data.
pub const TRAIN_SPLIT: u64 = 1;
/// Split label for held-out evaluation data.
pub const EVAL_SPLIT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub grid_side: usize,
    pub n_colors: usize,
    pub sys_len: usize,
    pub query_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    /// 6×6 grid, 8 colours, 4 system tokens, 6 question tokens.
    fn default() -> Self {
        Self {
            grid_side: 6,
            n_colors: 8,
            sys_len: 4,
            query_len: 6,
            seed: 42,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return Err(Error::Task(format!("grid_side {} < 2", self.grid_side)));
        }
        if self.n_colors < 2 {
            return Err(Error::Task(format!("n_colors {} < 2", self.n_colors)));
        }
        if self.query_len == 0 {
            return Err(Error::Task("query_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_image(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn vocab_size(&self) -> usize {
        self.n_colors + self.n_image() + self.sys_len + (self.query_len - 1)
    }

    /// Prompt length plus the answer slot.
    pub fn sequence_len(&self) -> usize {
        self.sys_len + self.n_image() + self.query_len + 1
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.sys_len, self.n_image(), self.query_len)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        if self.vocab_size() > vocab {
            return Err(Error::Task(format!(
                "task needs {} tokens, model vocabulary has {vocab}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn color_token(&self, color: usize) -> TokenId {
        color as TokenId
    }

    /// Position word for the cell at `row`, `col`.
    pub fn cell_token(&self, row: usize, col: usize) -> TokenId {
        (self.n_colors + row * self.grid_side + col) as TokenId
    }

    fn sys_token(&self, k: usize) -> TokenId {
        (self.n_colors + self.n_image() + k) as TokenId
    }

    fn question_token(&self, k: usize) -> TokenId {
        (self.n_colors + self.n_image() + self.sys_len + k) as TokenId
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExample {
    /// Prompt followed by the gold answer token.
    pub tokens: Vec<TokenId>,
    /// Layout of the prompt (excludes the answer slot).
    pub layout: TokenLayout,
    pub gold: TokenId,
    pub queried_patch: usize,
}

impl SyntheticExample {
    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Position whose next-token prediction is the answer.
    pub fn answer_position(&self) -> usize {
        self.tokens.len() - 2
    }
}

/// Deterministic dataset for `(spec.seed, split)`.
pub fn gen_dataset(spec: &SyntheticTaskSpec, count: usize, split: u64) -> Result<Vec<SyntheticExample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Task("count must be at least 1".into()));
    }
    if spec.vocab_size() > TokenId::MAX as usize {
        return Err(Error::Task("vocabulary overflows the token id type".into()));
    }
    let mut r = rng::seeded(rng::derive(spec.seed, split));
    let n_image = spec.n_image();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tokens = Vec::with_capacity(spec.sequence_len());
        tokens.extend((0..spec.sys_len).map(|k| spec.sys_token(k)));
        let colors: Vec<usize> = (0..n_image).map(|_| r.gen_range(0..spec.n_colors)).collect();
        tokens.extend(colors.iter().map(|&c| spec.color_token(c)));
        let patch = r.gen_range(0..n_image);
        let (row, col) = (patch / spec.grid_side, patch % spec.grid_side);
        tokens.extend((0..spec.query_len - 1).map(|k| spec.question_token(k)));
        tokens.push(spec.cell_token(row, col));
        let gold = spec.color_token(colors[patch]);
        tokens.push(gold);
        out.push(SyntheticExample {
            tokens,
            layout: spec.layout(),
            gold,
            queried_patch: patch,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_example() {
        let spec = SyntheticTaskSpec::default();
        assert_eq!(
            gen_dataset(&spec, 1, TRAIN_SPLIT).unwrap(),
            gen_dataset(&spec, 1, TRAIN_SPLIT).unwrap()
        );
        assert_ne!(
            gen_dataset(&spec, 1, TRAIN_SPLIT).unwrap(),
            gen_dataset(&spec, 1, EVAL_SPLIT).unwrap()
        );
    }

    #[test]
    fn gold_matches_queried_patch() {
        let spec = SyntheticTaskSpec::default();
        for ex in gen_dataset(&spec, 1000, TRAIN_SPLIT).unwrap() {
            let img = ex.layout.img_range();
            assert_eq!(ex.tokens[img.start + ex.queried_patch], ex.gold);
            assert_eq!(ex.layout.len(), ex.prompt().len());
            let n = ex.tokens.len();
            let row = ex.queried_patch / 6;
            let col = ex.queried_patch % 6;
            assert_eq!(ex.tokens[n - 2], spec.cell_token(row, col));
        }
    }

    #[test]
    fn default_lengths() {
        let spec = SyntheticTaskSpec::default();
        let ex = &gen_dataset(&spec, 1, 7).unwrap()[0];
        assert_eq!(ex.tokens.len(), 4 + 36 + 6 + 1);
        assert_eq!(spec.vocab_size(), 8 + 36 + 4 + 5);
        assert!(spec.check_vocab(64).is_ok());
        assert!(spec.check_vocab(52).is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SyntheticTaskSpec::default();
        spec.grid_side = 1;
        assert!(gen_dataset(&spec, 1, 0).is_err());
        assert!(gen_dataset(&SyntheticTaskSpec::default(), 0, 0).is_err());
    }
}
