use alloc::format;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Architecture and initialisation of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub init_seed: u64,
    pub init_std: f64,
}

impl ModelConfig {
    /// The reference laboratory model: 8 layers, 4 heads, width 64, FFN 128.
    pub fn reference() -> Self {
        Self {
            layers: 8,
            heads: 4,
            hidden: 64,
            ffn: 128,
            vocab: 64,
            max_seq: 48,
            init_seed: 42,
            init_std: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.layers < 2 {
            return fail(format!("layers = {} (need at least 2)", self.layers));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn < self.hidden {
            return fail(format!("ffn {} < hidden {}", self.ffn, self.hidden));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return fail(format!(
                "vocab {} / max_seq {} must be positive",
                self.vocab, self.max_seq
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std {}", self.init_std));
        }
        Ok(())
    }
}

/// Which segment a sequence position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    System,
    Image,
    Instruction,
}

/// Contiguous partition of a prompt into system prefix, image tokens and
/// instruction tokens, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    pub sys: usize,
    pub img: usize,
    pub ins: usize,
}

impl TokenLayout {
    pub fn new(sys: usize, img: usize, ins: usize) -> Self {
        Self { sys, img, ins }
    }

    pub fn len(&self) -> usize {
        self.sys + self.img + self.ins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sys_range(&self) -> Range<usize> {
        0..self.sys
    }

    pub fn img_range(&self) -> Range<usize> {
        self.sys..self.sys + self.img
    }

    pub fn ins_range(&self) -> Range<usize> {
        self.sys + self.img..self.len()
    }

    /// Segment of position `i`; positions past the prompt (generated tokens)
    /// count as instruction-side text.
    pub fn segment(&self, i: usize) -> Segment {
        if i < self.sys {
            Segment::System
        } else if i < self.sys + self.img {
            Segment::Image
        } else {
            Segment::Instruction
        }
    }

    pub fn is_image(&self, i: usize) -> bool {
        self.img_range().contains(&i)
    }

    pub fn is_instruction(&self, i: usize) -> bool {
        self.ins_range().contains(&i)
    }

    pub fn check_len(&self, seq_len: usize) -> Result<()> {
        if self.len() != seq_len {
            return Err(Error::Layout(format!(
                "layout covers {} positions, sequence has {}",
                self.len(),
                seq_len
            )));
        }
        Ok(())
    }
}
