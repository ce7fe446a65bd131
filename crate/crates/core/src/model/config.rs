use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the frozen two-encoder backbone and of the answer space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Side length of the square input image.
    pub image_grid: usize,
    /// Side length of the square image patches turned into tokens.
    pub patch_size: usize,
    pub question_vocab: usize,
    pub max_question_len: usize,
    pub answer_count: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            blocks: 4,
            heads: 4,
            image_grid: 8,
            patch_size: 4,
            question_vocab: 32,
            max_question_len: 8,
            answer_count: 8,
            mlp_ratio: 2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("image_grid", self.image_grid),
            ("patch_size", self.patch_size),
            ("question_vocab", self.question_vocab),
            ("max_question_len", self.max_question_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.image_grid % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_grid {} is not a multiple of patch_size {}",
                self.image_grid, self.patch_size
            )));
        }
        if self.answer_count < 2 {
            return Err(Error::Config("answer_count must be at least 2".into()));
        }
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        let side = self.image_grid / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn image_pixels(&self) -> usize {
        self.image_grid * self.image_grid
    }

    /// Width of the fused feature fed to the answer head.
    pub fn feature_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Prefix prompt shape shared by every client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Total prompt length `d`; split evenly between keys and values.
    pub length: usize,
    pub blocks: Vec<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: 8,
            blocks: vec![0, 1, 2, 3],
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.length % 2 != 0 {
            return Err(Error::Config(format!("prompt length {} must be even", self.length)));
        }
        if let Some(b) = self.blocks.iter().find(|&&b| b >= backbone.blocks) {
            return Err(Error::Config(format!(
                "prompted block {b} outside [0, {})",
                backbone.blocks
            )));
        }
        let mut sorted = self.blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.blocks.len() {
            return Err(Error::Config("prompted blocks contain duplicates".into()));
        }
        Ok(())
    }
}

/// Answer head width and regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
