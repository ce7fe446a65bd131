use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{BackboneConfig, PromptConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which encoder a prompt array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Question,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Question];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Question => "question",
        }
    }

    fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Question => 1,
        }
    }
}

/// Key or value half of a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Key,
    Value,
}

impl PromptKind {
    pub const ALL: [PromptKind; 2] = [PromptKind::Key, PromptKind::Value];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Key => "key",
            PromptKind::Value => "value",
        }
    }
}

/// Address of one `(d/2) x m` prompt array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptSlot {
    pub modality: Modality,
    pub block: usize,
    pub kind: PromptKind,
}

impl PromptSlot {
    /// Stable array name used in checkpoints and messages.
    pub fn name(&self) -> String {
        format!("prompt.{}.block{}.{}", self.modality.name(), self.block, self.kind.name())
    }
}

/// Prefix prompts for both encoders, stored as one flat vector.
///
/// Arrays are laid out modality-major, then by position in `blocks`, then key
/// before value; each array is `(length / 2) x width` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    length: usize,
    width: usize,
    blocks: Vec<usize>,
    values: Vec<f64>,
}

impl PromptSet {
    pub fn zeros(cfg: &PromptConfig, backbone: &BackboneConfig) -> Result<Self> {
        cfg.validate(backbone)?;
        let mut set = Self {
            length: cfg.length,
            width: backbone.hidden_dim,
            blocks: cfg.blocks.clone(),
            values: Vec::new(),
        };
        set.values = vec![0.0; set.slots().len() * set.array_len()];
        Ok(set)
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random<R: Rng>(cfg: &PromptConfig, backbone: &BackboneConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut set = Self::zeros(cfg, backbone)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("prompt init std: {e}")))?;
        for v in &mut set.values {
            *v = normal.sample(rng);
        }
        Ok(set)
    }

    /// Rebuilds a set from a flat vector in the documented layout.
    pub fn from_flat(length: usize, width: usize, blocks: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if length % 2 != 0 {
            return Err(Error::Config(format!("prompt length {length} must be even")));
        }
        let set = Self {
            length,
            width,
            blocks,
            values: Vec::new(),
        };
        let expected = set.slots().len() * set.array_len();
        if values.len() != expected {
            return Err(Error::dim("prompt set", &[values.len()], &[expected]));
        }
        Ok(Self { values, ..set })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    /// Rows in each key or value array.
    pub fn rows(&self) -> usize {
        self.length / 2
    }

    pub fn array_len(&self) -> usize {
        self.rows() * self.width
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn slots(&self) -> Vec<PromptSlot> {
        let mut out = Vec::with_capacity(4 * self.blocks.len());
        for modality in Modality::ALL {
            for &block in &self.blocks {
                for kind in PromptKind::ALL {
                    out.push(PromptSlot { modality, block, kind });
                }
            }
        }
        out
    }

    fn offset(&self, modality: Modality, position: usize, kind: PromptKind) -> usize {
        let k = match kind {
            PromptKind::Key => 0,
            PromptKind::Value => 1,
        };
        ((modality.index() * self.blocks.len() + position) * 2 + k) * self.array_len()
    }

    /// The array for `(modality, block, kind)`, or `None` if the block is not prompted.
    pub fn array(&self, modality: Modality, block: usize, kind: PromptKind) -> Option<&[f64]> {
        let pos = self.blocks.iter().position(|&b| b == block)?;
        let start = self.offset(modality, pos, kind);
        Some(&self.values[start..start + self.array_len()])
    }

    /// Named arrays in layout order, each with its `[rows, width]` shape.
    pub fn arrays(&self) -> Vec<(String, [usize; 2], &[f64])> {
        let n = self.array_len();
        self.slots()
            .into_iter()
            .enumerate()
            .map(|(i, slot)| (slot.name(), [self.rows(), self.width], &self.values[i * n..(i + 1) * n]))
            .collect()
    }

    /// True when both sets have the same length, width and prompted blocks.
    pub fn compatible(&self, other: &PromptSet) -> bool {
        self.length == other.length && self.width == other.width && self.blocks == other.blocks
    }

    pub fn check_compatible(&self, other: &PromptSet) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::dim(
                "prompt set",
                &[self.length, self.width, self.blocks.len()],
                &[other.length, other.width, other.blocks.len()],
            ))
        }
    }

    /// Checks that the set fits `backbone`.
    pub fn check_backbone(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.width != backbone.hidden_dim {
            return Err(Error::dim("prompt width", &[self.width], &[backbone.hidden_dim]));
        }
        if let Some(b) = self.blocks.iter().find(|&&b| b >= backbone.blocks) {
            return Err(Error::Config(format!("prompted block {b} outside [0, {})", backbone.blocks)));
        }
        Ok(())
    }

    /// Splits a graph node holding the flat vector (`1 x len`) into per-block
    /// `(key, value)` pairs for both encoders.
    pub fn bind(&self, g: &mut Graph, flat: Var) -> Result<PromptVars> {
        let n = self.array_len();
        let mut image = Vec::with_capacity(self.blocks.len());
        let mut question = Vec::with_capacity(self.blocks.len());
        for modality in Modality::ALL {
            for (pos, &block) in self.blocks.iter().enumerate() {
                let mut pair = [flat; 2];
                for (slot, kind) in pair.iter_mut().zip(PromptKind::ALL) {
                    let start = self.offset(modality, pos, kind);
                    let part = g.slice_cols(flat, start, n)?;
                    *slot = g.reshape(part, self.rows(), self.width)?;
                }
                let entry = (block, pair[0], pair[1]);
                match modality {
                    Modality::Image => image.push(entry),
                    Modality::Question => question.push(entry),
                }
            }
        }
        Ok(PromptVars { image, question })
    }

    /// The flat vector as a `1 x len` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(self.values.clone())
    }
}

/// Graph handles of a bound [`PromptSet`]: `(block, key, value)` per encoder.
#[derive(Debug, Clone, Default)]
pub struct PromptVars {
    pub image: Vec<(usize, Var, Var)>,
    pub question: Vec<(usize, Var, Var)>,
}

impl PromptVars {
    pub(crate) fn for_block(list: &[(usize, Var, Var)], block: usize) -> Option<(Var, Var)> {
        list.iter().find(|(b, _, _)| *b == block).map(|&(_, k, v)| (k, v))
    }
}
