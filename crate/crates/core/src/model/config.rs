use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{check_rho, MaskPolicy, DEFAULT_RHO};

/// Which embeddings feed the key-token response intensity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensitySource {
    /// Visual-encoder outputs (patch projection plus 2-D patch position).
    EncoderOutput,
    /// Decoder input: encoder output plus the flattened sequence position.
    InputEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Side length of a square image grid, in cells.
    pub grid_size: usize,
    /// Side length of a square patch, in cells.
    pub patch_size: usize,
    /// Cell code `c > 0` is the object `(color, shape) = ((c-1) / shapes, (c-1) % shapes)`;
    /// code 0 is an empty cell.
    pub colors: usize,
    pub shapes: usize,
    pub max_len: usize,
    /// Largest number of images in one prompt.
    pub max_images: usize,
    pub policy: MaskPolicy,
    pub rho: f64,
    pub intensity: IntensitySource,
    /// Generation stops when this token is produced.
    pub end_token: u32,
    /// Id stored at visual positions of a [`TokenSequence`](crate::sequence::TokenSequence).
    pub image_token: u32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab: 64,
            grid_size: 3,
            patch_size: 1,
            colors: 4,
            shapes: 4,
            max_len: 64,
            max_images: 4,
            policy: MaskPolicy::CROSS_ATTENTIVE,
            rho: DEFAULT_RHO,
            intensity: IntensitySource::EncoderOutput,
            end_token: 1,
            image_token: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_side(&self) -> usize {
        self.grid_size / self.patch_size
    }

    /// Visual tokens per image.
    pub fn tokens_per_image(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Number of distinct cell codes, the empty cell included.
    pub fn cell_codes(&self) -> usize {
        1 + self.colors * self.shapes
    }

    /// Per-cell encoder features: an empty flag, a color one-hot, a shape one-hot.
    pub fn cell_features(&self) -> usize {
        1 + self.colors + self.shapes
    }

    /// Width of the content vector of one patch.
    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * self.cell_features()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers < 2 {
            return bad(format!("model needs at least 2 layers, got {}", self.layers));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.vocab == 0 || self.max_len == 0 || self.max_images == 0 || self.colors == 0 || self.shapes == 0 {
            return bad("d_ff, vocab, max_len, max_images, colors and shapes must be positive".into());
        }
        if self.cell_codes() > 256 {
            return bad(format!("{} cell codes do not fit a byte", self.cell_codes()));
        }
        if self.patch_size == 0 || self.grid_size == 0 || self.grid_size % self.patch_size != 0 {
            return bad(format!(
                "grid size {} must be a positive multiple of patch size {}",
                self.grid_size, self.patch_size
            ));
        }
        if self.end_token as usize >= self.vocab || self.image_token as usize >= self.vocab {
            return bad("special tokens must lie inside the vocabulary".into());
        }
        check_rho(self.rho)
    }
}
