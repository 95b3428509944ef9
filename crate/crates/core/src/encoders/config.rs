use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    /// Side length `H = W` in pixels.
    pub image_size: usize,
    pub channels: usize,
    /// Patches per side, `N`.
    pub patch_grid: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_grid: 4,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            proj_dim: 64,
        }
    }
}

impl ImageEncoderConfig {
    pub fn patch_size(&self) -> usize {
        self.image_size / self.patch_grid
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size() * self.patch_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_grid == 0 || self.image_size % self.patch_grid != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_grid {}",
                self.image_size, self.patch_grid
            )));
        }
        check_width("image", self.embed_dim, self.heads)?;
        if self.channels == 0 || self.mlp_ratio == 0 || self.proj_dim == 0 {
            return Err(Error::Config("image channels, mlp_ratio, proj_dim must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            max_len: 16,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            proj_dim: 64,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_width("text", self.embed_dim, self.heads)?;
        if self.vocab_size < 4 || self.max_len < 2 || self.mlp_ratio == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "text vocab_size >= 4, max_len >= 2, mlp_ratio and proj_dim > 0 required".into(),
            ));
        }
        Ok(())
    }
}

fn check_width(tower: &str, width: usize, heads: usize) -> Result<()> {
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "{tower} embed_dim {width} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.proj_dim != self.text.proj_dim {
            return Err(Error::Config(format!(
                "proj_dim differs between towers: {} vs {}",
                self.image.proj_dim, self.text.proj_dim
            )));
        }
        Ok(())
    }

    /// A very small configuration for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image: ImageEncoderConfig {
                image_size: 4,
                channels: 1,
                patch_grid: 2,
                embed_dim: 4,
                layers: 2,
                heads: 2,
                mlp_ratio: 2,
                proj_dim: 3,
            },
            text: TextEncoderConfig {
                vocab_size: 8,
                max_len: 4,
                embed_dim: 4,
                layers: 2,
                heads: 2,
                mlp_ratio: 2,
                proj_dim: 3,
            },
        }
    }
}
