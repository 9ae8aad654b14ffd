//! Model access boundary.
//!
//! Everything the adaptation loop needs from a captioning model or an
//! image-text dual encoder goes through [`GeneratorBackend`] and
//! [`EncoderBackend`]. The crate ships a deterministic toy implementation
//! ([`toy`]) that the tests and acceptance suite run against.
//!
//! A real-model backend implements the same two traits out of tree:
//!
//! * `generate` must be a pure function of `(image, prompt, params, adapter)`,
//!   including `params.seed` in stochastic mode. An empty prompt means the
//!   model receives only the image.
//! * `loss_and_grad` returns the mean token cross-entropy of `target` given
//!   `(image, prompt)` and its gradient with respect to every adapter matrix,
//!   packed into an [`AdapterState`] of identical structure. Base weights are
//!   never written.
//! * `encode_image` / `encode_text` return finite vectors of one fixed
//!   dimension; normalization happens in the scorer. `truncate_text` applies
//!   the encoder tokenizer's context window.

pub mod sampling;
pub mod toy;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterState, ModelDims};

/// An RGB image with 8-bit channels stored row-major, plus an identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub id: String,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageInput {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("image dimensions must be at least 1x1"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Arity {
                expected: height * width * 3,
                got: pixels.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(
        id: impl Into<String>,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(id, height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn with_pixels(&self, pixels: Vec<u8>) -> Result<Self> {
        Self::new(self.id.clone(), self.height, self.width, pixels)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb_image(id: impl Into<String>, img: &RgbImage) -> Result<Self> {
        Self::new(
            id,
            img.height() as usize,
            img.width() as usize,
            img.as_raw().clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    Greedy,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingParams {
    pub mode: DecodingMode,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            mode: DecodingMode::Stochastic,
            temperature: 0.8,
            top_p: 0.9,
            max_tokens: 512,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            mode: DecodingMode::Greedy,
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be at least 1"));
        }
        if self.mode == DecodingMode::Stochastic {
            if !(self.temperature.is_finite() && self.temperature > 0.0) {
                return Err(Error::config("temperature must be positive"));
            }
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(Error::config("top_p must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

pub trait GeneratorBackend: Send + Sync {
    fn model_dims(&self) -> &ModelDims;

    fn generate(
        &self,
        image: &ImageInput,
        prompt: &str,
        params: &DecodingParams,
        adapter: &AdapterState,
    ) -> Result<String>;

    /// Mean cross-entropy of `target` and its gradient w.r.t. the adapter.
    fn loss_and_grad(
        &self,
        image: &ImageInput,
        prompt: &str,
        target: &str,
        adapter: &AdapterState,
    ) -> Result<(f64, AdapterState)>;

    fn loss(&self, image: &ImageInput, prompt: &str, target: &str, adapter: &AdapterState) -> Result<f64> {
        self.loss_and_grad(image, prompt, target, adapter).map(|(l, _)| l)
    }

    /// Serialized frozen parameters, for immutability checks.
    fn base_fingerprint(&self) -> Vec<u8>;
}

pub trait EncoderBackend: Send + Sync {
    fn encode_image(&self, image: &ImageInput) -> Result<Vec<f64>>;

    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;

    fn text_token_limit(&self) -> usize;

    /// Clip `text` to the encoder context window. Returns the possibly
    /// shortened text and whether anything was removed. The default counts
    /// whitespace-separated tokens.
    fn truncate_text(&self, text: &str) -> (String, bool) {
        let limit = self.text_token_limit();
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() <= limit {
            (text.to_string(), false)
        } else {
            (words[..limit].join(" "), true)
        }
    }
}

/// Borrowed pair of backends handed to the adaptation loop.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub generator: &'a dyn GeneratorBackend,
    pub encoder: &'a dyn EncoderBackend,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_validation() {
        assert!(ImageInput::new("x", 0, 4, vec![]).is_err());
        assert!(ImageInput::new("x", 2, 2, vec![0; 11]).is_err());
        let img = ImageInput::from_fn("x", 2, 3, |y, x, c| (y * 100 + x * 10 + c) as u8).unwrap();
        assert_eq!(img.at(1, 2, 1), 121);
        let back = ImageInput::from_rgb_image("x", &img.to_rgb_image()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn decoding_validation() {
        assert!(DecodingParams::default().validate().is_ok());
        assert!(DecodingParams::greedy(0).validate().is_err());
        let p = DecodingParams {
            top_p: 0.0,
            ..DecodingParams::default()
        };
        assert!(p.validate().is_err());
        let g = DecodingParams {
            temperature: -1.0,
            ..DecodingParams::greedy(4)
        };
        assert!(g.validate().is_ok());
    }
}
