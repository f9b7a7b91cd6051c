//! Sketch and text inputs, the frozen modality encoders, and the trainable
//! projectors that map both modalities into the shared adapter width.

mod encoders;
mod projector;
mod sketch;

pub use encoders::{
    build_sketch_encoder, build_text_encoder, tokenize, PatchSketchEncoder, SketchEncoderConfig,
    HashTextEncoder, TextEncoderConfig, BOS_BUCKET,
};
pub use projector::Projector;
pub use sketch::SketchMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a prompt describes one garment or the whole picture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextPrompt {
    text: String,
    role: PromptRole,
}

impl TextPrompt {
    /// A per-garment description. Must contain non-whitespace text.
    pub fn local(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Empty("local text prompt".into()));
        }
        Ok(Self {
            text,
            role: PromptRole::Local,
        })
    }

    /// An outfit-level prompt. May be empty (used as the unconditional prompt).
    pub fn global(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            role: PromptRole::Global,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }
}

/// One localized conditioning unit: a garment sketch and its description.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditionPair {
    pub sketch: SketchMap,
    pub text: TextPrompt,
}

impl ConditionPair {
    pub fn new(sketch: SketchMap, text: TextPrompt) -> Result<Self> {
        if text.role() != PromptRole::Local {
            return Err(Error::invalid("text", "condition pairs take a local prompt"));
        }
        Ok(Self { sketch, text })
    }

    /// Checks the sketch against the canvas the pair is meant for.
    pub fn check_canvas(&self, height: usize, width: usize) -> Result<()> {
        if self.sketch.height() != height || self.sketch.width() != width {
            return Err(Error::shape(
                "condition pair canvas",
                format!("{height}x{width}"),
                format!("{}x{}", self.sketch.height(), self.sketch.width()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Sketch,
    Text,
}

/// `L x d` token matrix produced by an encoder or a projector.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    tokens: Tensor,
    modality: Modality,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, modality: Modality) -> Result<Self> {
        let dims = tokens.dims();
        if dims.len() != 2 {
            return Err(Error::shape("token sequence", "rank 2 (L, d)", format!("{dims:?}")));
        }
        Ok(Self { tokens, modality })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }
}

/// Descriptor of a frozen encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderHandle {
    pub name: String,
    pub output_dim: usize,
    pub frozen: bool,
}

/// Record emitted when a text is cut to the encoder's maximum length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub original_len: usize,
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub sequence: TokenSequence,
    pub truncation: Option<Truncation>,
}

/// Frozen sketch encoder: a pure function of the sketch.
pub trait SketchEncoder: Send + Sync {
    fn handle(&self) -> EncoderHandle;
    /// Expected `(height, width)` of input sketches.
    fn input_size(&self) -> (usize, usize);
    fn token_count(&self) -> usize;
    fn encode(&self, sketch: &SketchMap) -> Result<TokenSequence>;
}

/// Frozen text encoder: a pure function of the prompt text.
pub trait TextEncoder: Send + Sync {
    fn handle(&self) -> EncoderHandle;
    fn max_len(&self) -> usize;
    fn encode(&self, text: &TextPrompt) -> Result<TextEncoding>;
}

pub fn encode_sketch(sketch: &SketchMap, enc: &dyn SketchEncoder) -> Result<TokenSequence> {
    enc.encode(sketch)
}

pub fn encode_text(text: &TextPrompt, enc: &dyn TextEncoder) -> Result<TextEncoding> {
    let out = enc.encode(text)?;
    if let Some(t) = out.truncation {
        log::warn!(
            "text truncated from {} to {} tokens by encoder {}",
            t.original_len,
            t.kept,
            enc.handle().name
        );
    }
    Ok(out)
}

pub fn project(tokens: &TokenSequence, proj: &Projector) -> Result<TokenSequence> {
    proj.project(tokens)
}
