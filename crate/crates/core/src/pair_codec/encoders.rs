//! Desk-scale frozen encoders.
//!
//! The sketch encoder patchifies the binary map and applies a fixed random
//! projection; the text encoder looks up words in a fixed hash-bucketed
//! embedding table and adds a sinusoidal position code. Both are frozen.

use std::hash::Hasher;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{
    EncoderHandle, Modality, SketchEncoder, SketchMap, TextEncoder, TextEncoding, TextPrompt,
    TokenSequence, Truncation,
};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamBuilder, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchEncoderConfig {
    pub name: String,
    /// Side length of the square encoder input.
    pub input_size: usize,
    pub patch: usize,
    pub dim: usize,
    /// Replicate the binary channel three times, as for an RGB encoder.
    pub rgb: bool,
}

impl Default for SketchEncoderConfig {
    fn default() -> Self {
        Self {
            name: "patch".into(),
            input_size: 64,
            patch: 8,
            dim: 64,
            rgb: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            name: "hash".into(),
            vocab: 4096,
            dim: 64,
            max_len: 77,
        }
    }
}

/// Builds a registered sketch encoder by name.
pub fn build_sketch_encoder(
    cfg: &SketchEncoderConfig,
    pb: &ParamBuilder,
) -> Result<Box<dyn SketchEncoder>> {
    match cfg.name.as_str() {
        "patch" => Ok(Box::new(PatchSketchEncoder::new(
            &pb.pp("sketch_encoder"),
            cfg.input_size,
            cfg.patch,
            cfg.dim,
            cfg.rgb,
        )?)),
        other => Err(Error::invalid(
            "sketch_encoder.name",
            format!("unknown sketch encoder `{other}` (registered: patch)"),
        )),
    }
}

/// Builds a registered text encoder by name.
pub fn build_text_encoder(cfg: &TextEncoderConfig, pb: &ParamBuilder) -> Result<Box<dyn TextEncoder>> {
    match cfg.name.as_str() {
        "hash" => Ok(Box::new(HashTextEncoder::new(
            &pb.pp("text_encoder"),
            cfg.vocab,
            cfg.dim,
            cfg.max_len,
        )?)),
        other => Err(Error::invalid(
            "text_encoder.name",
            format!("unknown text encoder `{other}` (registered: hash)"),
        )),
    }
}

/// Non-overlapping patches, flattened channel-major then row-major, times a
/// frozen `(channels * patch * patch) x dim` matrix.
#[derive(Debug, Clone)]
pub struct PatchSketchEncoder {
    projection: Tensor,
    input_size: usize,
    patch: usize,
    channels: usize,
    dim: usize,
}

impl PatchSketchEncoder {
    pub fn new(pb: &ParamBuilder, input_size: usize, patch: usize, dim: usize, rgb: bool) -> Result<Self> {
        if patch == 0 || input_size == 0 || input_size % patch != 0 {
            return Err(Error::invalid(
                "sketch_encoder.patch",
                format!("input size {input_size} is not a multiple of patch {patch}"),
            ));
        }
        let channels = if rgb { 3 } else { 1 };
        let fan_in = channels * patch * patch;
        let projection = pb.group(ParamGroup::Encoder).get(
            &[fan_in, dim],
            "projection",
            Init::Normal {
                std: 1.0 / (fan_in as f64).sqrt(),
            },
        )?;
        Ok(Self {
            projection,
            input_size,
            patch,
            channels,
            dim,
        })
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl SketchEncoder for PatchSketchEncoder {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            name: format!("patch{}", self.patch),
            output_dim: self.dim,
            frozen: true,
        }
    }

    fn input_size(&self) -> (usize, usize) {
        (self.input_size, self.input_size)
    }

    fn token_count(&self) -> usize {
        (self.input_size / self.patch).pow(2)
    }

    fn encode(&self, sketch: &SketchMap) -> Result<TokenSequence> {
        let (h, w) = (sketch.height(), sketch.width());
        if h != self.input_size || w != self.input_size {
            return Err(Error::shape(
                "sketch encoder input",
                format!("{0}x{0}", self.input_size),
                format!("{h}x{w}"),
            ));
        }
        let p = self.patch;
        let values: Vec<f64> = sketch.grid().iter().map(|&v| v as f64).collect();
        let device = self.projection.device();
        let grid = Tensor::from_vec(values, (1, h, w), device)?.to_dtype(self.projection.dtype())?;
        let grid = if self.channels == 3 {
            Tensor::cat(&[&grid, &grid, &grid], 0)?
        } else {
            grid
        };
        let patches = grid
            .reshape((self.channels, h / p, p, w / p, p))?
            .permute([1, 3, 0, 2, 4])?
            .contiguous()?
            .reshape(((h / p) * (w / p), self.channels * p * p))?;
        let tokens = patches.matmul(&self.projection)?;
        TokenSequence::new(tokens.detach(), Modality::Sketch)
    }
}

/// Reserved bucket of the begin-of-sequence token.
pub const BOS_BUCKET: usize = 0;

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Frozen hash-bucket embedding table with additive sinusoidal positions.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    table: Tensor,
    vocab: usize,
    dim: usize,
    max_len: usize,
}

impl HashTextEncoder {
    pub fn new(pb: &ParamBuilder, vocab: usize, dim: usize, max_len: usize) -> Result<Self> {
        if vocab < 2 || max_len == 0 {
            return Err(Error::invalid(
                "text_encoder",
                "vocab must be >= 2 and max_len >= 1",
            ));
        }
        let table = pb
            .group(ParamGroup::Encoder)
            .get(&[vocab, dim], "table", Init::Normal { std: 1.0 })?;
        Ok(Self {
            table,
            vocab,
            dim,
            max_len,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Bucket of a single (already tokenized) word.
    pub fn bucket(&self, word: &str) -> usize {
        let mut h = fnv::FnvHasher::default();
        h.write(word.as_bytes());
        1 + (h.finish() % (self.vocab as u64 - 1)) as usize
    }

    /// Bucket ids for the prompt, BOS first, before truncation.
    pub fn buckets(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS_BUCKET)
            .chain(tokenize(text).iter().map(|w| self.bucket(w)))
            .collect()
    }
}

/// Sinusoidal position code, `sin` on even and `cos` on odd channels.
pub(crate) fn position_code(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

impl TextEncoder for HashTextEncoder {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            name: "hash".into(),
            output_dim: self.dim,
            frozen: true,
        }
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, text: &TextPrompt) -> Result<TextEncoding> {
        if text.role() == super::PromptRole::Local && text.text().trim().is_empty() {
            return Err(Error::Empty("local text prompt".into()));
        }
        let mut ids = self.buckets(text.text());
        let truncation = (ids.len() > self.max_len).then(|| Truncation {
            original_len: ids.len(),
            kept: self.max_len,
        });
        ids.truncate(self.max_len);
        let len = ids.len();
        let device: &Device = self.table.device();
        let idx = Tensor::from_vec(ids.iter().map(|&i| i as u32).collect::<Vec<_>>(), len, device)?;
        let rows = self.table.index_select(&idx, 0)?;
        let pos: Vec<f64> = (0..len).flat_map(|i| position_code(i, self.dim)).collect();
        let pos = Tensor::from_vec(pos, (len, self.dim), device)?.to_dtype(self.table.dtype())?;
        let tokens = (rows + pos)?.detach();
        Ok(TextEncoding {
            sequence: TokenSequence::new(tokens, Modality::Text)?,
            truncation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sketch_encoder(dtype: DType) -> PatchSketchEncoder {
        let pb = ParamBuilder::seeded(0, dtype, &Device::Cpu);
        PatchSketchEncoder::new(&pb, 64, 8, 16, true).unwrap()
    }

    #[test]
    fn empty_sketch_is_finite_and_deterministic() {
        let enc = sketch_encoder(DType::F32);
        let s = SketchMap::zeros(64, 64).unwrap();
        let a = to_f64_vec(enc.encode(&s).unwrap().tokens()).unwrap();
        let b = to_f64_vec(enc.encode(&s.clone()).unwrap().tokens()).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_sketch_size_reports_shapes() {
        let enc = sketch_encoder(DType::F32);
        let err = enc.encode(&SketchMap::zeros(32, 64).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64x64") && msg.contains("32x64"), "{msg}");
    }

    /// Independent oracle: explicit loops over patches and the projection.
    #[test]
    fn patch_encoder_matches_naive_patchify_and_matmul() {
        let enc = sketch_encoder(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sketch = SketchMap::from_fn(64, 64, |_, _| rng.random_bool(0.2)).unwrap();
        let proj = enc.projection().to_vec2::<f64>().unwrap();
        let got = enc.encode(&sketch).unwrap();
        assert_eq!(got.len(), 64);
        let got = got.tokens().to_vec2::<f64>().unwrap();
        let p = 8;
        let mut token = 0;
        for py in 0..8 {
            for px in 0..8 {
                let mut flat = Vec::new();
                for _c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            flat.push(if sketch.get(py * p + dy, px * p + dx) { 1.0 } else { 0.0 });
                        }
                    }
                }
                for j in 0..16 {
                    let mut acc = 0.0;
                    for (i, v) in flat.iter().enumerate() {
                        acc += v * proj[i][j];
                    }
                    assert!((acc - got[token][j]).abs() < 1e-12);
                }
                token += 1;
            }
        }
    }

    fn text_encoder(max_len: usize) -> HashTextEncoder {
        let pb = ParamBuilder::seeded(3, DType::F64, &Device::Cpu);
        HashTextEncoder::new(&pb, 512, 8, max_len).unwrap()
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let enc = text_encoder(77);
        let t = TextPrompt::local("A cotton shirt").unwrap();
        let a = to_f64_vec(enc.encode(&t).unwrap().sequence.tokens()).unwrap();
        let b = to_f64_vec(enc.encode(&t).unwrap().sequence.tokens()).unwrap();
        assert_eq!(a, b);
    }

    /// Oracle: direct table lookup per token plus the position code.
    #[test]
    fn text_encoding_matches_direct_lookup_and_differs_across_strings() {
        let enc = text_encoder(77);
        let table = enc.table().to_vec2::<f64>().unwrap();
        for text in ["A cotton shirt", "Slim-fit trousers with subtle stitching"] {
            let got = enc
                .encode(&TextPrompt::local(text).unwrap())
                .unwrap()
                .sequence
                .tokens()
                .to_vec2::<f64>()
                .unwrap();
            let mut words = vec![BOS_BUCKET];
            for w in text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
                if !w.is_empty() {
                    let mut h = fnv::FnvHasher::default();
                    h.write(w.as_bytes());
                    words.push(1 + (h.finish() % 511) as usize);
                }
            }
            assert_eq!(got.len(), words.len());
            for (i, &b) in words.iter().enumerate() {
                for j in 0..8 {
                    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / 8.0);
                    let pe = if j % 2 == 0 { (i as f64 * freq).sin() } else { (i as f64 * freq).cos() };
                    assert!((got[i][j] - (table[b][j] + pe)).abs() < 1e-12);
                }
            }
        }
        let a = to_f64_vec(enc.encode(&TextPrompt::local("A cotton shirt").unwrap()).unwrap().sequence.tokens()).unwrap();
        let b = to_f64_vec(enc.encode(&TextPrompt::local("A wool coat").unwrap()).unwrap().sequence.tokens()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn long_text_truncates_to_max_len_with_record() {
        let enc = text_encoder(5);
        let out = enc
            .encode(&TextPrompt::local("one two three four five six seven").unwrap())
            .unwrap();
        assert_eq!(out.sequence.len(), 5);
        assert_eq!(
            out.truncation,
            Some(Truncation {
                original_len: 8,
                kept: 5
            })
        );
    }

    #[test]
    fn empty_local_text_is_rejected_but_empty_global_encodes() {
        assert!(TextPrompt::local("   ").is_err());
        let enc = text_encoder(5);
        let out = enc.encode(&TextPrompt::global("")).unwrap();
        assert_eq!(out.sequence.len(), 1);
    }

    #[test]
    fn registry_rejects_unknown_names() {
        let pb = ParamBuilder::seeded(0, DType::F32, &Device::Cpu);
        let cfg = SketchEncoderConfig {
            name: "dino".into(),
            ..Default::default()
        };
        assert!(build_sketch_encoder(&cfg, &pb).is_err());
        assert!(build_text_encoder(&TextEncoderConfig::default(), &pb).is_ok());
    }
}
