use std::collections::HashMap;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::attention::{AttnContext, PairedContext};
use super::codec::LatentCodec;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::{Conditioning, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamStore, MASKED};
use crate::pair_codec::{
    build_sketch_encoder, build_text_encoder, encode_sketch, encode_text, ConditionPair, Projector,
    SketchEncoder, SketchEncoderConfig, TextEncoder, TextEncoderConfig, TextPrompt, TokenSequence,
};
use crate::pair_former::{
    build_condition_tensor, mean_pooling_tensor, no_pooling_tensor, PairFormerConfig, PairFormerParams,
};

pub const DEFAULT_GLOBAL_TEXT: &str = "A picture of a model posing, high-quality, 4k";

/// How the encoded pairs are turned into the paired layers' key/value tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningVariant {
    #[default]
    PairFormer,
    NoPooling,
    MeanPooling,
}

impl FromStr for ConditioningVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair_former" => Ok(Self::PairFormer),
            "no_pooling" => Ok(Self::NoPooling),
            "mean_pooling" => Ok(Self::MeanPooling),
            other => Err(Error::invalid(
                "variant",
                format!("unknown variant `{other}` (pair_former, no_pooling, mean_pooling)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Seed for every freshly initialized parameter.
    pub seed: u64,
    pub precision: Precision,
    pub codec: LatentCodec,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub sketch_encoder: SketchEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub pair_former: PairFormerConfig,
    pub variant: ConditioningVariant,
    /// `false` builds the base denoiser alone, with no paired layers.
    pub adapter: bool,
    pub global_text: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            codec: LatentCodec::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            sketch_encoder: SketchEncoderConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            pair_former: PairFormerConfig::default(),
            variant: ConditioningVariant::PairFormer,
            adapter: true,
            global_text: DEFAULT_GLOBAL_TEXT.into(),
        }
    }
}

impl ModelConfig {
    /// A very small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            codec: LatentCodec::Identity,
            unet: UNetConfig {
                latent_channels: 3,
                latent_size: 16,
                channels: vec![8, 16, 32],
                groups: 4,
                heads: 2,
            },
            sketch_encoder: SketchEncoderConfig {
                input_size: 32,
                patch: 8,
                dim: 32,
                ..Default::default()
            },
            text_encoder: TextEncoderConfig {
                vocab: 512,
                dim: 32,
                max_len: 16,
                ..Default::default()
            },
            pair_former: PairFormerConfig {
                k: 4,
                d: 16,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// The same configuration without the adapter.
    pub fn baseline(&self) -> Self {
        Self {
            adapter: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.unet.latent_channels != self.codec.latent_channels() {
            return Err(Error::invalid(
                "unet.latent_channels",
                format!(
                    "{} does not match the codec's {} channels",
                    self.unet.latent_channels,
                    self.codec.latent_channels()
                ),
            ));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.unet.latent_size
    }
}

/// Encoders, adapter and denoiser, with every parameter in one store.
pub struct LotsModel {
    cfg: ModelConfig,
    sketch_encoder: Box<dyn SketchEncoder>,
    text_encoder: Box<dyn TextEncoder>,
    adapter: Option<Adapter>,
    unet: UNet,
    schedule: NoiseSchedule,
    store: ParamStore,
}

struct Adapter {
    sketch_proj: Projector,
    text_proj: Projector,
    pair_former: PairFormerParams,
}

impl std::fmt::Debug for LotsModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LotsModel")
            .field("adapter", &self.adapter.is_some())
            .field("params", &self.store.len())
            .finish()
    }
}

impl LotsModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let pb = ParamBuilder::seeded(cfg.seed, cfg.precision.dtype(), &Device::Cpu);
        Self::build(cfg, pb)
    }

    /// Builds the model from a flat map of named tensors.
    pub fn from_tensors(cfg: &ModelConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        let pb = ParamBuilder::from_tensors(tensors, cfg.precision.dtype(), &Device::Cpu);
        Self::build(cfg, pb)
    }

    fn build(cfg: &ModelConfig, pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let sketch_encoder = build_sketch_encoder(&cfg.sketch_encoder, &pb)?;
        let text_encoder = build_text_encoder(&cfg.text_encoder, &pb)?;
        let d = cfg.pair_former.d;
        let adapter = if cfg.adapter {
            let ap = pb.pp("adapter");
            Some(Adapter {
                sketch_proj: Projector::new(&ap.pp("sketch_proj"), cfg.sketch_encoder.dim, d)?,
                text_proj: Projector::new(&ap.pp("text_proj"), cfg.text_encoder.dim, d)?,
                pair_former: PairFormerParams::new(&ap.pp("pair_former"), &cfg.pair_former)?,
            })
        } else {
            None
        };
        let unet = UNet::new(
            &pb.pp("unet"),
            &cfg.unet,
            cfg.text_encoder.dim,
            cfg.adapter.then_some(d),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            sketch_encoder,
            text_encoder,
            adapter,
            unet,
            schedule: NoiseSchedule::new(&cfg.schedule)?,
            store: pb.store(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn codec(&self) -> LatentCodec {
        self.cfg.codec
    }

    pub fn dtype(&self) -> DType {
        self.cfg.precision.dtype()
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn pair_former(&self) -> Option<&PairFormerParams> {
        self.adapter.as_ref().map(|a| &a.pair_former)
    }

    /// Encodes and projects one pair's sketch and text to the adapter width.
    pub fn encode_pair(&self, pair: &ConditionPair) -> Result<(TokenSequence, TokenSequence)> {
        let adapter = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model has no adapter".into()))?;
        let (h, w) = self.sketch_encoder.input_size();
        let sketch = pair.sketch.resize(h, w)?;
        let hs = encode_sketch(&sketch, self.sketch_encoder.as_ref())?;
        let ht = encode_text(&pair.text, self.text_encoder.as_ref())?.sequence;
        Ok((adapter.sketch_proj.project(&hs)?, adapter.text_proj.project(&ht)?))
    }

    /// Raw global-text tokens `(L, text_dim)` for the host attention.
    pub fn global_tokens(&self, text: &TextPrompt) -> Result<Tensor> {
        Ok(encode_text(text, self.text_encoder.as_ref())?
            .sequence
            .tokens()
            .to_dtype(self.dtype())?)
    }

    /// Key/value tokens `(L, d)` for the paired layers under the configured
    /// variant; `None` when there are no pairs or no adapter.
    pub fn condition_tokens(&self, pairs: &[ConditionPair]) -> Result<Option<Tensor>> {
        if pairs.is_empty() || self.adapter.is_none() {
            return Ok(None);
        }
        let encoded = pairs
            .iter()
            .map(|p| self.encode_pair(p))
            .collect::<Result<Vec<_>>>()?;
        self.condition_tokens_from(self.cfg.variant, &encoded)
    }

    /// Routes already-projected pairs through `variant` unchanged.
    pub fn condition_tokens_from(
        &self,
        variant: ConditioningVariant,
        encoded: &[(TokenSequence, TokenSequence)],
    ) -> Result<Option<Tensor>> {
        if encoded.is_empty() {
            return Ok(None);
        }
        match variant {
            ConditioningVariant::PairFormer => {
                let pf = self
                    .pair_former()
                    .ok_or_else(|| Error::Unsupported("model has no adapter".into()))?;
                build_condition_tensor(encoded, pf)?.flattened()
            }
            ConditioningVariant::NoPooling => no_pooling_tensor(encoded),
            ConditioningVariant::MeanPooling => Ok(Some(mean_pooling_tensor(encoded)?.tokens)),
        }
    }

    /// Conditioning for a single sample (batch of one, no masks).
    pub fn conditioning(&self, pairs: &[ConditionPair], global: &TextPrompt, alpha: f64) -> Result<Conditioning> {
        let text = self.global_tokens(global)?.unsqueeze(0)?;
        let paired = self
            .condition_tokens(pairs)?
            .map(|p| -> Result<PairedContext> { Ok(PairedContext::new(p.unsqueeze(0)?)) })
            .transpose()?;
        Ok(Conditioning {
            text: AttnContext::new(text),
            paired,
            alpha,
        })
    }

    /// Stacks per-sample `(condition tokens, global tokens)` into one batch,
    /// padding with masked zero rows where lengths differ.
    pub fn batch_conditioning(&self, items: &[(Option<Tensor>, Tensor)], alpha: f64) -> Result<Conditioning> {
        let text = pad_batch(&items.iter().map(|(_, t)| Some(t.clone())).collect::<Vec<_>>())?
            .expect("global tokens always present");
        let any_paired = items.iter().any(|(p, _)| p.is_some());
        let paired = if any_paired {
            let padded = pad_batch(&items.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>())?
                .expect("at least one row");
            let gate = if items.iter().all(|(p, _)| p.is_some()) {
                None
            } else {
                let g: Vec<f64> = items.iter().map(|(p, _)| if p.is_some() { 1.0 } else { 0.0 }).collect();
                Some(Tensor::from_vec(g, (items.len(), 1, 1), &self.device())?.to_dtype(self.dtype())?)
            };
            Some(PairedContext { ctx: padded, gate })
        } else {
            None
        };
        Ok(Conditioning {
            text,
            paired,
            alpha,
        })
    }

    /// Noise prediction for `(B, C, S, S)` latents.
    pub fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.unet.forward(x_t, t, cond)
    }

    /// The unconditional branch used for classifier-free guidance: empty
    /// global text and no pairs.
    pub fn unconditional(&self) -> Result<Conditioning> {
        self.conditioning(&[], &TextPrompt::global(""), 0.0)
    }
}

/// Pads `(L_i, D)` rows to `(B, max L, D)`. Missing rows become a single
/// masked zero token. The mask is omitted when no padding was needed.
fn pad_batch(rows: &[Option<Tensor>]) -> Result<Option<AttnContext>> {
    let Some(first) = rows.iter().flatten().next() else {
        return Ok(None);
    };
    let (dtype, device, width) = (first.dtype(), first.device().clone(), first.dims()[1]);
    let max_len = rows.iter().flatten().map(|t| t.dims()[0]).max().unwrap_or(1).max(1);
    let mut padded = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len() * max_len);
    let mut needs_mask = false;
    for row in rows {
        let len = row.as_ref().map_or(0, |t| t.dims()[0]);
        if len != max_len {
            needs_mask = true;
        }
        let t = match row {
            Some(t) if len == max_len => t.clone(),
            Some(t) => Tensor::cat(&[t, &Tensor::zeros((max_len - len, width), dtype, &device)?], 0)?,
            None => Tensor::zeros((max_len, width), dtype, &device)?,
        };
        padded.push(t);
        // A row without tokens keeps one unmasked zero so softmax stays finite;
        // its output is removed by the gate.
        let live = if len == 0 { 1 } else { len };
        mask.extend((0..max_len).map(|i| if i < live { 0.0 } else { MASKED }));
    }
    let tokens = Tensor::stack(&padded, 0)?;
    let mask = if needs_mask {
        Some(Tensor::from_vec(mask, (rows.len(), max_len), &device)?.to_dtype(dtype)?)
    } else {
        None
    };
    Ok(Some(AttnContext { tokens, mask }))
}
