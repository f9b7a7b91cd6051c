use candle_core::{Device, DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::attention::{AttnContext, CrossAttentionSite, PairedContext};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Feature channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 32,
            channels: vec![32, 64, 128],
            groups: 8,
            heads: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("unet.channels", "need at least one level"));
        }
        let factor = 1usize << (self.channels.len() - 1);
        if self.latent_size == 0 || self.latent_size % factor != 0 {
            return Err(Error::invalid(
                "unet.latent_size",
                format!("{} not divisible by {factor}", self.latent_size),
            ));
        }
        for &c in &self.channels {
            if self.groups == 0 || c % self.groups != 0 || c % self.heads.max(1) != 0 {
                return Err(Error::invalid(
                    "unet.channels",
                    format!("{c} must divide into {} groups and {} heads", self.groups, self.heads),
                ));
            }
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        self.channels[0] * 4
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x / (x.neg()?.exp()? + 1.0)?)?)
}

/// 2x2 mean pooling.
fn downsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

/// Nearest-neighbour 2x upsampling through a broadcast.
fn upsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, h * 2, w * 2))?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            v.push((step as f64 * f).cos());
        }
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            v.push((step as f64 * f).sin());
        }
        for _ in 2 * half..dim {
            v.push(0.0);
        }
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&pb.pp("norm1"), c_in, groups.min(c_in))?,
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, 3)?,
            time: Linear::new(&pb.pp("time"), time_dim, c_out, true)?,
            norm2: GroupNorm::new(&pb.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, 3)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&pb.pp("skip"), c_in, c_out, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.time.forward(&silu(temb)?)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Everything the denoiser needs besides the noisy latent and the timestep.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub text: AttnContext,
    pub paired: Option<PairedContext>,
    pub alpha: f64,
}

/// Small U-shaped noise predictor with one cross-attention site per level on
/// the downsampling path.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, CrossAttentionSite)>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    /// `adapter_dim` installs a paired layer after every site.
    pub fn new(
        pb: &ParamBuilder,
        cfg: &UNetConfig,
        text_dim: usize,
        adapter_dim: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let td = cfg.time_dim();
        let mut down = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let lp = pb.pp("down").pp(i);
            down.push((
                ResBlock::new(&lp.pp("res"), prev, c, td, cfg.groups)?,
                CrossAttentionSite::new(&lp.pp("site"), c, text_dim, adapter_dim, cfg.heads)?,
            ));
            prev = c;
        }
        let last = *ch.last().expect("validated");
        let mid = ResBlock::new(&pb.pp("mid"), last, last, td, cfg.groups)?;
        let mut up = Vec::new();
        for i in (0..ch.len() - 1).rev() {
            up.push(ResBlock::new(
                &pb.pp("up").pp(i),
                ch[i + 1] + ch[i],
                ch[i],
                td,
                cfg.groups,
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            time1: Linear::new(&pb.pp("time1"), ch[0], td, true)?,
            time2: Linear::new(&pb.pp("time2"), td, td, true)?,
            conv_in: Conv2d::new(&pb.pp("conv_in"), cfg.latent_channels, ch[0], 3)?,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(&pb.pp("out_norm"), ch[0], cfg.groups)?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), ch[0], cfg.latent_channels, 3)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn sites(&self) -> impl Iterator<Item = &CrossAttentionSite> {
        self.down.iter().map(|(_, s)| s)
    }

    /// Predicts the noise in `x_t`, shape `(B, C, S, S)`.
    pub fn forward(&self, x: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.cfg.latent_size;
        if c != self.cfg.latent_channels || h != s || w != s {
            return Err(Error::shape(
                "denoiser input",
                format!("(B, {}, {s}, {s})", self.cfg.latent_channels),
                format!("{:?}", x.dims()),
            ));
        }
        if t.len() != b {
            return Err(Error::shape("timesteps per batch", b, t.len()));
        }
        let temb = timestep_embedding(t, self.cfg.channels[0], x.dtype(), x.device())?;
        let temb = self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        let levels = self.down.len();
        for (i, (res, site)) in self.down.iter().enumerate() {
            h = res.forward(&h, &temb)?;
            h = site_forward(site, &h, cond)?;
            if i + 1 < levels {
                skips.push(h.clone());
                h = downsample(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        for res in &self.up {
            let skip = skips.pop().expect("one skip per upsampling level");
            h = res.forward(&Tensor::cat(&[&upsample(&h)?, &skip], 1)?, &temb)?;
        }
        self.conv_out.forward(&silu(&self.out_norm.forward(&h)?)?)
    }
}

fn site_forward(site: &CrossAttentionSite, h: &Tensor, cond: &Conditioning) -> Result<Tensor> {
    let (b, c, hh, ww) = h.dims4()?;
    let tokens = h.reshape((b, c, hh * ww))?.transpose(1, 2)?.contiguous()?;
    let out = site.forward(&tokens, &cond.text, cond.paired.as_ref(), cond.alpha)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, c, hh, ww))?)
}
