use std::path::Path;

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attention::check_alpha;
use super::model::LotsModel;
use super::unet::Conditioning;
use crate::error::{Error, Result};
use crate::pair_codec::{ConditionPair, TextPrompt};

/// The localized conditions of one generation request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConditionSet {
    pairs: Vec<ConditionPair>,
}

impl ConditionSet {
    /// All sketches must share one canvas size.
    pub fn new(pairs: Vec<ConditionPair>) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let (h, w) = (first.sketch.height(), first.sketch.width());
            for p in &pairs[1..] {
                p.check_canvas(h, w)?;
            }
        }
        Ok(Self { pairs })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[ConditionPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs sorted by content. Sampling uses this order, so any permutation
    /// of the same pairs yields the same image bit for bit.
    pub fn canonical(&self) -> Vec<ConditionPair> {
        let mut v = self.pairs.clone();
        v.sort_by(|a, b| {
            a.text
                .text()
                .cmp(b.text.text())
                .then_with(|| a.sketch.cmp(&b.sketch))
        });
        v
    }

    /// Order-independent digest of the pairs and the global prompt.
    pub fn digest(&self, global: &TextPrompt) -> String {
        let mut h = Sha256::new();
        h.update(global.text().as_bytes());
        for p in self.canonical() {
            h.update([0u8]);
            h.update(p.text.text().as_bytes());
            h.update([0u8]);
            h.update(p.sketch.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub steps: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Classifier-free guidance on the text path; `1.0` disables the extra pass.
    pub guidance_scale: f64,
    pub run_id: Option<String>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            alpha: 1.0,
            seed: 0,
            guidance_scale: 1.0,
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: Option<String>,
    pub seed: u64,
    pub alpha: f64,
    pub steps: usize,
    pub condition_digest: String,
}

/// A `3 x H x W` image in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub provenance: Provenance,
}

impl GeneratedImage {
    pub fn from_tensor(t: &Tensor, provenance: Provenance) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("generated image channels", 3, c));
        }
        let pixels = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image", "non-finite pixel"));
        }
        Ok(Self {
            height: h,
            width: w,
            pixels,
            provenance,
        })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Digest of the exact pixel values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Deterministic DDIM sampling (eta = 0) from seeded Gaussian noise.
pub fn sample(
    model: &LotsModel,
    conditions: &ConditionSet,
    global: &TextPrompt,
    opts: &SampleOptions,
) -> Result<GeneratedImage> {
    check_alpha(opts.alpha)?;
    if !opts.guidance_scale.is_finite() || opts.guidance_scale < 1.0 {
        return Err(Error::invalid("guidance_scale", "must be a finite value >= 1"));
    }
    let schedule = model.schedule();
    let timesteps = schedule.sampling_timesteps(opts.steps)?;
    let pairs = conditions.canonical();
    let cond = model.conditioning(&pairs, global, opts.alpha)?;
    let uncond: Option<Conditioning> = if opts.guidance_scale > 1.0 {
        Some(model.unconditional()?)
    } else {
        None
    };

    let cfg = model.config();
    let (c, s) = (cfg.unet.latent_channels, cfg.unet.latent_size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise: Vec<f64> = (0..c * s * s).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = Tensor::from_vec(noise, (1, c, s, s), &model.device())?.to_dtype(model.dtype())?;

    for (i, &t) in timesteps.iter().enumerate() {
        let mut eps = model.predict_noise(&x, &[t], &cond)?;
        if let Some(u) = &uncond {
            let eps_u = model.predict_noise(&x, &[t], u)?;
            eps = (&eps_u + ((eps - &eps_u)? * opts.guidance_scale)?)?;
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = timesteps.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        x = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?.detach();
    }
    let img = model.codec().decode(&x)?.squeeze(0)?;
    GeneratedImage::from_tensor(
        &img,
        Provenance {
            run_id: opts.run_id.clone(),
            seed: opts.seed,
            alpha: opts.alpha,
            steps: opts.steps,
            condition_digest: conditions.digest(global),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;
    use crate::nn::ParamGroup;
    use crate::pair_codec::SketchMap;
    use rand::Rng;

    fn pair(text: &str, seed: u64, size: usize) -> ConditionPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = SketchMap::from_fn(size, size, |_, _| rng.random_bool(0.1)).unwrap();
        ConditionPair::new(s, TextPrompt::local(text).unwrap()).unwrap()
    }

    fn activated(cfg: &ModelConfig) -> LotsModel {
        let m = LotsModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // give the zero-initialized paired outputs some weight
        for (name, var) in m.store().vars_in(ParamGroup::PairedAttention) {
            if name.contains(".out.") {
                let t = var.as_tensor();
                let v: Vec<f32> = (0..t.elem_count()).map(|_| rng.random_range(-0.2..0.2)).collect();
                var.set(&Tensor::from_vec(v, t.shape(), t.device()).unwrap()).unwrap();
            }
        }
        m
    }

    fn opts(steps: usize, alpha: f64, seed: u64) -> SampleOptions {
        SampleOptions {
            steps,
            alpha,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn mixed_canvas_rejected() {
        assert!(ConditionSet::new(vec![pair("a top", 0, 16), pair("a skirt", 1, 32)]).is_err());
    }

    #[test]
    fn deterministic_and_alpha_zero_matches_baseline() {
        let cfg = ModelConfig::tiny();
        let m = activated(&cfg);
        let base = LotsModel::new(&cfg.baseline()).unwrap();
        let set = ConditionSet::new(vec![pair("A red top", 1, 32), pair("Blue pants", 2, 32)]).unwrap();
        let g = TextPrompt::global(cfg.global_text.clone());
        let a = sample(&m, &set, &g, &opts(4, 1.0, 3)).unwrap();
        let b = sample(&m, &set, &g, &opts(4, 1.0, 3)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.pixels.len(), 3 * 16 * 16);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));

        let zero = sample(&m, &set, &g, &opts(4, 0.0, 3)).unwrap();
        let baseline = sample(&base, &set, &g, &opts(4, 0.0, 3)).unwrap();
        assert_eq!(zero.pixels, baseline.pixels);
        assert_ne!(a.pixels, zero.pixels);

        let err = sample(&m, &set, &g, &opts(4, 1.2, 3)).unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(sample(&m, &set, &g, &opts(0, 1.0, 3)).is_err());
    }

    #[test]
    fn pair_order_does_not_matter_and_counts_up_to_six() {
        let cfg = ModelConfig::tiny();
        let m = activated(&cfg);
        let g = TextPrompt::global(cfg.global_text.clone());
        let ps: Vec<_> = ["A red top", "Blue pants", "A pair of shoes", "A coat", "A scarf", "A belt"]
            .iter()
            .enumerate()
            .map(|(i, t)| pair(t, i as u64, 32))
            .collect();
        let fwd = ConditionSet::new(ps[..3].to_vec()).unwrap();
        let rev = ConditionSet::new(vec![ps[2].clone(), ps[0].clone(), ps[1].clone()]).unwrap();
        let a = sample(&m, &fwd, &g, &opts(3, 1.0, 9)).unwrap();
        let b = sample(&m, &rev, &g, &opts(3, 1.0, 9)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.provenance.condition_digest, b.provenance.condition_digest);
        for n in 0..=6 {
            let set = ConditionSet::new(ps[..n].to_vec()).unwrap();
            let img = sample(&m, &set, &g, &opts(2, 1.0, 1)).unwrap();
            assert_eq!((img.height, img.width), (16, 16));
        }
    }

    #[test]
    fn guidance_runs_an_unconditional_pass() {
        let cfg = ModelConfig::tiny();
        let m = activated(&cfg);
        let g = TextPrompt::global(cfg.global_text.clone());
        let set = ConditionSet::new(vec![pair("A red top", 1, 32)]).unwrap();
        let plain = sample(&m, &set, &g, &opts(3, 1.0, 2)).unwrap();
        let guided = sample(
            &m,
            &set,
            &g,
            &SampleOptions {
                guidance_scale: 3.0,
                ..opts(3, 1.0, 2)
            },
        )
        .unwrap();
        assert_ne!(plain.pixels, guided.pixels);
    }

    #[test]
    fn full_schedule_on_a_small_stack() {
        let cfg = ModelConfig::tiny();
        let m = activated(&cfg);
        let steps = m.schedule().len();
        let img = std::thread::Builder::new()
            .stack_size(1 << 20)
            .spawn(move || {
                let set = ConditionSet::new(vec![pair("A red top", 1, 32)]).unwrap();
                sample(&m, &set, &TextPrompt::global("a model"), &opts(steps, 1.0, 4)).unwrap()
            })
            .unwrap()
            .join()
            .unwrap();
        assert_eq!(img.provenance.steps, 1000);
    }
}
