use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::LotsModel;
use crate::error::{Error, Result};
use crate::pair_codec::{ConditionPair, SketchMap, TextPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Probability of dropping the global text and all pairs together.
    pub cond_dropout: f64,
    pub alpha: f64,
    pub max_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            cond_dropout: 0.1,
            alpha: 1.0,
            max_pairs: 6,
        }
    }
}

/// One training example: an RGB image in `[0, 1]` at the model's latent
/// resolution, its garment pairs and the global prompt.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// `3 x S x S`, channel-major.
    pub image: Vec<f32>,
    pub size: usize,
    pub pairs: Vec<ConditionPair>,
    pub global_text: TextPrompt,
}

impl TrainingSample {
    pub fn from_rgb(img: &image::RgbImage, pairs: Vec<ConditionPair>, global_text: TextPrompt, size: usize) -> Self {
        let resized = if img.width() as usize == size && img.height() as usize == size {
            img.clone()
        } else {
            image::imageops::resize(img, size as u32, size as u32, image::imageops::FilterType::Triangle)
        };
        let mut image = vec![0f32; 3 * size * size];
        for (x, y, p) in resized.enumerate_pixels() {
            for c in 0..3 {
                image[(c * size + y as usize) * size + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Self {
            image,
            size,
            pairs,
            global_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
}

/// Adam on the adapter parameters only; everything else stays frozen.
pub struct Trainer {
    model: LotsModel,
    cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: LotsModel, cfg: TrainConfig) -> Result<Self> {
        if !model.has_adapter() {
            return Err(Error::Unsupported("training needs a model with an adapter".into()));
        }
        if !(0.0..=1.0).contains(&cfg.cond_dropout) {
            return Err(Error::invalid("cond_dropout", "must lie in [0, 1]"));
        }
        super::attention::check_alpha(cfg.alpha)?;
        let vars = model.store().trainable_vars();
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &LotsModel {
        &self.model
    }

    pub fn into_model(self) -> LotsModel {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Noise-prediction loss for a batch with explicit timesteps and noise,
    /// without touching the optimizer.
    pub fn batch_loss(
        &self,
        batch: &[TrainingSample],
        timesteps: &[usize],
        noise: &Tensor,
        dropped: &[bool],
    ) -> Result<Tensor> {
        let m = &self.model;
        let s = m.config().unet.latent_size;
        let mut images = Vec::with_capacity(batch.len() * 3 * s * s);
        let mut items = Vec::with_capacity(batch.len());
        for (sample, &drop) in batch.iter().zip(dropped) {
            if sample.size != s || sample.image.len() != 3 * s * s {
                return Err(Error::shape("training image", format!("3x{s}x{s}"), format!("3x{0}x{0}", sample.size)));
            }
            if sample.pairs.len() > self.cfg.max_pairs {
                return Err(Error::invalid(
                    "pairs",
                    format!("{} pairs exceed the maximum of {}", sample.pairs.len(), self.cfg.max_pairs),
                ));
            }
            images.extend_from_slice(&sample.image);
            if drop {
                items.push((None, m.global_tokens(&TextPrompt::global(""))?));
            } else {
                items.push((m.condition_tokens(&sample.pairs)?, m.global_tokens(&sample.global_text)?));
            }
        }
        let x = Tensor::from_vec(images, (batch.len(), 3, s, s), &m.device())?.to_dtype(m.dtype())?;
        let x0 = m.codec().encode(&x)?;
        let x_t = m.schedule().add_noise(&x0, noise, timesteps)?;
        let cond = m.batch_conditioning(&items, self.cfg.alpha)?;
        let pred = m.predict_noise(&x_t, timesteps, &cond)?;
        Ok((pred - noise)?.sqr()?.mean_all()?)
    }

    /// One optimizer step on a uniformly sampled timestep per example.
    ///
    /// A non-finite loss aborts the step before any parameter changes.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let cfg = self.model.config();
        let (c, s) = (cfg.unet.latent_channels, cfg.unet.latent_size);
        let t_max = self.model.schedule().len();
        let timesteps: Vec<usize> = (0..batch.len()).map(|_| self.rng.random_range(0..t_max)).collect();
        let dropped: Vec<bool> = (0..batch.len())
            .map(|_| self.rng.random::<f64>() < self.cfg.cond_dropout)
            .collect();
        let noise: Vec<f64> = (0..batch.len() * c * s * s)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        let noise = Tensor::from_vec(noise, (batch.len(), c, s, s), &self.model.device())?
            .to_dtype(self.model.dtype())?;
        let loss = self.batch_loss(batch, &timesteps, &noise, &dropped)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        self.step += 1;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss: value,
            });
        }
        self.opt.backward_step(&loss)?;
        Ok(StepReport {
            step: self.step,
            loss: value,
        })
    }

    /// Cycles through `data` in fixed order for `steps` steps.
    pub fn fit(&mut self, data: &[TrainingSample], steps: usize) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::Empty("training data".into()));
        }
        let bs = self.cfg.batch_size.max(1);
        let mut reports = Vec::with_capacity(steps);
        let mut cursor = 0;
        for _ in 0..steps {
            let batch: Vec<TrainingSample> = (0..bs).map(|i| data[(cursor + i) % data.len()].clone()).collect();
            cursor = (cursor + bs) % data.len();
            reports.push(self.train_step(&batch)?);
        }
        Ok(reports)
    }
}

/// Mean of the losses of steps `end - window + 1 ..= end` (1-based).
pub fn smoothed_loss(reports: &[StepReport], end: usize, window: usize) -> Option<f64> {
    let lo = end.checked_sub(window)?;
    let slice = reports.get(lo..end)?;
    Some(slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64)
}

const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("blue", [40, 60, 210]),
    ("green", [40, 170, 70]),
    ("yellow", [230, 210, 40]),
    ("black", [20, 20, 20]),
    ("purple", [140, 50, 170]),
];

const GARMENTS: [&str; 4] = ["top", "skirt", "jacket", "dress"];

/// Synthetic training set: colored rectangles on white, each rectangle
/// paired with its outline sketch and a short description.
pub fn rectangle_fixture(n: usize, size: usize, canvas: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    if size < 8 || canvas < size {
        return Err(Error::invalid("size", "need 8 <= size <= canvas"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let count = rng.random_range(1..=2usize);
        let mut img = image::RgbImage::from_pixel(canvas as u32, canvas as u32, image::Rgb([255, 255, 255]));
        let mut pairs = Vec::new();
        for _ in 0..count {
            let (name, rgb) = COLORS[rng.random_range(0..COLORS.len())];
            let garment = GARMENTS[rng.random_range(0..GARMENTS.len())];
            let w = rng.random_range(canvas / 4..=canvas / 2);
            let h = rng.random_range(canvas / 4..=canvas / 2);
            let x0 = rng.random_range(0..=canvas - w);
            let y0 = rng.random_range(0..=canvas - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
                }
            }
            let sketch = SketchMap::from_fn(canvas, canvas, |y, x| {
                let inside = y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
                inside && (y == y0 || y == y0 + h - 1 || x == x0 || x == x0 + w - 1)
            })?;
            let article = if matches!(name.as_bytes()[0], b'a' | b'e' | b'i' | b'o' | b'u') { "An" } else { "A" };
            pairs.push(ConditionPair::new(
                sketch,
                TextPrompt::local(format!("{article} {name} {garment}"))?,
            )?);
        }
        out.push(TrainingSample::from_rgb(
            &img,
            pairs,
            TextPrompt::global(super::model::DEFAULT_GLOBAL_TEXT),
            size,
        ));
    }
    Ok(out)
}
