use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::sketchy::Mask;

/// Maps an image to a feature vector.
pub trait ImageEmbedder: Send + Sync {
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

impl<F> ImageEmbedder for F
where
    F: Fn(&RgbImage) -> Result<Vec<f64>> + Send + Sync,
{
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
        self(img)
    }
}

/// Downsamples to `grid x grid` and concatenates the centered color planes
/// with the per-channel means.
#[derive(Debug, Clone, Copy)]
pub struct ToyEmbedder {
    pub grid: u32,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl ImageEmbedder for ToyEmbedder {
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Empty("image to embed".into()));
        }
        let small = imageops::resize(img, self.grid, self.grid, FilterType::Triangle);
        let n = (self.grid * self.grid) as f64;
        let mut out = Vec::with_capacity(3 * (self.grid * self.grid) as usize + 3);
        let mut means = [0.0; 3];
        for c in 0..3 {
            means[c] = small.pixels().map(|p| p.0[c] as f64 / 255.0).sum::<f64>() / n;
        }
        for c in 0..3 {
            out.extend(small.pixels().map(|p| p.0[c] as f64 / 255.0 - means[c]));
        }
        out.extend(means);
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("embedding length", a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine of a zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the two images' embeddings.
pub fn global_clip(generated: &RgbImage, reference: &RgbImage, embedder: &dyn ImageEmbedder) -> Result<f64> {
    cosine(&embedder.embed(generated)?, &embedder.embed(reference)?)
}

pub const LOCAL_CROP_PADDING: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalClip {
    pub mean: f64,
    /// `None` for garments whose mask was empty.
    pub per_garment: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Mean cosine similarity over per-garment bounding-box crops (padded by
/// 4 px) taken from both images.
pub fn local_clip(
    generated: &RgbImage,
    reference: &RgbImage,
    masks: &[Mask],
    embedder: &dyn ImageEmbedder,
) -> Result<LocalClip> {
    if generated.dimensions() != reference.dimensions() {
        return Err(Error::shape(
            "local crop images",
            format!("{:?}", reference.dimensions()),
            format!("{:?}", generated.dimensions()),
        ));
    }
    if masks.is_empty() {
        return Err(Error::Empty("no garment masks".into()));
    }
    let (w, h) = (generated.width() as usize, generated.height() as usize);
    let mut per_garment = Vec::with_capacity(masks.len());
    let mut skipped = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::shape("garment mask", format!("{h}x{w}"), format!("{}x{}", m.height(), m.width())));
        }
        let Some(b) = m.bbox() else {
            log::warn!("garment {i} has an empty mask; skipped");
            skipped.push(i);
            per_garment.push(None);
            continue;
        };
        let b = b.expand(LOCAL_CROP_PADDING, w, h);
        let crop = |img: &RgbImage| {
            imageops::crop_imm(img, b.x0 as u32, b.y0 as u32, b.width() as u32, b.height() as u32).to_image()
        };
        per_garment.push(Some(global_clip(&crop(generated), &crop(reference), embedder)?));
    }
    let scores: Vec<f64> = per_garment.iter().flatten().copied().collect();
    if scores.is_empty() {
        return Err(Error::Undefined("every garment mask is empty".into()));
    }
    Ok(LocalClip {
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        per_garment,
        skipped,
    })
}
