use std::collections::HashMap;

use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scores how well an image answers "does this show <prompt>?", in `[0, 1]`.
pub trait VqaBackend: Send + Sync {
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64>;
}

pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

/// Returns configured scores for known (image, prompt) pairs and reports
/// itself unavailable for anything else.
#[derive(Debug, Clone, Default)]
pub struct StubVqa {
    fixtures: HashMap<(String, String), f64>,
}

impl StubVqa {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, image: &RgbImage, prompt: &str, score: f64) -> Self {
        self.fixtures.insert((image_digest(image), prompt.to_string()), score);
        self
    }
}

impl VqaBackend for StubVqa {
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64> {
        self.fixtures
            .get(&(image_digest(image), prompt.to_string()))
            .copied()
            .ok_or_else(|| Error::BackendUnavailable("no stub fixture for this image and prompt".into()))
    }
}

/// `None` when there is no backend or it fails; a score is never invented.
pub fn vqa_score(image: &RgbImage, prompt: &str, backend: Option<&dyn VqaBackend>) -> Option<f64> {
    let backend = backend?;
    match backend.score(image, prompt) {
        Ok(s) if (0.0..=1.0).contains(&s) => Some(s),
        Ok(s) => {
            log::warn!("vqa backend returned out-of-range score {s}; omitted");
            None
        }
        Err(e) => {
            log::warn!("vqa score unavailable: {e}");
            None
        }
    }
}
