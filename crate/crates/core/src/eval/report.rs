use image::imageops::{self, FilterType};
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::{global_clip, local_clip, ImageEmbedder};
use super::fid::{fid, FidResult};
use super::human::{attribute_scores, response_alpha, AttributeScores, EvalResponse};
use super::ssim::ssim_rgb;
use super::vqa::{vqa_score, VqaBackend};
use crate::error::{Error, Result};
use crate::sketchy::Mask;

/// A generated image, its reference, and the reference's garment masks.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub generated: RgbImage,
    pub reference: RgbImage,
    pub masks: Vec<Mask>,
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub global_clip: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_clip: Option<f64>,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_garments: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanReport {
    pub scores: AttributeScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub krippendorff_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub global_clip: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_clip: Option<f64>,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<FidResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human: Option<HumanReport>,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn human_report(responses: &[EvalResponse]) -> HumanReport {
    let (alpha, note) = match response_alpha(responses) {
        Ok(a) => (Some(a), None),
        Err(e) => (None, Some(e.to_string())),
    };
    HumanReport {
        scores: attribute_scores(responses),
        krippendorff_alpha: alpha,
        alpha_note: note,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn evaluate_one(s: &EvalSample, embedder: &dyn ImageEmbedder, vqa: Option<&dyn VqaBackend>) -> Result<SampleMetrics> {
    let generated = if s.generated.dimensions() == s.reference.dimensions() {
        s.generated.clone()
    } else {
        imageops::resize(&s.generated, s.reference.width(), s.reference.height(), FilterType::Triangle)
    };
    let (local, skipped) = if s.masks.is_empty() {
        (None, Vec::new())
    } else {
        match local_clip(&generated, &s.reference, &s.masks, embedder) {
            Ok(l) => (Some(l.mean), l.skipped),
            Err(Error::Undefined(_)) => (None, (0..s.masks.len()).collect()),
            Err(e) => return Err(e),
        }
    };
    Ok(SampleMetrics {
        id: s.id.clone(),
        global_clip: global_clip(&generated, &s.reference, embedder)?,
        local_clip: local,
        ssim: ssim_rgb(&generated, &s.reference)?,
        skipped_garments: skipped,
        vqa_score: s.prompt.as_deref().and_then(|p| vqa_score(&generated, p, vqa)),
    })
}

/// Per-sample metrics in parallel, then averages over the sample set. FID
/// needs at least two samples and a feature extractor.
pub fn evaluate(
    samples: &[EvalSample],
    embedder: &dyn ImageEmbedder,
    fid_features: Option<&dyn ImageEmbedder>,
    vqa: Option<&dyn VqaBackend>,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no evaluation samples".into()));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| evaluate_one(s, embedder, vqa))
        .collect::<Result<Vec<_>>>()?;
    let fid = match fid_features {
        Some(f) if samples.len() >= 2 => {
            let gen = samples.iter().map(|s| f.embed(&s.generated)).collect::<Result<Vec<_>>>()?;
            let reference = samples.iter().map(|s| f.embed(&s.reference)).collect::<Result<Vec<_>>>()?;
            Some(fid(&gen, &reference)?)
        }
        _ => None,
    };
    Ok(MetricReport {
        samples: samples.len(),
        global_clip: mean(per_sample.iter().map(|m| m.global_clip)).expect("non-empty"),
        local_clip: mean(per_sample.iter().filter_map(|m| m.local_clip)),
        ssim: mean(per_sample.iter().map(|m| m.ssim)).expect("non-empty"),
        fid,
        vqa_score: mean(per_sample.iter().filter_map(|m| m.vqa_score)),
        human: None,
        per_sample,
    })
}
