use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use lots_core::diffusion::{ConditionSet, SampleOptions};
use lots_core::pair_codec::{ConditionPair, SketchMap, TextPrompt};

use crate::config::StudioConfig;
use crate::error::StudioError;

/// One localized condition: a base64 grayscale PNG sketch and its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairInput {
    pub sketch: String,
    pub text: String,
}

/// Body of `POST /generate`. Omitted fields take the service defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    #[serde(default)]
    pub global_text: Option<String>,
    #[serde(default)]
    pub pairs: Vec<PairInput>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub guidance_scale: Option<f64>,
}

/// A request with every default filled in. This is what runs and what the
/// digest covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRequest {
    pub global_text: String,
    pub pairs: Vec<PairInput>,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
    pub guidance_scale: f64,
}

impl ResolvedRequest {
    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }

    pub fn sample_options(&self, run_id: &str) -> SampleOptions {
        SampleOptions {
            steps: self.steps,
            alpha: self.alpha,
            seed: self.seed,
            guidance_scale: self.guidance_scale,
            run_id: Some(run_id.to_string()),
        }
    }
}

/// JSON with object keys sorted at every level and no insignificant whitespace.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// A resolved request together with its decoded conditions.
#[derive(Debug, Clone)]
pub struct ValidatedRequest {
    pub resolved: ResolvedRequest,
    pub conditions: ConditionSet,
    pub global: TextPrompt,
}

fn decode_sketch(b64: &str, field: &str) -> Result<SketchMap, StudioError> {
    let raw = b64.split_once("base64,").map_or(b64, |(_, r)| r);
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(raw.trim())
        .map_err(|e| StudioError::validation(field, format!("not base64: {e}")))?;
    SketchMap::from_png_bytes(&bytes).map_err(|e| StudioError::validation(field, format!("not a PNG image: {e}")))
}

pub fn encode_sketch(s: &SketchMap) -> String {
    base64::engine::general_purpose::STANDARD.encode(s.to_png_bytes().expect("png encoding"))
}

/// Checks ranges, decodes sketches and fills defaults. `seed` supplies a seed
/// when the request has none.
pub fn validate(
    req: &GenerationRequest,
    cfg: &StudioConfig,
    default_global: &str,
    seed: impl FnOnce() -> u64,
) -> Result<ValidatedRequest, StudioError> {
    let alpha = req.alpha.unwrap_or(cfg.default_alpha);
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(StudioError::validation("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let steps = req.steps.unwrap_or(cfg.default_steps);
    if !(1..=1000).contains(&steps) {
        return Err(StudioError::validation("steps", format!("{steps} is outside 1..=1000")));
    }
    let guidance_scale = req.guidance_scale.unwrap_or(1.0);
    if !guidance_scale.is_finite() || !(1.0..=30.0).contains(&guidance_scale) {
        return Err(StudioError::validation("guidance_scale", "must be in [1, 30]"));
    }
    if req.pairs.len() > cfg.max_pairs {
        return Err(StudioError::validation(
            "pairs",
            format!("{} pairs given, at most {} allowed", req.pairs.len(), cfg.max_pairs),
        ));
    }
    let mut pairs = Vec::with_capacity(req.pairs.len());
    for (i, p) in req.pairs.iter().enumerate() {
        let field = format!("pairs[{i}].sketch");
        let sketch = decode_sketch(&p.sketch, &field)?;
        if (sketch.height(), sketch.width()) != (cfg.canvas, cfg.canvas) {
            return Err(StudioError::validation(
                field,
                format!("{}x{} sketch, canvas is {c}x{c}", sketch.width(), sketch.height(), c = cfg.canvas),
            ));
        }
        let text = TextPrompt::local(p.text.clone()).map_err(|e| StudioError::validation(format!("pairs[{i}].text"), e))?;
        pairs.push(ConditionPair::new(sketch, text).map_err(|e| StudioError::validation(format!("pairs[{i}]"), e))?);
    }
    let conditions = ConditionSet::new(pairs).map_err(|e| StudioError::validation("pairs", e))?;
    let global_text = req.global_text.clone().unwrap_or_else(|| default_global.to_string());
    let resolved = ResolvedRequest {
        global_text: global_text.clone(),
        pairs: req.pairs.clone(),
        alpha,
        steps,
        seed: req.seed.unwrap_or_else(seed),
        guidance_scale,
    };
    Ok(ValidatedRequest {
        resolved,
        conditions,
        global: TextPrompt::global(global_text),
    })
}
