use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use lots_core::checkpoint::load_checkpoint;
use lots_core::diffusion::{sample, ConditionSet, Provenance, SampleOptions};
use lots_core::pair_codec::{ConditionPair, SketchMap, TextPrompt};

/// `{"global_text": ..., "pairs": [{"sketch_path": ..., "text": ...}]}`.
/// Relative sketch paths are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsFile {
    #[serde(default)]
    pub global_text: Option<String>,
    pub pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub sketch_path: PathBuf,
    pub text: String,
}

impl PairsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn conditions(&self, base: &Path) -> Result<ConditionSet> {
        let pairs = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let path = base.join(&p.sketch_path);
                let sketch = SketchMap::load_png(&path).with_context(|| format!("pairs[{i}].sketch_path"))?;
                let text = TextPrompt::local(p.text.clone()).with_context(|| format!("pairs[{i}].text"))?;
                Ok(ConditionPair::new(sketch, text)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionSet::new(pairs)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Model checkpoint (.safetensors).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON file listing the sketch-text pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the pairs file's global prompt.
    #[arg(long)]
    pub global_text: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub guidance_scale: f64,
}

pub fn run_sample(args: &SampleArgs) -> Result<Provenance> {
    let model = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (conditions, file_global) = match &args.pairs {
        Some(p) => {
            let file = PairsFile::load(p)?;
            let base = p.parent().unwrap_or(Path::new("."));
            (file.conditions(base)?, file.global_text)
        }
        None => (ConditionSet::empty(), None),
    };
    let global = args
        .global_text
        .clone()
        .or(file_global)
        .unwrap_or_else(|| model.config().global_text.clone());
    if args.out.extension().and_then(|e| e.to_str()) != Some("png") {
        bail!("--out must end in .png");
    }
    let opts = SampleOptions {
        steps: args.steps,
        alpha: args.alpha,
        seed: args.seed,
        guidance_scale: args.guidance_scale,
        run_id: None,
    };
    let img = sample(&model, &conditions, &TextPrompt::global(global), &opts)?;
    img.save_png(&args.out)?;
    log::info!("wrote {} ({} pairs)", args.out.display(), conditions.len());
    Ok(img.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_file_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        SketchMap::from_fn(8, 8, |y, x| x == y).unwrap().save_png(&dir.path().join("a.png")).unwrap();
        let file = PairsFile {
            global_text: None,
            pairs: vec![PairEntry {
                sketch_path: "a.png".into(),
                text: "A long coat".into(),
            }],
        };
        let set = file.conditions(dir.path()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.pairs()[0].sketch.popcount(), 8);

        let missing = PairsFile {
            pairs: vec![PairEntry {
                sketch_path: "b.png".into(),
                text: "x".into(),
            }],
            ..file
        };
        let err = format!("{:#}", missing.conditions(dir.path()).unwrap_err());
        assert!(err.contains("pairs[0].sketch_path"), "{err}");
        assert!(serde_json::from_str::<PairsFile>(r#"{"pairs": [], "extra": 1}"#).is_err());
    }
}
