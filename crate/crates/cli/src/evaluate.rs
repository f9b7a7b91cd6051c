use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use lots_core::eval::{evaluate, human_report, read_responses, EvalSample, HumanReport, MetricReport, ToyEmbedder};
use lots_core::pair_codec::SketchMap;
use lots_core::sketchy::{Manifest, Mask};

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    /// Directory of generated PNGs.
    #[arg(long = "gen")]
    pub generated: Option<PathBuf>,
    /// Directory of reference PNGs with the same file names.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Dataset manifest supplying garment masks for LocalCLIP.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Human-study CSV (`image_id,garment,attribute,answer,rater,role`).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    /// Image metrics. CLIP-style scores use the built-in toy embedder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human: Option<HumanReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmatched: Vec<String>,
}

fn pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn load_mask(path: &Path) -> Result<Mask> {
    let s = SketchMap::load_png(path)?;
    Ok(Mask::from_fn(s.height(), s.width(), |y, x| s.get(y, x)))
}

/// Garment masks per reference image file name.
fn manifest_masks(path: &Path) -> Result<BTreeMap<String, Vec<Mask>>> {
    let manifest = Manifest::read(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        let name = Path::new(&r.image)
            .file_name()
            .and_then(|n| n.to_str())
            .context("record image has no file name")?
            .to_string();
        let masks = r
            .garments
            .iter()
            .map(|g| load_mask(&root.join(&g.mask)))
            .collect::<Result<Vec<_>>>()?;
        out.insert(name, masks);
    }
    Ok(out)
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let mut output = EvalOutput {
        metrics: None,
        human: None,
        unmatched: Vec::new(),
    };
    match (&args.generated, &args.reference) {
        (Some(g), Some(r)) => {
            let gen = pngs(g)?;
            let reference = pngs(r)?;
            let masks = match &args.manifest {
                Some(m) => manifest_masks(m)?,
                None => BTreeMap::new(),
            };
            let mut samples = Vec::new();
            for (name, gpath) in &gen {
                let Some(rpath) = reference.get(name) else {
                    output.unmatched.push(name.clone());
                    continue;
                };
                let reference = image::open(rpath)?.to_rgb8();
                let mut m = masks.get(name).cloned().unwrap_or_default();
                if m.iter().any(|m| (m.width() as u32, m.height() as u32) != reference.dimensions()) {
                    log::warn!("{name}: mask size differs from the reference; LocalCLIP skipped");
                    m.clear();
                }
                samples.push(EvalSample {
                    id: name.clone(),
                    generated: image::open(gpath)?.to_rgb8(),
                    reference,
                    masks: m,
                    prompt: None,
                });
            }
            output.unmatched.extend(reference.keys().filter(|k| !gen.contains_key(*k)).cloned());
            if samples.is_empty() {
                bail!("no generated image has a reference with the same file name");
            }
            let toy = ToyEmbedder::default();
            output.metrics = Some(evaluate(&samples, &toy, Some(&toy), None)?);
        }
        (None, None) => {}
        _ => bail!("--gen and --ref must be given together"),
    }
    if let Some(p) = &args.responses {
        output.human = Some(human_report(&read_responses(p)?));
    }
    if output.metrics.is_none() && output.human.is_none() {
        bail!("nothing to evaluate: pass --gen/--ref and/or --responses");
    }
    let json = serde_json::to_string_pretty(&output)?;
    match &args.report {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(output)
}
