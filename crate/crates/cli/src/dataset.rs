use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use lots_core::sketchy::fixture::{write_fixture, FixtureSpec};
use lots_core::sketchy::{
    AnnotationSet, BuildOptions, BuildReport, DatasetBuilder, DescriptionBackend, EdgeSketcher, ExternalSketcher,
    HttpChatTransport, LlmBackend, SketchBackend, Taxonomy, TemplateBackend,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DescriberKind {
    Template,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SketcherKind {
    Edges,
    External,
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    /// COCO-style annotation file, or a directory of them.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Category levels and removed accessories (TOML); defaults to the bundled list.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DescriberKind::Template)]
    pub backend: DescriberKind,
    /// Base URL of an OpenAI-compatible chat API.
    #[arg(long, env = "LOTS_LLM_URL", default_value = "http://127.0.0.1:8000/v1")]
    pub llm_url: String,
    #[arg(long, env = "LOTS_LLM_MODEL", default_value = "default")]
    pub llm_model: String,
    #[arg(long, default_value_t = 60)]
    pub llm_timeout_secs: u64,
    #[arg(long, default_value_t = 2)]
    pub llm_retries: usize,
    /// JSONL log of every LLM request and reply.
    #[arg(long)]
    pub prompt_log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SketcherKind::Edges)]
    pub sketcher: SketcherKind,
    /// External sketcher program.
    #[arg(long)]
    pub sketcher_cmd: Option<PathBuf>,
    /// Arguments for the external program; `{input}` and `{output}` are substituted.
    #[arg(long = "sketcher-arg", allow_hyphen_values = true)]
    pub sketcher_args: Vec<String>,
    /// The external program draws dark strokes on white.
    #[arg(long)]
    pub sketcher_invert: bool,
    #[arg(long, default_value_t = 256)]
    pub sketcher_size: usize,
    /// Context pixels around each garment's bounding box before sketching.
    #[arg(long, default_value_t = BuildOptions::default().margin)]
    pub margin: usize,
}

/// Loads one annotation file or every `*.json` in a directory, merged by image id.
pub fn load_annotations(path: &Path, taxonomy: &Taxonomy) -> Result<AnnotationSet> {
    if !path.is_dir() {
        return Ok(AnnotationSet::load(path, taxonomy)?);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .json annotation files in {}", path.display());
    }
    let mut merged = AnnotationSet {
        images: Vec::new(),
        skipped: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for f in files {
        let set = AnnotationSet::load(&f, taxonomy).with_context(|| format!("loading {}", f.display()))?;
        for img in set.images {
            if !seen.insert(img.image_id) {
                bail!("image id {} appears in more than one annotation file", img.image_id);
            }
            merged.images.push(img);
        }
        merged.skipped.extend(set.skipped);
    }
    merged.images.sort_by_key(|i| i.image_id);
    Ok(merged)
}

pub fn run_build(args: &BuildArgs) -> Result<BuildReport> {
    let taxonomy = match &args.taxonomy {
        Some(p) => Taxonomy::load(p)?,
        None => Taxonomy::default(),
    };
    let annotations = load_annotations(&args.annotations, &taxonomy)?;
    log::info!("{} annotated images", annotations.images.len());
    let describer: Box<dyn DescriptionBackend> = match args.backend {
        DescriberKind::Template => Box::new(TemplateBackend),
        DescriberKind::Llm => {
            let mut t = HttpChatTransport::new(
                &args.llm_url,
                &args.llm_model,
                Duration::from_secs(args.llm_timeout_secs),
                args.llm_retries,
            )?;
            if let Some(p) = &args.prompt_log {
                t = t.with_prompt_log(p)?;
            }
            Box::new(LlmBackend::new(t))
        }
    };
    let sketcher: Box<dyn SketchBackend> = match args.sketcher {
        SketcherKind::Edges => Box::new(EdgeSketcher {
            input_size: args.sketcher_size,
        }),
        SketcherKind::External => Box::new(ExternalSketcher {
            program: args.sketcher_cmd.clone().context("--sketcher external needs --sketcher-cmd")?,
            args: args.sketcher_args.clone(),
            input_size: args.sketcher_size,
            invert: args.sketcher_invert,
        }),
    };
    let builder = DatasetBuilder {
        taxonomy: &taxonomy,
        describer: describer.as_ref(),
        sketcher: sketcher.as_ref(),
        options: BuildOptions {
            margin: args.margin,
            ..Default::default()
        },
    };
    let report = builder.build(&annotations, &args.images, &args.out)?;
    log::info!(
        "{} records, {} garments, {} rejected",
        report.stats.images,
        report.stats.garments,
        report.stats.rejected.len()
    );
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Whole-body garments per image, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 2, 1, 2, 3, 1, 1, 1])]
    pub counts: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_fixture(args: &FixtureArgs) -> Result<()> {
    write_fixture(&args.out, &FixtureSpec::new(args.counts.clone(), args.seed))?;
    log::info!("wrote {} fixture images to {}", args.counts.len(), args.out.display());
    Ok(())
}
