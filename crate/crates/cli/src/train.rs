use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use lots_core::checkpoint::{load_checkpoint, save_checkpoint};
use lots_core::config::LotsConfig;
use lots_core::diffusion::{
    rectangle_fixture, smoothed_loss, ConditioningVariant, LotsModel, ModelConfig, StepReport, Trainer, TrainingSample,
};
use lots_core::sketchy::Manifest;

const DEFAULT_FIXTURE_SAMPLES: usize = 64;
const LOSS_WINDOW: usize = 10;

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML configuration; missing sections take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the small test-sized model instead of the configured one.
    #[arg(long)]
    pub tiny: bool,
    /// Dataset manifest; without one the synthetic rectangle fixture is used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of `step,loss`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// pair_former, no_pooling or mean_pooling.
    #[arg(long)]
    pub variant: Option<ConditioningVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub samples: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothed_first: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothed_last: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Config file, then `--tiny`, then the individual flags.
pub fn resolve_config(args: &TrainArgs) -> Result<LotsConfig> {
    let mut cfg = match &args.config {
        Some(p) => LotsConfig::load(p)?,
        None => LotsConfig::default(),
    };
    if args.tiny {
        cfg.model = ModelConfig {
            variant: cfg.model.variant,
            seed: cfg.model.seed,
            ..ModelConfig::tiny()
        };
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(m) = &args.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.output.checkpoint = Some(o.clone());
    }
    if let Some(l) = &args.loss_log {
        cfg.output.loss_log = Some(l.clone());
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn load_training_data(cfg: &LotsConfig, size: usize) -> Result<Vec<TrainingSample>> {
    match &cfg.data.manifest {
        Some(path) => {
            let manifest = Manifest::read(path)?;
            let root = path.parent().unwrap_or(Path::new("."));
            let data = manifest
                .records
                .iter()
                .map(|r| {
                    r.training_sample(root, &cfg.model.global_text, size)
                        .with_context(|| format!("record {}", r.image_id))
                })
                .collect::<Result<Vec<_>>>()?;
            if data.is_empty() {
                bail!("{} has no records", path.display());
            }
            Ok(data)
        }
        None => {
            let n = if cfg.data.fixture_samples == 0 { DEFAULT_FIXTURE_SAMPLES } else { cfg.data.fixture_samples };
            let canvas = if cfg.data.fixture_canvas == 0 { 2 * size } else { cfg.data.fixture_canvas };
            Ok(rectangle_fixture(n, size, canvas, cfg.train.seed)?)
        }
    }
}

/// Runs `steps` optimizer steps cycling through `data` in order.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &[TrainingSample],
    steps: usize,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    if data.is_empty() {
        bail!("no training data");
    }
    let bs = trainer.config().batch_size.max(1);
    let mut reports = Vec::with_capacity(steps);
    let mut cursor = 0;
    for _ in 0..steps {
        let batch: Vec<TrainingSample> = (0..bs).map(|i| data[(cursor + i) % data.len()].clone()).collect();
        cursor = (cursor + bs) % data.len();
        let r = trainer.train_step(&batch)?;
        on_step(&r);
        reports.push(r);
    }
    Ok(reports)
}

pub fn run_train(args: &TrainArgs) -> Result<TrainSummary> {
    let cfg = resolve_config(args)?;
    let out = cfg
        .output
        .checkpoint
        .clone()
        .context("no output checkpoint: pass --out or set [output] checkpoint")?;
    let model = match &args.init {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => LotsModel::new(&cfg.model)?,
    };
    let size = model.config().image_size();
    let data = load_training_data(&cfg, size)?;
    log::info!("training on {} samples for {} steps", data.len(), cfg.train.steps);
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log_file = match &cfg.output.loss_log {
        Some(p) => {
            let mut f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "step,loss")?;
            Some(f)
        }
        None => None,
    };
    let every = (cfg.train.steps / 20).max(1);
    let mut write_err = None;
    let reports = train_loop(&mut trainer, &data, cfg.train.steps, |r| {
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{},{}", r.step, r.loss) {
                write_err.get_or_insert(e);
            }
        }
        if r.step % every == 0 {
            log::info!("step {} loss {:.5}", r.step, r.loss);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing loss log");
    }
    if reports.is_empty() {
        bail!("steps must be at least 1");
    }
    save_checkpoint(trainer.model(), &out)?;
    log::info!("wrote {}", out.display());
    Ok(TrainSummary {
        steps: reports.len(),
        samples: data.len(),
        first_loss: reports[0].loss,
        last_loss: reports[reports.len() - 1].loss,
        smoothed_first: smoothed_loss(&reports, LOSS_WINDOW, LOSS_WINDOW),
        smoothed_last: smoothed_loss(&reports, reports.len(), LOSS_WINDOW),
        checkpoint: out,
    })
}
