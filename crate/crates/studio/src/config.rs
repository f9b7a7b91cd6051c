use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::StudioError;

/// Service settings. Sources are applied in order: defaults, config file,
/// `LOTS_*` environment variables, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudioConfig {
    pub host: String,
    pub port: u16,
    /// Run log and image store live here.
    pub data_dir: PathBuf,
    /// `*.safetensors` checkpoints; the id is the file stem.
    pub checkpoint_dir: PathBuf,
    /// Checkpoint id loaded at startup.
    pub checkpoint: Option<String>,
    /// Optional built dataset (a directory holding `manifest.json`).
    pub dataset_dir: Option<PathBuf>,
    pub workers: usize,
    pub queue_capacity: usize,
    pub max_pairs: usize,
    /// Side of the square sketch canvas every submitted layer must match.
    pub canvas: usize,
    pub default_alpha: f64,
    pub default_steps: usize,
    /// Browser origins allowed to call the API; empty disables CORS headers.
    pub cors_origins: Vec<String>,
}

impl Default for StudioConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7860,
            data_dir: PathBuf::from("studio-data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint: None,
            dataset_dir: None,
            workers: 1,
            queue_capacity: 64,
            max_pairs: 6,
            canvas: lots_core::sketchy::CANVAS,
            default_alpha: 1.0,
            default_steps: 50,
            cors_origins: Vec::new(),
        }
    }
}

/// Values given on the command line; `None` leaves the setting alone.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint: Option<String>,
    pub dataset_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub queue_capacity: Option<usize>,
    pub max_pairs: Option<usize>,
    pub canvas: Option<usize>,
    pub default_alpha: Option<f64>,
    pub default_steps: Option<usize>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, StudioError> {
    value
        .trim()
        .parse()
        .map_err(|_| StudioError::Config(format!("{key}: cannot parse `{value}`")))
}

impl StudioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, StudioError> {
        toml::from_str(s).map_err(|e| StudioError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, StudioError> {
        let s = std::fs::read_to_string(path).map_err(|e| StudioError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// Applies `LOTS_*` variables read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), StudioError> {
        if let Some(v) = get("LOTS_HOST") {
            self.host = v;
        }
        if let Some(v) = get("LOTS_PORT") {
            self.port = parse("LOTS_PORT", &v)?;
        }
        if let Some(v) = get("LOTS_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("LOTS_CHECKPOINT_DIR") {
            self.checkpoint_dir = v.into();
        }
        if let Some(v) = get("LOTS_CHECKPOINT") {
            self.checkpoint = Some(v);
        }
        if let Some(v) = get("LOTS_DATASET_DIR") {
            self.dataset_dir = Some(v.into());
        }
        if let Some(v) = get("LOTS_WORKERS") {
            self.workers = parse("LOTS_WORKERS", &v)?;
        }
        if let Some(v) = get("LOTS_QUEUE_CAPACITY") {
            self.queue_capacity = parse("LOTS_QUEUE_CAPACITY", &v)?;
        }
        if let Some(v) = get("LOTS_MAX_PAIRS") {
            self.max_pairs = parse("LOTS_MAX_PAIRS", &v)?;
        }
        if let Some(v) = get("LOTS_CANVAS") {
            self.canvas = parse("LOTS_CANVAS", &v)?;
        }
        if let Some(v) = get("LOTS_DEFAULT_ALPHA") {
            self.default_alpha = parse("LOTS_DEFAULT_ALPHA", &v)?;
        }
        if let Some(v) = get("LOTS_DEFAULT_STEPS") {
            self.default_steps = parse("LOTS_DEFAULT_STEPS", &v)?;
        }
        if let Some(v) = get("LOTS_CORS_ORIGINS") {
            self.cors_origins = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &ConfigOverrides) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &o.$f { self.$f = v.clone(); })*};
        }
        set!(host, port, data_dir, checkpoint_dir, workers, queue_capacity, max_pairs, canvas, default_alpha, default_steps);
        if o.checkpoint.is_some() {
            self.checkpoint = o.checkpoint.clone();
        }
        if o.dataset_dir.is_some() {
            self.dataset_dir = o.dataset_dir.clone();
        }
    }

    /// Defaults, then `file` if given, then the process environment, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self, StudioError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.apply_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StudioError> {
        let bad = |m: &str| Err(StudioError::Config(m.into()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1");
        }
        if self.max_pairs == 0 || self.max_pairs > 6 {
            return bad("max_pairs must be in 1..=6");
        }
        if !(8..=4096).contains(&self.canvas) {
            return bad("canvas must be in 8..=4096");
        }
        if !(0.0..=1.0).contains(&self.default_alpha) {
            return bad("default_alpha must be in [0, 1]");
        }
        if !(1..=1000).contains(&self.default_steps) {
            return bad("default_steps must be in 1..=1000");
        }
        Ok(())
    }
}
