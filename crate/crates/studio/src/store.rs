use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lots_core::diffusion::Provenance;

use crate::api::ResolvedRequest;
use crate::error::StudioError;

pub const RUN_LOG: &str = "runs.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
    /// The service stopped before the run finished.
    Interrupted,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed | RunStatus::Interrupted)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub submitted_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub status: RunStatus,
    pub request_digest: String,
    pub request: ResolvedRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_id: Option<String>,
    pub timings: Timings,
    /// SHA-256 of the PNG bytes; the file is `images/<sha>.png`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Append-only JSONL run log plus a content-addressed PNG store. Every log
/// line is a full record snapshot; the last line for a run id wins.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    log: Mutex<File>,
    state: Mutex<State>,
}

#[derive(Debug, Default)]
struct State {
    order: Vec<String>,
    runs: HashMap<String, RunRecord>,
}

impl State {
    fn put(&mut self, r: RunRecord) {
        if !self.runs.contains_key(&r.run_id) {
            self.order.push(r.run_id.clone());
        }
        self.runs.insert(r.run_id.clone(), r);
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl RunStore {
    /// Opens or creates the store and replays the log. Runs left pending or
    /// running by a previous process become `interrupted`.
    pub fn open(dir: &Path) -> Result<Self, StudioError> {
        fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| StudioError::storage(dir.display(), e))?;
        let path = dir.join(RUN_LOG);
        let mut state = State::default();
        let mut truncate_to = None;
        if path.exists() {
            let f = File::open(&path).map_err(|e| StudioError::storage(path.display(), e))?;
            let mut offset = 0u64;
            let mut reader = BufReader::new(f);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| StudioError::storage(path.display(), e))?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                match serde_json::from_str::<RunRecord>(line.trim_end()) {
                    Ok(r) if line.ends_with('\n') => state.put(r),
                    Ok(_) | Err(_) => {
                        // a torn final write is dropped; corruption elsewhere is fatal
                        let rest = reader.fill_buf().map(|b| b.is_empty()).unwrap_or(true);
                        if rest {
                            log::warn!("{}: dropping incomplete last line {lineno}", path.display());
                            truncate_to = Some(offset);
                            break;
                        }
                        return Err(StudioError::Storage(format!("{}: line {lineno} is not a run record", path.display())));
                    }
                }
                offset += n as u64;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StudioError::storage(path.display(), e))?;
        if let Some(len) = truncate_to {
            log.set_len(len).map_err(|e| StudioError::storage(path.display(), e))?;
        }
        let store = Self {
            dir: dir.to_path_buf(),
            log: Mutex::new(log),
            state: Mutex::new(State::default()),
        };
        let stale: Vec<RunRecord> = state
            .order
            .iter()
            .map(|id| state.runs[id].clone())
            .filter(|r| !r.status.is_terminal())
            .collect();
        *store.state.lock().unwrap() = state;
        for mut r in stale {
            r.status = RunStatus::Interrupted;
            r.error = Some("service stopped before the run finished".into());
            store.append(r)?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes the record to the log and fsyncs before updating the in-memory view.
    pub fn append(&self, record: RunRecord) -> Result<(), StudioError> {
        let mut line = serde_json::to_string(&record).map_err(|e| StudioError::storage("run record", e))?;
        line.push('\n');
        {
            let mut f = self.log.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.sync_data())
                .map_err(|e| StudioError::storage(RUN_LOG, e))?;
        }
        self.state.lock().unwrap().put(record);
        Ok(())
    }

    pub fn get(&self, run_id: &str) -> Option<RunRecord> {
        self.state.lock().unwrap().runs.get(run_id).cloned()
    }

    /// All runs in submission order.
    pub fn list(&self) -> Vec<RunRecord> {
        let s = self.state.lock().unwrap();
        s.order.iter().map(|id| s.runs[id].clone()).collect()
    }

    /// Applies `f` to the current record and appends the result.
    pub fn update(&self, run_id: &str, f: impl FnOnce(&mut RunRecord)) -> Result<RunRecord, StudioError> {
        let mut r = self.get(run_id).ok_or_else(|| StudioError::NotFound(format!("run {run_id}")))?;
        f(&mut r);
        self.append(r.clone())?;
        Ok(r)
    }

    pub fn image_path(&self, sha: &str) -> PathBuf {
        self.dir.join(IMAGE_DIR).join(format!("{sha}.png"))
    }

    /// Stores PNG bytes under their SHA-256 and returns the hash. Existing
    /// content is left untouched.
    pub fn put_image(&self, png: &[u8]) -> Result<String, StudioError> {
        let sha = hex::encode(Sha256::digest(png));
        let path = self.image_path(&sha);
        if path.exists() {
            return Ok(sha);
        }
        let write = || -> std::io::Result<()> {
            let mut tmp = tempfile::NamedTempFile::new_in(self.dir.join(IMAGE_DIR))?;
            tmp.write_all(png)?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path).map_err(|e| e.error)?;
            Ok(())
        };
        write().map_err(|e| StudioError::storage(path.display(), e))?;
        sync_dir(&self.dir.join(IMAGE_DIR));
        Ok(sha)
    }

    pub fn read_image(&self, sha: &str) -> Result<Vec<u8>, StudioError> {
        fs::read(self.image_path(sha)).map_err(|e| StudioError::storage(format!("image {sha}"), e))
    }
}
