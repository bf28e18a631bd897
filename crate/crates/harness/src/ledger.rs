//! Run ledger: which artifact was produced from which inputs, and the hash
//! it had when written. A cell whose outputs are all present, unmodified
//! and built from the same input fingerprint is skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::{hash_file, write_atomic};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub manifest_hash: String,
    /// Keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    /// Hash over the cell's parameters and input artifact hashes.
    pub fingerprint: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_s: f64,
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub cells_failed: usize,
    /// Unix seconds at stage end.
    pub finished_at: u64,
}

pub struct Ledger {
    root: PathBuf,
    state: Mutex<RunLedger>,
}

impl Ledger {
    /// Opens (or starts) the ledger in `root`. Entries whose file is gone or
    /// changed are dropped so their cells rerun.
    pub fn open(root: &Path, manifest_hash: &str) -> Result<Self> {
        let path = root.join(LEDGER_FILE);
        let mut state = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<RunLedger>(&text).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable ledger {}: {e}", path.display());
                RunLedger::default()
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RunLedger::default(),
            Err(e) => return Err(HarnessError::io(&path, e)),
        };
        state.manifest_hash = manifest_hash.to_string();
        let ledger = Self {
            root: root.to_path_buf(),
            state: Mutex::new(state),
        };
        for problem in ledger.verify() {
            log::info!("ledger: {problem}; will recompute");
        }
        ledger
            .state
            .lock()
            .expect("ledger lock")
            .artifacts
            .retain(|rel, e| matches!(hash_file(&root.join(rel)), Ok((h, _)) if h == e.sha256));
        Ok(ledger)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot(&self) -> RunLedger {
        self.state.lock().expect("ledger lock").clone()
    }

    /// Every recorded artifact that is missing or no longer matches its hash.
    pub fn verify(&self) -> Vec<String> {
        let state = self.state.lock().expect("ledger lock");
        state
            .artifacts
            .iter()
            .filter_map(|(rel, e)| match hash_file(&self.root.join(rel)) {
                Ok((h, _)) if h == e.sha256 => None,
                Ok(_) => Some(format!("{rel} changed since it was recorded")),
                Err(_) => Some(format!("{rel} is missing")),
            })
            .collect()
    }

    /// True when `rel` was produced from `fingerprint` and is unmodified.
    pub fn is_fresh(&self, rel: &str, fingerprint: &str) -> bool {
        let recorded = {
            let state = self.state.lock().expect("ledger lock");
            match state.artifacts.get(rel) {
                Some(e) if e.fingerprint == fingerprint => e.sha256.clone(),
                _ => return false,
            }
        };
        matches!(hash_file(&self.root.join(rel)), Ok((h, _)) if h == recorded)
    }

    pub fn record(&self, rel: &str, stage: &str, fingerprint: &str) -> Result<String> {
        let (sha256, bytes) = hash_file(&self.root.join(rel))?;
        let mut state = self.state.lock().expect("ledger lock");
        state.artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                stage: stage.to_string(),
                fingerprint: fingerprint.to_string(),
                sha256: sha256.clone(),
                bytes,
            },
        );
        self.persist(&state)?;
        Ok(sha256)
    }

    pub fn record_stage(&self, stage: &str, record: StageRecord) -> Result<()> {
        let mut state = self.state.lock().expect("ledger lock");
        state.stages.insert(stage.to_string(), record);
        self.persist(&state)
    }

    fn persist(&self, state: &RunLedger) -> Result<()> {
        let text = serde_json::to_string_pretty(state).expect("ledger serializes");
        write_atomic(&self.root.join(LEDGER_FILE), text.as_bytes())
    }
}
