//! Content-addressed blobs, append-only curation records and deterministic
//! train/heldout splits on local disk.
//!
//! Layout under the store root:
//!
//! ```text
//! blobs/<first two hex chars>/<sha256 hex>
//! records.jsonl
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::decode_vector;
use crate::diffusion::{LatentSample, PromptCondition};
use crate::pipeline::{CurationRecord, RecordStatus};
use crate::trainer::{PreferencePair, Provenance};

pub const SCHEMA_VERSION: u32 = 1;
const RECORDS_FILE: &str = "records.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("blob {reference} is corrupt (content hashes to {actual})")]
    Integrity { reference: String, actual: String },
    #[error("record {0} already stored with different content")]
    Conflict(String),
    #[error("record {record_id} cannot be stored with status {status}")]
    NotTerminal { record_id: String, status: String },
    #[error("records.jsonl line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid reference {0:?}")]
    BadReference(String),
    #[error("record {record_id}: {message}")]
    BadRecord { record_id: String, message: String },
    #[error("invalid store options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "heldout" => Ok(Self::Heldout),
            "all" => Ok(Self::All),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub heldout_fraction: f64,
    /// Usually the run seed.
    pub salt: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.2,
            salt: 0,
        }
    }
}

impl SplitConfig {
    /// Heldout iff the salted hash of the id, read as a fraction of 2^64,
    /// falls below `heldout_fraction`.
    pub fn assign(&self, record_id: &str) -> Split {
        let mut h = Sha256::new();
        h.update(self.salt.to_le_bytes());
        h.update(record_id.as_bytes());
        let digest = h.finalize();
        let u = u64::from_le_bytes(digest[..8].try_into().unwrap());
        if (u as f64) < self.heldout_fraction * 2f64.powi(64) {
            Split::Heldout
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub record_id: String,
    pub stage: String,
    pub reason: String,
}

/// `manifest.json`: curation summary plus split assignment. Contains no
/// timestamps so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub record_count: usize,
    pub counts: BTreeMap<String, usize>,
    /// Fraction of scored records whose edit beat the original.
    pub win_rate: Option<f64>,
    pub failures: Vec<Failure>,
    pub split: SplitConfig,
    pub train_ids: Vec<String>,
    pub heldout_ids: Vec<String>,
    pub created_by: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn valid_ref(reference: &str) -> bool {
    reference.len() == 64 && reference.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Single-writer handle. Readers may open their own handles concurrently.
#[derive(Debug)]
pub struct DatasetStore {
    root: PathBuf,
    split: SplitConfig,
    records: BTreeMap<String, CurationRecord>,
}

impl DatasetStore {
    /// Opens or creates a store. A trailing line without its newline (an
    /// interrupted append) is discarded.
    pub fn open(root: impl Into<PathBuf>, split: SplitConfig) -> Result<Self, StoreError> {
        if !(0.0..=1.0).contains(&split.heldout_fraction) {
            return Err(StoreError::Options("heldout_fraction must be in [0, 1]".into()));
        }
        let root = root.into();
        fs::create_dir_all(root.join("blobs"))?;
        let path = root.join(RECORDS_FILE);
        let mut records = BTreeMap::new();
        if path.exists() {
            let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
            let mut buf = Vec::new();
            file.read_to_end(&mut buf)?;
            let complete = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if complete < buf.len() {
                tracing::warn!(bytes = buf.len() - complete, "discarding partial trailing record");
                file.set_len(complete as u64)?;
                file.seek(SeekFrom::End(0))?;
            }
            for (i, line) in BufReader::new(&buf[..complete]).lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let rec: CurationRecord = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if let Some(prev) = records.get(&rec.record_id) {
                    if prev != &rec {
                        return Err(StoreError::Conflict(rec.record_id));
                    }
                    continue;
                }
                records.insert(rec.record_id.clone(), rec);
            }
        }
        Ok(Self { root, split, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split_config(&self) -> SplitConfig {
        self.split
    }

    fn blob_path(&self, reference: &str) -> PathBuf {
        self.root.join("blobs").join(&reference[..2]).join(reference)
    }

    /// Stores `bytes` under their sha256; storing identical bytes again is a no-op.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let reference = sha256_hex(bytes);
        let path = self.blob_path(&reference);
        if path.exists() {
            return Ok(reference);
        }
        let dir = path.parent().expect("shard dir");
        fs::create_dir_all(dir)?;
        // write-then-rename so readers never see a partial blob
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_data()?;
        tmp.persist(&path).map_err(|e| StoreError::Io(e.error))?;
        Ok(reference)
    }

    pub fn get_blob(&self, reference: &str) -> Result<Vec<u8>, StoreError> {
        if !valid_ref(reference) {
            return Err(StoreError::BadReference(reference.to_string()));
        }
        let path = self.blob_path(reference);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(reference.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != reference {
            return Err(StoreError::Integrity {
                reference: reference.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn get_vector(&self, reference: &str) -> Result<Vec<f64>, StoreError> {
        let bytes = self.get_blob(reference)?;
        decode_vector(&bytes).map_err(|e| StoreError::BadReference(format!("{reference}: {e}")))
    }

    /// Appends one terminal record as a single line. Re-appending identical
    /// content is a no-op; differing content under the same id is a conflict.
    pub fn append_record(&mut self, record: &CurationRecord) -> Result<(), StoreError> {
        if !record.status.is_terminal() {
            return Err(StoreError::NotTerminal {
                record_id: record.record_id.clone(),
                status: record.status.label().to_string(),
            });
        }
        if let Some(prev) = self.records.get(&record.record_id) {
            return if prev == record {
                Ok(())
            } else {
                Err(StoreError::Conflict(record.record_id.clone()))
            };
        }
        let mut line = serde_json::to_vec(record).expect("record serialises");
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join(RECORDS_FILE))?;
        file.write_all(&line)?;
        file.sync_data()?;
        self.records.insert(record.record_id.clone(), record.clone());
        Ok(())
    }

    pub fn get_record(&self, record_id: &str) -> Option<&CurationRecord> {
        self.records.get(record_id)
    }

    pub fn contains(&self, record_id: &str) -> bool {
        self.records.contains_key(record_id)
    }

    /// All records sorted by id.
    pub fn records(&self) -> impl Iterator<Item = &CurationRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, record_id: &str) -> Split {
        self.split.assign(record_id)
    }

    /// Complete records of `split`, sorted by id.
    pub fn complete_records(&self, split: Split) -> impl Iterator<Item = &CurationRecord> {
        self.records
            .values()
            .filter(|r| r.status == RecordStatus::Complete)
            .filter(move |r| split == Split::All || self.split.assign(&r.record_id) == split)
    }

    /// Preference pairs from complete records of `split`, sorted by record
    /// id. `conditions[prompt_id]` supplies each pair's conditioning.
    pub fn load_pairs(&self, split: Split, conditions: &[PromptCondition]) -> Result<Vec<PreferencePair>, StoreError> {
        self.complete_records(split)
            .map(|r| self.pair_of(r, conditions))
            .collect()
    }

    pub fn pair_of(&self, r: &CurationRecord, conditions: &[PromptCondition]) -> Result<PreferencePair, StoreError> {
        let bad = |message: &str| StoreError::BadRecord {
            record_id: r.record_id.clone(),
            message: message.to_string(),
        };
        let (w, l) = r.pair_refs().ok_or_else(|| bad("complete record without winner"))?;
        let condition = conditions.get(r.prompt_id).ok_or_else(|| bad("unknown prompt id"))?;
        Ok(PreferencePair {
            condition: condition.clone(),
            winner: LatentSample::clean(self.get_vector(w)?),
            loser: LatentSample::clean(self.get_vector(l)?),
            provenance: Provenance::Curated,
            flipped: r.flipped,
        })
    }

    /// Writes every record, sorted by id, one JSON object per line.
    pub fn export_jsonl(&self, path: &Path) -> Result<usize, StoreError> {
        let mut out = Vec::new();
        for r in self.records.values() {
            serde_json::to_writer(&mut out, r).expect("record serialises");
            out.push(b'\n');
        }
        write_atomic(path, &out)?;
        Ok(self.records.len())
    }

    /// Appends records from an exported file; returns how many were new.
    pub fn import_jsonl(&mut self, path: &Path) -> Result<usize, StoreError> {
        let file = File::open(path)?;
        let mut added = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: CurationRecord = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !self.contains(&rec.record_id) {
                added += 1;
            }
            self.append_record(&rec)?;
        }
        Ok(added)
    }

    /// Builds the manifest over the records whose ids are in `ids`
    /// (all records when `None`).
    pub fn build_manifest(&self, config_hash: &str, ids: Option<&[String]>, pending: usize) -> DatasetManifest {
        let selected: Vec<&CurationRecord> = match ids {
            None => self.records.values().collect(),
            Some(ids) => {
                let mut v: Vec<&CurationRecord> = ids.iter().filter_map(|id| self.records.get(id)).collect();
                v.sort_by(|a, b| a.record_id.cmp(&b.record_id));
                v.dedup_by(|a, b| a.record_id == b.record_id);
                v
            }
        };
        let mut counts: BTreeMap<String, usize> = ["complete", "dropped", "failed", "pending"]
            .iter()
            .map(|s| (s.to_string(), 0))
            .collect();
        *counts.get_mut("pending").unwrap() = pending;
        let mut failures = Vec::new();
        let (mut scored, mut wins) = (0usize, 0usize);
        let (mut train_ids, mut heldout_ids) = (Vec::new(), Vec::new());
        for r in &selected {
            *counts.entry(r.status.label().to_string()).or_default() += 1;
            match &r.status {
                RecordStatus::Failed { stage, reason } => failures.push(Failure {
                    record_id: r.record_id.clone(),
                    stage: stage.to_string(),
                    reason: reason.clone(),
                }),
                RecordStatus::Complete | RecordStatus::Dropped => {
                    scored += 1;
                    if let (Some(o), Some(e)) = (r.score_original, r.score_edited) {
                        if e > o {
                            wins += 1;
                        }
                    }
                    if r.status == RecordStatus::Complete {
                        match self.split.assign(&r.record_id) {
                            Split::Heldout => heldout_ids.push(r.record_id.clone()),
                            _ => train_ids.push(r.record_id.clone()),
                        }
                    }
                }
                _ => {}
            }
        }
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            record_count: selected.len(),
            counts,
            win_rate: (scored > 0).then(|| wins as f64 / scored as f64),
            failures,
            split: self.split,
            train_ids,
            heldout_ids,
            created_by: concat!("rpo ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn write_manifest(&self, manifest: &DatasetManifest) -> Result<PathBuf, StoreError> {
        let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serialises");
        bytes.push(b'\n');
        let path = self.manifest_path();
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn read_manifest(&self) -> Result<DatasetManifest, StoreError> {
        let bytes = fs::read(self.manifest_path())?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Parse {
            line: 0,
            message: e.to_string(),
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
