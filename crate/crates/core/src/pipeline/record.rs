use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Stage a record was in when it failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Critiqued,
    Instructed,
    Edited,
    Scored,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Critiqued => "critiqued",
            Self::Instructed => "instructed",
            Self::Edited => "edited",
            Self::Scored => "scored",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RecordStatus {
    Pending,
    Critiqued,
    Instructed,
    Edited,
    Scored,
    Complete,
    /// Scored but excluded from the dataset (equal scores under the drop policy).
    Dropped,
    Failed { stage: Stage, reason: String },
}

impl RecordStatus {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Pending => "pending",
            Self::Critiqued => "critiqued",
            Self::Instructed => "instructed",
            Self::Edited => "edited",
            Self::Scored => "scored",
            Self::Complete => "complete",
            Self::Dropped => "dropped",
            Self::Failed { .. } => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Complete | Self::Dropped | Self::Failed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Edited,
    Original,
}

/// One traversal of critique, instruction, edit and relabel. Blob references
/// are content hashes in the dataset store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub record_id: String,
    pub prompt_id: usize,
    pub prompt_text: String,
    pub original_ref: String,
    pub critique: Option<String>,
    pub instruction_raw: Option<String>,
    pub instruction_items: Vec<String>,
    pub edited_ref: Option<String>,
    pub score_original: Option<f64>,
    pub score_edited: Option<f64>,
    pub winner: Option<Winner>,
    pub flipped: bool,
    pub status: RecordStatus,
}

impl CurationRecord {
    pub fn new(record_id: String, prompt_id: usize, prompt_text: String, original_ref: String) -> Self {
        Self {
            record_id,
            prompt_id,
            prompt_text,
            original_ref,
            critique: None,
            instruction_raw: None,
            instruction_items: Vec::new(),
            edited_ref: None,
            score_original: None,
            score_edited: None,
            winner: None,
            flipped: false,
            status: RecordStatus::Pending,
        }
    }

    pub fn fail(&mut self, stage: Stage, reason: impl Into<String>) {
        self.status = RecordStatus::Failed {
            stage,
            reason: reason.into(),
        };
    }

    /// (winner, loser) blob references of a complete record.
    pub fn pair_refs(&self) -> Option<(&str, &str)> {
        if self.status != RecordStatus::Complete {
            return None;
        }
        let edited = self.edited_ref.as_deref()?;
        match self.winner? {
            Winner::Edited => Some((edited, &self.original_ref)),
            Winner::Original => Some((&self.original_ref, edited)),
        }
    }
}

/// `sha256(prompt_id, original bytes, config hash)`, hex encoded.
pub fn record_id(prompt_id: usize, original: &[u8], config_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update((prompt_id as u64).to_le_bytes());
    h.update((original.len() as u64).to_le_bytes());
    h.update(original);
    h.update(config_hash.as_bytes());
    hex::encode(h.finalize())
}
