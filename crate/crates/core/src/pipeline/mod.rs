//! The curation chain: critique, instruction, edit and reward relabeling,
//! driven concurrently over a batch of prompts and persisted to a
//! [`DatasetStore`].

use std::collections::HashSet;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    b64_decode, b64_encode, encode_vector, BackendError, BackendSet, CritiqueRequest, EditRequest, EndpointConfig, Instructor,
    InstructRequest, RetryPolicy, RewardFunction, ScoreRequest, VectorWorld, WorldError,
};
use crate::diffusion::{LatentSample, PromptCondition};
use crate::store::{DatasetManifest, DatasetStore, StoreError};
use crate::trainer::{PreferencePair, Provenance};

pub mod format;
pub mod record;
pub mod templates;

pub use format::{compose_edit_text, parse_instruction, FormatError, FormatViolation, InstructionFormat};
pub use record::{record_id, CurationRecord, RecordStatus, Stage, Winner};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Reward(#[from] WorldError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidInstructionPolicy {
    /// Ask once more with the same template, then fail the record.
    #[default]
    Retry,
    FailRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    #[default]
    Drop,
    KeepOriginalAsWinner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Critique first, then instructions from the critique.
    #[default]
    TwoStep,
    /// Instructions straight from the prompt and image.
    OneStep,
}

/// Remote endpoints per stage; a missing entry means the in-process mock.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub critic: Option<EndpointConfig>,
    pub instructor: Option<EndpointConfig>,
    pub editor: Option<EndpointConfig>,
    pub scorer: Option<EndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub endpoints: Endpoints,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub on_invalid_instruction: InvalidInstructionPolicy,
    pub tie_policy: TiePolicy,
    pub chain: ChainMode,
    /// Fail instructions that mention words found in neither prompt nor critique.
    pub stray_content_check: bool,
    pub seed: u64,
    /// Identifies the backends' behaviour (for example the mock world and
    /// critic level) so different backends give different record ids.
    pub backend_fingerprint: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            endpoints: Endpoints::default(),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            on_invalid_instruction: InvalidInstructionPolicy::default(),
            tie_policy: TiePolicy::default(),
            chain: ChainMode::default(),
            stray_content_check: false,
            seed: 0,
            backend_fingerprint: String::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_in_flight == 0 {
            return Err(PipelineError::Config("max_in_flight must be at least 1".into()));
        }
        self.retry.validate().map_err(PipelineError::Config)
    }

    /// Hash of everything that can change a record's content. Concurrency
    /// and retry timing are excluded.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            endpoints: &'a Endpoints,
            on_invalid_instruction: InvalidInstructionPolicy,
            tie_policy: TiePolicy,
            chain: ChainMode,
            stray_content_check: bool,
            seed: u64,
            backend_fingerprint: &'a str,
        }
        let id = Identity {
            endpoints: &self.endpoints,
            on_invalid_instruction: self.on_invalid_instruction,
            tie_policy: self.tie_policy,
            chain: self.chain,
            stray_content_check: self.stray_content_check,
            seed: self.seed,
            backend_fingerprint: &self.backend_fingerprint,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&id).expect("serialises")))
    }
}

pub fn run_critique(backends: &BackendSet, prompt_text: &str, image: &[u8]) -> Result<String, PipelineError> {
    if prompt_text.trim().is_empty() {
        return Err(PipelineError::Precondition("prompt is empty".into()));
    }
    let req = CritiqueRequest {
        prompt: prompt_text.to_string(),
        image_b64: b64_encode(image),
        rendered_prompt: Some(templates::render_critic(prompt_text)),
    };
    let critique = backends.critic.critique(&req)?.critique;
    if critique.trim().is_empty() {
        return Err(BackendError::EmptyResponse.into());
    }
    Ok(critique)
}

/// Raw instruction text and its parsed items. `critique = None` selects the
/// one-step template.
pub fn run_instruct(
    instructor: &dyn Instructor,
    prompt_text: &str,
    critique: Option<&str>,
    image: &[u8],
    policy: InvalidInstructionPolicy,
) -> Result<(String, Vec<String>), PipelineError> {
    if prompt_text.trim().is_empty() {
        return Err(PipelineError::Precondition("prompt is empty".into()));
    }
    if critique.is_some_and(|c| c.trim().is_empty()) {
        return Err(PipelineError::Precondition("critique is empty".into()));
    }
    let req = InstructRequest {
        prompt: prompt_text.to_string(),
        critique: critique.map(str::to_string),
        image_b64: b64_encode(image),
        rendered_prompt: Some(templates::render_instruct(prompt_text, critique)),
    };
    let attempts = match policy {
        InvalidInstructionPolicy::Retry => 2,
        InvalidInstructionPolicy::FailRecord => 1,
    };
    let mut last = None;
    for _ in 0..attempts {
        let raw = instructor.instruct(&req)?.instruction;
        match parse_instruction(&raw, &InstructionFormat::default()) {
            Ok(items) => return Ok((raw, items)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Sends the original as the conditioning image with the prompt and items
/// concatenated; returns the edited blob.
pub fn run_edit(backends: &BackendSet, prompt_text: &str, items: &[String], original: &[u8]) -> Result<Vec<u8>, PipelineError> {
    let req = EditRequest {
        prompt: compose_edit_text(prompt_text, items),
        instruction: items.join(format::EDIT_TEXT_SEPARATOR),
        condition_image_b64: b64_encode(original),
    };
    let resp = backends.editor.edit(&req)?;
    let bytes = b64_decode(&resp.image_b64).map_err(|e| BackendError::Malformed(e.to_string()))?;
    if bytes.is_empty() {
        return Err(BackendError::EmptyResponse.into());
    }
    Ok(bytes)
}

/// Outcome of comparing an original with its edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep { winner: Winner, flipped: bool },
    Drop,
}

/// The relabel rule: the higher score wins; an edit that loses flips the pair.
pub fn decide(score_original: f64, score_edited: f64, tie_policy: TiePolicy) -> Verdict {
    if score_edited > score_original {
        Verdict::Keep {
            winner: Winner::Edited,
            flipped: false,
        }
    } else if score_edited < score_original {
        Verdict::Keep {
            winner: Winner::Original,
            flipped: true,
        }
    } else {
        match tie_policy {
            TiePolicy::Drop => Verdict::Drop,
            TiePolicy::KeepOriginalAsWinner => Verdict::Keep {
                winner: Winner::Original,
                flipped: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relabeled {
    /// `None` when dropped.
    pub pair: Option<PreferencePair>,
    pub verdict: Verdict,
    pub score_original: f64,
    pub score_edited: f64,
}

pub fn relabel(
    scorer: &dyn RewardFunction,
    prompt: &PromptCondition,
    original: &LatentSample,
    edited: &LatentSample,
    tie_policy: TiePolicy,
) -> Result<Relabeled, PipelineError> {
    let so = scorer.score(prompt, &original.values)?;
    let se = scorer.score(prompt, &edited.values)?;
    let verdict = decide(so, se, tie_policy);
    let pair = match verdict {
        Verdict::Drop => None,
        Verdict::Keep { winner, flipped } => {
            let (w, l) = match winner {
                Winner::Edited => (edited, original),
                Winner::Original => (original, edited),
            };
            Some(PreferencePair {
                condition: prompt.clone(),
                winner: w.clone(),
                loser: l.clone(),
                provenance: Provenance::Curated,
                flipped,
            })
        }
    };
    Ok(Relabeled {
        pair,
        verdict,
        score_original: so,
        score_edited: se,
    })
}

/// Reorders every pair so the higher-scored item wins; ties and pairs the
/// scorer cannot handle are dropped.
pub fn relabel_offline_dataset(scorer: &dyn RewardFunction, pairs: &[PreferencePair]) -> Vec<PreferencePair> {
    pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let scores = scorer
                .score(&p.condition, &p.winner.values)
                .and_then(|w| Ok((w, scorer.score(&p.condition, &p.loser.values)?)));
            match scores {
                Ok((w, l)) if w > l => Some(PreferencePair {
                    provenance: Provenance::RelabeledOffline,
                    ..p.clone()
                }),
                Ok((w, l)) if w < l => Some(PreferencePair {
                    condition: p.condition.clone(),
                    winner: p.loser.clone(),
                    loser: p.winner.clone(),
                    provenance: Provenance::RelabeledOffline,
                    flipped: !p.flipped,
                }),
                Ok(_) => {
                    tracing::debug!(pair = i, "dropping tied pair");
                    None
                }
                Err(e) => {
                    tracing::warn!(pair = i, error = %e, "dropping unscoreable pair");
                    None
                }
            }
        })
        .collect()
}

/// Words in `instruction` absent from both `prompt` and `critique`, ignoring
/// short function words and digits.
pub fn stray_words(instruction: &[String], prompt: &str, critique: Option<&str>) -> Vec<String> {
    let norm = |w: &str| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    let mut known: HashSet<String> = prompt.split_whitespace().map(norm).collect();
    if let Some(c) = critique {
        known.extend(c.split_whitespace().map(norm));
    }
    const COMMON: &[&str] = &[
        "the", "a", "an", "to", "of", "and", "in", "on", "with", "make", "add", "remove", "change", "keep",
        "increase", "decrease", "more", "less", "toward", "unchanged", "other", "details", "layout",
    ];
    let mut out = Vec::new();
    for item in instruction {
        for w in item.split_whitespace().map(norm) {
            if w.len() > 2
                && !w.chars().all(|c| c.is_ascii_digit())
                && !COMMON.contains(&w.as_str())
                && !known.contains(&w)
                && !out.contains(&w)
            {
                out.push(w);
            }
        }
    }
    out
}

/// One prompt and the generated image to curate.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationInput {
    pub condition: PromptCondition,
    pub original: Vec<u8>,
}

/// `n` base-generator draws cycling through the world's conditions, as
/// `f32` vector blobs.
pub fn world_inputs(world: &VectorWorld, n: usize, seed: u64) -> Vec<CurationInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = i % world.num_conditions;
            let x = world.sample_original(k, &mut rng).expect("condition in range");
            CurationInput {
                condition: world.condition(k).expect("condition in range"),
                original: encode_vector(&x.values),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CurateOptions {
    /// Process at most this many new records, leaving the rest pending.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateOutcome {
    pub manifest: DatasetManifest,
    /// Records processed by this invocation.
    pub processed: usize,
    pub record_ids: Vec<String>,
}

/// Drives one record through the chain. Never returns an error: failures
/// are recorded in the status.
fn process_record(
    input: &CurationInput,
    mut rec: CurationRecord,
    config: &PipelineConfig,
    backends: &BackendSet,
    store: &Mutex<&mut DatasetStore>,
) -> Result<CurationRecord, StoreError> {
    let prompt = input.condition.prompt_text.as_str();
    let original = input.original.as_slice();

    if config.chain == ChainMode::TwoStep {
        match run_critique(backends, prompt, original) {
            Ok(c) => {
                rec.critique = Some(c);
                rec.status = RecordStatus::Critiqued;
            }
            Err(e) => {
                rec.fail(Stage::Critiqued, e.to_string());
                return Ok(rec);
            }
        }
    }

    match run_instruct(
        backends.instructor.as_ref(),
        prompt,
        rec.critique.as_deref(),
        original,
        config.on_invalid_instruction,
    ) {
        Ok((raw, items)) => {
            rec.instruction_raw = Some(raw);
            rec.instruction_items = items;
            rec.status = RecordStatus::Instructed;
        }
        Err(e) => {
            rec.fail(Stage::Instructed, e.to_string());
            return Ok(rec);
        }
    }
    if config.stray_content_check {
        let stray = stray_words(&rec.instruction_items, prompt, rec.critique.as_deref());
        if !stray.is_empty() {
            rec.fail(Stage::Instructed, format!("stray content: {}", stray.join(", ")));
            return Ok(rec);
        }
    }

    let edited = match run_edit(backends, prompt, &rec.instruction_items, original) {
        Ok(b) => b,
        Err(e) => {
            rec.fail(Stage::Edited, e.to_string());
            return Ok(rec);
        }
    };
    let edited_ref = store.lock().expect("store lock").put_blob(&edited)?;
    rec.edited_ref = Some(edited_ref);
    rec.status = RecordStatus::Edited;

    let score = |blob: &[u8]| -> Result<f64, BackendError> {
        let s = backends
            .scorer
            .score(&ScoreRequest {
                prompt: prompt.to_string(),
                image_b64: b64_encode(blob),
            })?
            .score;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(BackendError::Malformed("non-finite score".into()))
        }
    };
    let (so, se) = match score(original).and_then(|so| Ok((so, score(&edited)?))) {
        Ok(s) => s,
        Err(e) => {
            rec.fail(Stage::Scored, e.to_string());
            return Ok(rec);
        }
    };
    rec.score_original = Some(so);
    rec.score_edited = Some(se);
    rec.status = RecordStatus::Scored;

    match decide(so, se, config.tie_policy) {
        Verdict::Keep { winner, flipped } => {
            rec.winner = Some(winner);
            rec.flipped = flipped;
            rec.status = RecordStatus::Complete;
        }
        Verdict::Drop => rec.status = RecordStatus::Dropped,
    }
    Ok(rec)
}

/// Curates `inputs` into `store` and writes the manifest.
///
/// Records already in the store (by id) are skipped, so a rerun issues no
/// backend calls and an interrupted run resumes where it stopped. Only
/// terminal records are persisted; a record interrupted mid-chain is redone
/// from the start, which the deterministic backends make equivalent.
pub fn curate(
    inputs: &[CurationInput],
    config: &PipelineConfig,
    backends: &BackendSet,
    store: &mut DatasetStore,
    options: CurateOptions,
) -> Result<CurateOutcome, PipelineError> {
    config.validate()?;
    let config_hash = config.config_hash();

    let mut ids = Vec::with_capacity(inputs.len());
    let mut todo = Vec::new();
    let mut seen = HashSet::new();
    for input in inputs {
        let id = record_id(input.condition.condition_id, &input.original, &config_hash);
        if seen.insert(id.clone()) && !store.contains(&id) {
            todo.push((input, id.clone()));
        }
        ids.push(id);
    }
    let limit = options.stop_after.unwrap_or(usize::MAX).min(todo.len());
    todo.truncate(limit);

    let shared = Mutex::new(&mut *store);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let result: Result<(), StoreError> = pool.install(|| {
        todo.par_iter().try_for_each(|(input, id)| {
            let original_ref = shared.lock().expect("store lock").put_blob(&input.original)?;
            let rec = CurationRecord::new(
                id.clone(),
                input.condition.condition_id,
                input.condition.prompt_text.clone(),
                original_ref,
            );
            let rec = process_record(input, rec, config, backends, &shared)?;
            shared.lock().expect("store lock").append_record(&rec)
        })
    });

    let pending = seen.iter().filter(|id| !store.contains(id)).count();
    let manifest = store.build_manifest(&config_hash, Some(&ids), pending);
    store.write_manifest(&manifest)?;
    result?;
    let mut record_ids = ids;
    record_ids.sort();
    record_ids.dedup();
    Ok(CurateOutcome {
        manifest,
        processed: limit,
        record_ids,
    })
}
