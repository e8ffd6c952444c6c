//! Deterministic critic, instructor, editor and scorer over a [`VectorWorld`].
//!
//! The critic reports the signed deviation of each coordinate from the
//! nearest target mode, bucketed into `low`, `ok` and `high`. The instructor
//! turns that into direction phrases such as
//! `decrease coordinate 0 toward mode 2`, and the editor steps the original
//! towards the named mode along the instructed coordinates.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::protocol::*;
use super::world::{score_vector, RewardKind, VectorWorld, WorldError};
use super::{BackendError, Critic, Editor, Instructor, Scorer};
use crate::diffusion::standard_normal;

/// How much the mock critic reveals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Informativeness {
    /// Nearest mode and every coordinate.
    Full,
    /// Only the worst coordinate, without the mode.
    Partial,
    /// A fixed generic sentence.
    None,
}

impl std::str::FromStr for Informativeness {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "partial" => Ok(Self::Partial),
            "none" => Ok(Self::None),
            other => Err(format!("unknown informativeness {other:?}")),
        }
    }
}

impl std::fmt::Display for Informativeness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Partial => "partial",
            Self::None => "none",
        })
    }
}

pub const GENERIC_CRITIQUE: &str = "The image looks broadly consistent with the prompt.";
pub const GENERIC_INSTRUCTION: &str = "keep the layout unchanged; keep other details unchanged";
const PAD_ITEM: &str = "keep other details unchanged";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockOptions {
    pub informativeness: Informativeness,
    pub reward: RewardKind,
}

impl Default for MockOptions {
    fn default() -> Self {
        Self {
            informativeness: Informativeness::Full,
            reward: RewardKind::NegSqDistanceToNearestMode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bucket {
    Low,
    Ok,
    High,
}

impl Bucket {
    fn of(deviation: f64, tolerance: f64) -> Self {
        if deviation > tolerance {
            Self::High
        } else if deviation < -tolerance {
            Self::Low
        } else {
            Self::Ok
        }
    }

    fn word(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Ok => "ok",
            Self::High => "high",
        }
    }
}

/// A correction parsed from a critique or computed from a sample.
#[derive(Debug, Clone, PartialEq)]
struct Finding {
    coordinate: usize,
    bucket: Bucket,
    deviation: f64,
}

fn findings(world: &VectorWorld, k: usize, x: &[f64]) -> Result<(usize, Vec<Finding>), WorldError> {
    let (j, _) = world.nearest_mode(k, x)?;
    let mu = &world.modes(k)?[j].mean;
    let out = x
        .iter()
        .zip(mu)
        .enumerate()
        .map(|(i, (xi, mi))| {
            let deviation = xi - mi;
            Finding {
                coordinate: i,
                bucket: Bucket::of(deviation, world.ok_tolerance),
                deviation,
            }
        })
        .collect();
    Ok((j, out))
}

/// Largest deviation first, index breaking ties.
fn by_severity(mut items: Vec<Finding>) -> Vec<Finding> {
    items.sort_by(|a, b| {
        b.deviation
            .abs()
            .total_cmp(&a.deviation.abs())
            .then(a.coordinate.cmp(&b.coordinate))
    });
    items
}

pub fn mock_critic(
    world: &VectorWorld,
    condition_id: usize,
    prompt: &str,
    x: &[f64],
    informativeness: Informativeness,
) -> Result<String, WorldError> {
    let (j, found) = findings(world, condition_id, x)?;
    let mut out = String::new();
    match informativeness {
        Informativeness::None => return Ok(GENERIC_CRITIQUE.to_string()),
        Informativeness::Full => {
            write!(out, "Prompt: {prompt}. Nearest target mode: {j}.").unwrap();
            for f in &found {
                write!(out, " Coordinate {}: {} ({:+.3}).", f.coordinate, f.bucket.word(), f.deviation).unwrap();
            }
        }
        Informativeness::Partial => {
            write!(out, "Prompt: {prompt}.").unwrap();
            let worst = by_severity(found).into_iter().next().expect("dimension >= 1");
            if worst.bucket == Bucket::Ok {
                out.push_str(" All coordinates ok.");
            } else {
                write!(out, " Coordinate {}: {} ({:+.3}).", worst.coordinate, worst.bucket.word(), worst.deviation).unwrap();
            }
        }
    }
    Ok(out)
}

fn parse_critique(critique: &str) -> (Option<usize>, Vec<Finding>) {
    let mut mode = None;
    let mut found = Vec::new();
    for sentence in critique.split(". ") {
        let sentence = sentence.trim().trim_end_matches('.');
        if let Some(rest) = sentence.strip_prefix("Nearest target mode: ") {
            mode = rest.trim().parse().ok();
        } else if let Some(rest) = sentence.strip_prefix("Coordinate ") {
            // "<i>: <bucket> (<signed>)"
            let Some((idx, tail)) = rest.split_once(": ") else { continue };
            let Some((word, value)) = tail.split_once(' ') else { continue };
            let bucket = match word {
                "low" => Bucket::Low,
                "high" => Bucket::High,
                "ok" => Bucket::Ok,
                _ => continue,
            };
            let value = value.trim_start_matches('(').trim_end_matches(')');
            if let (Ok(coordinate), Ok(deviation)) = (idx.parse(), value.parse::<f64>()) {
                found.push(Finding { coordinate, bucket, deviation });
            }
        }
    }
    (mode, found)
}

fn render_instruction(mode: Option<usize>, found: Vec<Finding>) -> String {
    let found = by_severity(found);
    let mut items: Vec<String> = found
        .iter()
        .filter(|f| f.bucket != Bucket::Ok)
        .take(3)
        .map(|f| {
            let verb = if f.bucket == Bucket::High { "decrease" } else { "increase" };
            match mode {
                Some(j) => format!("{verb} coordinate {} toward mode {j}", f.coordinate),
                None => format!("{verb} coordinate {}", f.coordinate),
            }
        })
        .collect();
    if items.is_empty() {
        return GENERIC_INSTRUCTION.to_string();
    }
    for f in found.iter().filter(|f| f.bucket == Bucket::Ok) {
        if items.len() >= 2 {
            break;
        }
        items.push(format!("keep coordinate {} unchanged", f.coordinate));
    }
    if items.len() < 2 {
        items.push(PAD_ITEM.to_string());
    }
    items.join("; ")
}

/// Two-step mode reads the critique; one-step mode (`critique = None`)
/// recomputes the corrections from `x`.
pub fn mock_instructor(
    world: &VectorWorld,
    condition_id: usize,
    critique: Option<&str>,
    x: &[f64],
) -> Result<String, WorldError> {
    match critique {
        Some(text) => {
            let (mode, found) = parse_critique(text);
            Ok(render_instruction(mode, found))
        }
        None => {
            let (j, found) = findings(world, condition_id, x)?;
            Ok(render_instruction(Some(j), found))
        }
    }
}

/// (coordinate, sign) pairs and the named mode of an instruction.
fn parse_directions(instruction: &str) -> (Vec<(usize, f64)>, Option<usize>) {
    let mut dirs = Vec::new();
    let mut mode = None;
    for item in instruction.split(';') {
        let words: Vec<&str> = item.split_whitespace().collect();
        let sign = match words.first() {
            Some(&"increase") => 1.0,
            Some(&"decrease") => -1.0,
            _ => continue,
        };
        if words.get(1) != Some(&"coordinate") {
            continue;
        }
        let Some(Ok(i)) = words.get(2).map(|w| w.trim_end_matches('.').parse::<usize>()) else {
            continue;
        };
        if let (Some(&"toward"), Some(&"mode"), Some(j)) = (words.get(3), words.get(4), words.get(5)) {
            if let Ok(j) = j.trim_end_matches('.').parse() {
                mode = Some(j);
            }
        }
        dirs.push((i, sign));
    }
    (dirs, mode)
}

/// `x + eta * u + noise * z`, with `u` the unit vector toward the instructed
/// mode on the instructed coordinates, and the step clipped to
/// `eta + 4 * noise * sqrt(d)`.
pub fn mock_editor<R: rand::Rng + ?Sized>(
    world: &VectorWorld,
    condition_id: usize,
    instruction: &str,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>, WorldError> {
    world.check_dim(x)?;
    let modes = world.modes(condition_id)?;
    let (dirs, mode) = parse_directions(instruction);
    let mut u = vec![0.0; world.dim];
    for (i, sign) in dirs {
        if i >= world.dim {
            continue;
        }
        u[i] = match mode.and_then(|j| modes.get(j)) {
            Some(m) => m.mean[i] - x[i],
            None => sign,
        };
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|v| *v /= norm);
    }
    let z = standard_normal(rng, world.dim);
    let mut step: Vec<f64> = u
        .iter()
        .zip(&z)
        .map(|(ui, zi)| world.edit_step * ui + world.edit_noise * zi)
        .collect();
    let bound = world.edit_step + 4.0 * world.edit_noise * (world.dim as f64).sqrt();
    let len = step.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len > bound {
        step.iter_mut().for_each(|v| *v *= bound / len);
    }
    Ok(x.iter().zip(&step).map(|(a, b)| a + b).collect())
}

/// All four stages over one world.
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub world: Arc<VectorWorld>,
    pub options: MockOptions,
}

impl MockBackend {
    pub fn new(world: Arc<VectorWorld>, options: MockOptions) -> Self {
        Self { world, options }
    }

    /// Stable identifier of the world and options, for record identity.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&(&*self.world, &self.options)).expect("serialises");
        format!("mock:{}", &hex::encode(Sha256::digest(json))[..16])
    }

    fn condition(&self, prompt: &str) -> Result<usize, BackendError> {
        self.world
            .condition_for_prompt(prompt)
            .map_err(|e| BackendError::BadRequest(e.to_string()))
    }

    fn vector(&self, b64: &str) -> Result<Vec<f64>, BackendError> {
        let x = vector_from_b64(b64)?;
        self.world.check_dim(&x).map_err(|e| BackendError::BadRequest(e.to_string()))?;
        Ok(x)
    }

    /// Noise for one edit request: a pure function of the world seed and the request.
    fn edit_rng(&self, req: &EditRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.world.seed.to_le_bytes());
        for part in [&req.prompt, &req.instruction, &req.condition_image_b64] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let digest = h.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }
}

fn world_err(e: WorldError) -> BackendError {
    BackendError::BadRequest(e.to_string())
}

impl Critic for MockBackend {
    fn critique(&self, req: &CritiqueRequest) -> Result<CritiqueResponse, BackendError> {
        let k = self.condition(&req.prompt)?;
        let x = self.vector(&req.image_b64)?;
        let critique = mock_critic(&self.world, k, &req.prompt, &x, self.options.informativeness).map_err(world_err)?;
        Ok(CritiqueResponse { critique })
    }
}

impl Instructor for MockBackend {
    fn instruct(&self, req: &InstructRequest) -> Result<InstructResponse, BackendError> {
        let k = self.condition(&req.prompt)?;
        let x = self.vector(&req.image_b64)?;
        let instruction = mock_instructor(&self.world, k, req.critique.as_deref(), &x).map_err(world_err)?;
        Ok(InstructResponse { instruction })
    }
}

impl Editor for MockBackend {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse, BackendError> {
        // The edit text is "<prompt>; <item>; <item>".
        let base = req.prompt.split("; ").next().unwrap_or_default();
        let k = self.condition(base)?;
        let x = self.vector(&req.condition_image_b64)?;
        let mut rng = self.edit_rng(req);
        let edited = mock_editor(&self.world, k, &req.instruction, &x, &mut rng).map_err(world_err)?;
        Ok(EditResponse {
            image_b64: vector_to_b64(&edited),
        })
    }
}

impl Scorer for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let k = self.condition(&req.prompt)?;
        let x = self.vector(&req.image_b64)?;
        let score = score_vector(&self.world, self.options.reward, k, &x).map_err(world_err)?;
        Ok(ScoreResponse { score })
    }
}
