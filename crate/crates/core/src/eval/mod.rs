//! Reward evaluation of trained models, paired comparisons with bootstrap
//! intervals, data-scaling sweeps, critic ablations and report emission.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{BackendSet, MockBackend, MockOptions, RewardFunction, VectorWorld, WorldError};
use crate::diffusion::{sample_ancestral, DenoiserModel, DiffusionError, LatentSample, NoiseSchedule, PromptCondition, WeightFn};
use crate::pipeline::{curate, ChainMode, CurateOptions, CurationInput, PipelineConfig, PipelineError};
use crate::store::{DatasetStore, Split, SplitConfig, StoreError};
use crate::trainer::{train_dpo, DpoConfig, PreferencePair, TrainError};

mod report;

pub use report::{emit_report, parse_csv, round_sig, ReportFormat};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MIN_BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Reward(#[from] WorldError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("malformed report: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generations per condition.
    pub n_samples: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            seed: 0,
            bootstrap_resamples: 2000,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if self.n_samples == 0 {
            return Err(EvalError::Invalid("n_samples must be at least 1".into()));
        }
        if self.bootstrap_resamples < MIN_BOOTSTRAP_RESAMPLES {
            return Err(EvalError::Invalid(format!(
                "bootstrap_resamples must be at least {MIN_BOOTSTRAP_RESAMPLES}"
            )));
        }
        Ok(())
    }
}

/// One line of a report. Optional columns are empty in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Model name, `size=N`, `level=full`, `a-vs-b` and so on.
    pub group: String,
    pub reward: String,
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub win_fraction: Option<f64>,
    /// Reference-model mean under the same reward and seeds.
    pub baseline_mean: Option<f64>,
    pub diverged: usize,
}

impl ReportRow {
    fn rounded(mut self) -> Self {
        self.mean = round_sig(self.mean);
        self.std_error = round_sig(self.std_error);
        for v in [&mut self.ci_low, &mut self.ci_high, &mut self.win_fraction, &mut self.baseline_mean]
            .into_iter()
            .flatten()
        {
            *v = round_sig(*v);
        }
        self
    }
}

/// Numeric values are held at 9 significant digits so every emitted format
/// carries identical numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub title: String,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Wall clock of the run; never written to report files.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn new(title: impl Into<String>, n_samples: usize, seeds: Vec<u64>, rows: Vec<ReportRow>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            title: title.into(),
            n_samples,
            seeds,
            rows: rows.into_iter().map(ReportRow::rounded).collect(),
            runtime_secs: 0.0,
        }
    }

    pub fn row(&self, group: &str, reward: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group && r.reward == reward)
    }
}

/// Seed of draw `j` for condition `c`: shared by every model evaluated with
/// the same base seed, which is what pairs the comparisons.
pub fn draw_seed(seed: u64, condition_id: usize, j: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((condition_id as u64).to_le_bytes());
    h.update((j as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Generations for every (condition, draw) in a fixed order; `None` where the
/// sampler diverged.
pub fn generate(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    conditions: &[PromptCondition],
    n_samples: usize,
    seed: u64,
) -> Vec<(usize, Option<LatentSample>)> {
    let cells: Vec<(usize, usize)> = (0..conditions.len())
        .flat_map(|ci| (0..n_samples).map(move |j| (ci, j)))
        .collect();
    cells
        .par_iter()
        .map(|&(ci, j)| {
            let c = &conditions[ci];
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed, c.condition_id, j));
            match sample_ancestral(model, schedule, c, &mut rng) {
                Ok(x) => (ci, Some(x)),
                Err(DiffusionError::NonFinite(_)) => (ci, None),
                Err(e) => panic!("sampler rejected valid inputs: {e}"),
            }
        })
        .collect()
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_inputs(model: &DenoiserModel, conditions: &[PromptCondition], rewards: usize) -> Result<(), EvalError> {
    if conditions.is_empty() {
        return Err(EvalError::Invalid("no conditions".into()));
    }
    if rewards == 0 {
        return Err(EvalError::Invalid("no reward functions".into()));
    }
    let arch = model.architecture();
    if conditions.iter().any(|c| c.embedding.len() != arch.cond_dim) {
        return Err(EvalError::Invalid("condition embedding does not match the model".into()));
    }
    Ok(())
}

/// Per-reward mean and standard error over every prompt's generations.
/// Diverged samples are counted and left out of the means.
pub fn evaluate_rows(
    name: &str,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    conditions: &[PromptCondition],
    rewards: &[Arc<dyn RewardFunction>],
    config: &EvalConfig,
) -> Result<Vec<ReportRow>, EvalError> {
    config.validate()?;
    check_inputs(model, conditions, rewards.len())?;
    let samples = generate(model, schedule, conditions, config.n_samples, config.seed);
    let diverged = samples.iter().filter(|(_, x)| x.is_none()).count();
    if diverged > 0 {
        tracing::warn!(model = name, diverged, "sampler diverged; excluded from means");
    }
    rewards
        .iter()
        .map(|r| {
            let scores = samples
                .iter()
                .filter_map(|(ci, x)| x.as_ref().map(|x| r.score(&conditions[*ci], &x.values)))
                .collect::<Result<Vec<f64>, _>>()?;
            let (mean, std_error) = mean_and_se(&scores);
            Ok(ReportRow {
                group: name.to_string(),
                reward: r.name(),
                mean,
                std_error,
                n: scores.len(),
                ci_low: None,
                ci_high: None,
                win_fraction: None,
                baseline_mean: None,
                diverged,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    conditions: &[PromptCondition],
    rewards: &[Arc<dyn RewardFunction>],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    let rows = evaluate_rows("model", model, schedule, conditions, rewards, config)?;
    let mut report = EvalReport::new("evaluate", config.n_samples, vec![config.seed], rows);
    report.runtime_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub mean_difference: f64,
    pub std_error: f64,
    /// Fraction of draws where `a` scores higher; ties count one half.
    pub win_fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub resamples: usize,
}

/// Percentile bootstrap of the mean of `d`.
pub fn bootstrap_ci(d: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

pub fn paired_stats(d: &[f64], resamples: usize, seed: u64) -> PairedStats {
    let (mean, se) = mean_and_se(d);
    let wins = d.iter().map(|&v| if v > 0.0 { 1.0 } else if v == 0.0 { 0.5 } else { 0.0 }).sum::<f64>();
    let (lo, hi) = bootstrap_ci(d, resamples, seed);
    PairedStats {
        mean_difference: mean,
        std_error: se,
        win_fraction: wins / d.len() as f64,
        ci_low: lo,
        ci_high: hi,
        n: d.len(),
        resamples,
    }
}

/// Reward of `a` minus reward of `b`, with both samplers driven by the same
/// noise on every draw.
pub fn compare_paired(
    a: &DenoiserModel,
    b: &DenoiserModel,
    schedule: &NoiseSchedule,
    conditions: &[PromptCondition],
    reward: &dyn RewardFunction,
    config: &EvalConfig,
) -> Result<PairedStats, EvalError> {
    config.validate()?;
    check_inputs(a, conditions, 1)?;
    check_inputs(b, conditions, 1)?;
    let xa = generate(a, schedule, conditions, config.n_samples, config.seed);
    let xb = generate(b, schedule, conditions, config.n_samples, config.seed);
    let mut d = Vec::with_capacity(xa.len());
    for ((ci, sa), (_, sb)) in xa.iter().zip(&xb) {
        if let (Some(sa), Some(sb)) = (sa, sb) {
            let c = &conditions[*ci];
            d.push(reward.score(c, &sa.values)? - reward.score(c, &sb.values)?);
        }
    }
    if d.is_empty() {
        return Err(EvalError::Invalid("every paired draw diverged".into()));
    }
    Ok(paired_stats(&d, config.bootstrap_resamples, config.seed ^ 0x5eed))
}

pub fn paired_row(group: &str, reward: &str, s: &PairedStats) -> ReportRow {
    ReportRow {
        group: group.to_string(),
        reward: reward.to_string(),
        mean: s.mean_difference,
        std_error: s.std_error,
        n: s.n,
        ci_low: Some(s.ci_low),
        ci_high: Some(s.ci_high),
        win_fraction: Some(s.win_fraction),
        baseline_mean: None,
        diverged: 0,
    }
}

/// Everything a train-then-evaluate cell needs besides its data.
#[derive(Clone)]
pub struct CellSetup<'a> {
    pub reference: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub weight_fn: &'a WeightFn,
    pub dpo: &'a DpoConfig,
    pub eval: &'a EvalConfig,
    pub conditions: &'a [PromptCondition],
    pub rewards: &'a [Arc<dyn RewardFunction>],
}

impl CellSetup<'_> {
    fn reference_rows(&self) -> Result<Vec<ReportRow>, EvalError> {
        evaluate_rows("reference", self.reference, self.schedule, self.conditions, self.rewards, self.eval)
    }

    /// Trains on `pairs` (reference itself when empty) and evaluates.
    fn train_and_evaluate(&self, group: &str, pairs: &[PreferencePair]) -> Result<(DenoiserModel, Vec<ReportRow>), EvalError> {
        let model = if pairs.is_empty() {
            self.reference.clone()
        } else {
            train_dpo(self.dpo, pairs, self.reference, self.schedule, self.weight_fn)?.0
        };
        let rows = evaluate_rows(group, &model, self.schedule, self.conditions, self.rewards, self.eval)?;
        Ok((model, rows))
    }
}

fn with_baseline(mut rows: Vec<ReportRow>, baseline: &[ReportRow]) -> Vec<ReportRow> {
    for r in &mut rows {
        r.baseline_mean = baseline.iter().find(|b| b.reward == r.reward).map(|b| b.mean);
    }
    rows
}

/// Trains on the first `size` pairs (in the given order, normally record id
/// order) for each size and evaluates. Size 0 is the reference model.
pub fn scaling_sweep(sizes: &[usize], pairs: &[PreferencePair], setup: &CellSetup<'_>) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    if let Some(&too_big) = sizes.iter().find(|&&s| s > pairs.len()) {
        return Err(EvalError::Invalid(format!("size {too_big} exceeds the {} available pairs", pairs.len())));
    }
    let baseline = setup.reference_rows()?;
    let mut rows = Vec::new();
    for &size in sizes {
        let (_, r) = setup.train_and_evaluate(&format!("size={size}"), &pairs[..size])?;
        rows.extend(with_baseline(r, &baseline));
    }
    let mut report = EvalReport::new("scaling_sweep", setup.eval.n_samples, vec![setup.dpo.seed, setup.eval.seed], rows);
    report.runtime_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// A curation variant for the ablations.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub mock: MockOptions,
    pub chain: ChainMode,
}

/// Curates `inputs` with each variant's mock backends into its own store
/// under `work_dir`, trains on the train split and evaluates. Every variant
/// shares the inputs, seeds and reference.
#[allow(clippy::too_many_arguments)]
pub fn ablation(
    title: &str,
    variants: &[Variant],
    world: &Arc<VectorWorld>,
    inputs: &[CurationInput],
    pipeline: &PipelineConfig,
    split: SplitConfig,
    setup: &CellSetup<'_>,
    work_dir: &Path,
) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    let baseline = setup.reference_rows()?;
    let mut rows = Vec::new();
    for v in variants {
        let backend = MockBackend::new(world.clone(), v.mock);
        let config = PipelineConfig {
            chain: v.chain,
            backend_fingerprint: backend.fingerprint(),
            ..pipeline.clone()
        };
        let mut store = DatasetStore::open(work_dir.join(&v.label), split)?;
        curate(inputs, &config, &BackendSet::uniform(Arc::new(backend)), &mut store, CurateOptions::default())?;
        let pairs = store.load_pairs(Split::Train, &world.conditions())?;
        let (_, r) = setup.train_and_evaluate(&format!("level={}", v.label), &pairs)?;
        rows.extend(with_baseline(r, &baseline));
    }
    let mut report = EvalReport::new(title, setup.eval.n_samples, vec![pipeline.seed, setup.dpo.seed, setup.eval.seed], rows);
    report.runtime_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// One variant per critic informativeness level, two-step chain.
pub fn critic_ablation(
    levels: &[crate::backends::Informativeness],
    world: &Arc<VectorWorld>,
    inputs: &[CurationInput],
    pipeline: &PipelineConfig,
    split: SplitConfig,
    setup: &CellSetup<'_>,
    work_dir: &Path,
) -> Result<EvalReport, EvalError> {
    let variants: Vec<Variant> = levels
        .iter()
        .map(|&l| Variant {
            label: l.to_string(),
            mock: MockOptions {
                informativeness: l,
                ..Default::default()
            },
            chain: ChainMode::TwoStep,
        })
        .collect();
    ablation("critic_ablation", &variants, world, inputs, pipeline, split, setup, work_dir)
}

/// Mean reward of the dataset's winners against fresh generations for the
/// same conditions: two rows, one column per reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rewards: Vec<String>,
    pub row_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn targets_vs_generations(
    pairs: &[PreferencePair],
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    rewards: &[Arc<dyn RewardFunction>],
    seed: u64,
) -> Result<ComparisonTable, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Invalid("empty dataset".into()));
    }
    let generations: Vec<LatentSample> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed, p.condition.condition_id, i));
            sample_ancestral(model, schedule, &p.condition, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let mut targets = Vec::new();
    let mut gens = Vec::new();
    for r in rewards {
        let t: Vec<f64> = pairs.iter().map(|p| r.score(&p.condition, &p.winner.values)).collect::<Result<_, _>>()?;
        let g: Vec<f64> = pairs
            .iter()
            .zip(&generations)
            .map(|(p, x)| r.score(&p.condition, &x.values))
            .collect::<Result<_, _>>()?;
        targets.push(round_sig(mean_and_se(&t).0));
        gens.push(round_sig(mean_and_se(&g).0));
    }
    Ok(ComparisonTable {
        rewards: rewards.iter().map(|r| r.name()).collect(),
        row_labels: vec!["targets".into(), "generations".into()],
        values: vec![targets, gens],
    })
}

/// Writes `report` as `<stem>.csv`, `<stem>.json` or `<stem>.dat`.
pub fn write_report(report: &EvalReport, format: ReportFormat, dir: &Path, stem: &str) -> Result<PathBuf, EvalError> {
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let bytes = emit_report(report, format);
    crate::store::write_atomic(&path, bytes.as_bytes())?;
    Ok(path)
}
