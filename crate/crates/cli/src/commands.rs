//! Subcommand bodies.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rpo::backends::{
    BackendSet, Critic, EndpointConfig, Editor, HttpBackend, Instructor, MockBackend, RetryPolicy, RewardFunction,
    RewardKind, Scorer, ScorerReward, SyntheticReward, VectorWorld,
};
use rpo::diffusion::{Checkpoint, DenoiserModel, DiffusionError, NoiseSchedule, ScheduleDescriptor, WeightFn};
use rpo::eval::{
    ablation, compare_paired, critic_ablation, evaluate_rows, paired_row, scaling_sweep, write_report, CellSetup,
    EvalReport, Variant,
};
use rpo::pipeline::{curate as run_curate, world_inputs, ChainMode, CurateOptions, PipelineConfig};
use rpo::store::{DatasetStore, Split};
use rpo::trainer::{train_dpo as run_dpo, train_elbo as run_elbo, TrainReport};

use crate::config::CliConfig;
use crate::{Axis, CliError};

fn world(config: &CliConfig) -> Arc<VectorWorld> {
    Arc::new(config.world.clone())
}

fn http(endpoint: &EndpointConfig, retry: RetryPolicy) -> Result<Arc<HttpBackend>, CliError> {
    Ok(Arc::new(HttpBackend::new(endpoint.clone(), retry)?))
}

/// HTTP clients for the stages with an endpoint, the mock for the rest.
fn backends(config: &CliConfig, world: &Arc<VectorWorld>) -> Result<(BackendSet, PipelineConfig), CliError> {
    let mock = Arc::new(MockBackend::new(world.clone(), config.mock));
    let pipeline = PipelineConfig {
        backend_fingerprint: mock.fingerprint(),
        ..config.pipeline.clone()
    };
    let endpoints = &pipeline.endpoints;
    let retry = pipeline.retry;
    let critic: Arc<dyn Critic> = match &endpoints.critic {
        Some(e) => http(e, retry)?,
        None => mock.clone(),
    };
    let instructor: Arc<dyn Instructor> = match &endpoints.instructor {
        Some(e) => http(e, retry)?,
        None => mock.clone(),
    };
    let editor: Arc<dyn Editor> = match &endpoints.editor {
        Some(e) => http(e, retry)?,
        None => mock.clone(),
    };
    let scorer: Arc<dyn Scorer> = match &endpoints.scorer {
        Some(e) => http(e, retry)?,
        None => mock,
    };
    let set = BackendSet {
        critic,
        instructor,
        editor,
        scorer,
    };
    Ok((set, pipeline))
}

/// Both synthetic rewards, plus the scoring endpoint when one is configured.
fn rewards(config: &CliConfig, world: &Arc<VectorWorld>) -> Result<Vec<Arc<dyn RewardFunction>>, CliError> {
    let mut out: Vec<Arc<dyn RewardFunction>> = vec![
        Arc::new(SyntheticReward::new(RewardKind::NegSqDistanceToNearestMode, world.clone())),
        Arc::new(SyntheticReward::new(RewardKind::MixtureLogDensity, world.clone())),
    ];
    if let Some(e) = &config.pipeline.endpoints.scorer {
        out.push(Arc::new(ScorerReward {
            scorer: http(e, config.pipeline.retry)?,
            label: "scorer".into(),
        }));
    }
    Ok(out)
}

fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, Checkpoint, NoiseSchedule), CliError> {
    let wrap = |source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    let bytes = std::fs::read(path).map_err(|e| wrap(DiffusionError::Checkpoint(e.to_string())))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(wrap)?;
    let model = ckpt.model().map_err(wrap)?;
    let schedule = ckpt.schedule.build().map_err(wrap)?;
    Ok((model, ckpt, schedule))
}

fn open_store(config: &CliConfig, dir: Option<PathBuf>) -> Result<DatasetStore, CliError> {
    let dir = dir.unwrap_or_else(|| config.out.join("store"));
    Ok(DatasetStore::open(dir, config.split)?)
}

fn write_training(
    config: &CliConfig,
    stem: &str,
    model: &DenoiserModel,
    schedule: &ScheduleDescriptor,
    report: &TrainReport,
) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.out)?;
    let path = config.out.join(format!("{stem}.ckpt"));
    Checkpoint::new(model, *schedule).save(&path)?;
    let log = config.out.join(format!("{stem}.train.jsonl"));
    report.write_jsonl(BufWriter::new(File::create(&log)?))?;
    let last = report.steps.last().map_or(f64::NAN, |s| s.loss);
    println!("checkpoint {}", path.display());
    println!("log {} ({} steps, final loss {last:.6})", log.display(), report.steps.len());
    Ok(())
}

fn write_reports(config: &CliConfig, report: &EvalReport, stem: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.out)?;
    for format in config.report.parsed()? {
        let path = write_report(report, format, &config.out, stem)?;
        println!("report {}", path.display());
    }
    Ok(())
}

pub fn curate(config: &CliConfig, store: Option<PathBuf>) -> Result<(), CliError> {
    let world = world(config);
    let (backends, pipeline) = backends(config, &world)?;
    let mut store = open_store(config, store)?;
    let inputs = world_inputs(&world, config.curate.inputs, config.seed);
    let outcome = run_curate(&inputs, &pipeline, &backends, &mut store, CurateOptions::default())?;
    let m = &outcome.manifest;
    println!("manifest {}", store.manifest_path().display());
    println!(
        "processed {} new records; {} total; win rate {}",
        outcome.processed,
        store.len(),
        m.win_rate.map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    Ok(())
}

pub fn train_elbo(config: &CliConfig) -> Result<(), CliError> {
    let world = world(config);
    let schedule = config.schedule.build()?;
    let init = DenoiserModel::init(config.architecture(), config.seed);
    let w = world.clone();
    let (model, report) = run_elbo(&config.elbo, init, &schedule, &WeightFn::Unit, move |rng, n| w.sample_batch(rng, n))?;
    write_training(config, "reference", &model, &config.schedule, &report)
}

pub fn train_dpo(config: &CliConfig, reference: Option<PathBuf>, store: Option<PathBuf>) -> Result<(), CliError> {
    let reference = reference.unwrap_or_else(|| config.out.join("reference.ckpt"));
    let (ref_model, ckpt, schedule) = load_checkpoint(&reference)?;
    let store = open_store(config, store)?;
    let pairs = store.load_pairs(Split::Train, &config.world.conditions())?;
    let (theta, report) = run_dpo(&config.dpo, &pairs, &ref_model, &schedule, &WeightFn::Unit)?;
    write_training(config, "dpo", &theta, &ckpt.schedule, &report)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(config: &CliConfig, checkpoints: Vec<PathBuf>) -> Result<(), CliError> {
    let checkpoints = if checkpoints.is_empty() {
        vec![config.out.join("dpo.ckpt")]
    } else {
        checkpoints
    };
    let world = world(config);
    let conditions = world.conditions();
    let rewards = rewards(config, &world)?;
    let models = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|(m, _, s)| (stem(p), m, s)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    for (name, model, schedule) in &models {
        rows.extend(evaluate_rows(name, model, schedule, &conditions, &rewards, &config.eval)?);
    }
    let (base_name, base, _) = &models[0];
    for (name, model, schedule) in &models[1..] {
        for r in &rewards {
            let s = compare_paired(model, base, schedule, &conditions, r.as_ref(), &config.eval)?;
            rows.push(paired_row(&format!("{name}-vs-{base_name}"), &r.name(), &s));
        }
    }
    let report = EvalReport::new("eval", config.eval.n_samples, vec![config.eval.seed], rows);
    write_reports(config, &report, "eval")
}

pub fn ablate(config: &CliConfig, axis: Axis, reference: Option<PathBuf>) -> Result<(), CliError> {
    let reference = reference.unwrap_or_else(|| config.out.join("reference.ckpt"));
    let (ref_model, _, schedule) = load_checkpoint(&reference)?;
    let world = world(config);
    let conditions = world.conditions();
    let rewards = rewards(config, &world)?;
    let setup = CellSetup {
        reference: &ref_model,
        schedule: &schedule,
        weight_fn: &WeightFn::Unit,
        dpo: &config.dpo,
        eval: &config.eval,
        conditions: &conditions,
        rewards: &rewards,
    };
    let inputs = world_inputs(&world, config.ablate.inputs, config.seed);
    let (_, pipeline) = backends(config, &world)?;
    let (name, report) = match axis {
        Axis::Critic => {
            let work = config.out.join("ablate-critic");
            let r = critic_ablation(&config.ablate.levels, &world, &inputs, &pipeline, config.split, &setup, &work)?;
            ("ablate-critic", r)
        }
        Axis::Chain => {
            let work = config.out.join("ablate-chain");
            let variants = [("two_step", ChainMode::TwoStep), ("one_step", ChainMode::OneStep)].map(|(label, chain)| Variant {
                label: label.into(),
                mock: config.mock,
                chain,
            });
            let r = ablation("chain_ablation", &variants, &world, &inputs, &pipeline, config.split, &setup, &work)?;
            ("ablate-chain", r)
        }
        Axis::Scale => {
            let mock = Arc::new(MockBackend::new(world.clone(), config.mock));
            let mut store = DatasetStore::open(config.out.join("ablate-scale").join("store"), config.split)?;
            run_curate(&inputs, &pipeline, &BackendSet::uniform(mock), &mut store, CurateOptions::default())?;
            let pairs = store.load_pairs(Split::Train, &conditions)?;
            ("ablate-scale", scaling_sweep(&config.ablate.sizes, &pairs, &setup)?)
        }
    };
    write_reports(config, &report, name)
}
