use std::sync::Arc;

use rpo::backends::{RewardFunction, RewardKind, SyntheticReward, VectorWorld, WorldError};
use rpo::diffusion::{Architecture, DenoiserModel, LatentSample, NoiseSchedule, PromptCondition, ScheduleDescriptor, WeightFn};
use rpo::eval::{
    compare_paired, emit_report, evaluate, parse_csv, scaling_sweep, targets_vs_generations, write_report, CellSetup,
    EvalConfig, EvalError, ReportFormat,
};
use rpo::trainer::{DpoConfig, PreferencePair, Provenance};

struct Constant(f64);

impl RewardFunction for Constant {
    fn name(&self) -> String {
        "constant".into()
    }

    fn score(&self, _: &PromptCondition, _: &[f64]) -> Result<f64, WorldError> {
        Ok(self.0)
    }
}

struct Fixture {
    world: Arc<VectorWorld>,
    schedule: NoiseSchedule,
    a: DenoiserModel,
    b: DenoiserModel,
    config: EvalConfig,
}

fn fixture() -> Fixture {
    let world = Arc::new(VectorWorld::default());
    let schedule = ScheduleDescriptor {
        steps: 10,
        ..Default::default()
    }
    .build()
    .unwrap();
    let arch = Architecture::desk_default(2, world.conditions().len(), 10);
    Fixture {
        world,
        schedule,
        a: DenoiserModel::init(arch.clone(), 1),
        b: DenoiserModel::init(arch, 2),
        config: EvalConfig {
            n_samples: 50,
            seed: 3,
            bootstrap_resamples: 1000,
        },
    }
}

fn reward(world: &Arc<VectorWorld>) -> SyntheticReward {
    SyntheticReward::new(RewardKind::NegSqDistanceToNearestMode, world.clone())
}

#[test]
fn model_against_itself_is_a_dead_heat() {
    let f = fixture();
    let s = compare_paired(&f.a, &f.a, &f.schedule, &f.world.conditions(), &reward(&f.world), &f.config).unwrap();
    assert_eq!(s.mean_difference, 0.0);
    assert_eq!(s.win_fraction, 0.5);
    assert_eq!((s.ci_low, s.ci_high), (0.0, 0.0));
    assert_eq!(s.n, 50 * 4);
}

#[test]
fn swapping_models_negates_the_comparison() {
    let f = fixture();
    let r = reward(&f.world);
    let conditions = f.world.conditions();
    let ab = compare_paired(&f.a, &f.b, &f.schedule, &conditions, &r, &f.config).unwrap();
    let ba = compare_paired(&f.b, &f.a, &f.schedule, &conditions, &r, &f.config).unwrap();
    assert!((ab.mean_difference + ba.mean_difference).abs() < 1e-12);
    assert!((ab.win_fraction + ba.win_fraction - 1.0).abs() < 1e-12);
    assert_eq!(ab.std_error, ba.std_error);
}

#[test]
fn constant_reward_has_zero_standard_error() {
    let f = fixture();
    let rewards: Vec<Arc<dyn RewardFunction>> = vec![Arc::new(Constant(-2.5)), Arc::new(reward(&f.world))];
    let report = evaluate(&f.a, &f.schedule, &f.world.conditions(), &rewards, &f.config).unwrap();
    let row = report.row("model", "constant").unwrap();
    assert_eq!((row.mean, row.std_error, row.n), (-2.5, 0.0, 200));
    assert!(report.rows[1].std_error > 0.0);
}

#[test]
fn evaluation_is_seed_deterministic_and_runtime_free() {
    let f = fixture();
    let rewards: Vec<Arc<dyn RewardFunction>> = vec![Arc::new(reward(&f.world))];
    let x = evaluate(&f.a, &f.schedule, &f.world.conditions(), &rewards, &f.config).unwrap();
    let y = evaluate(&f.a, &f.schedule, &f.world.conditions(), &rewards, &f.config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for format in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotData] {
        let px = write_report(&x, format, dir.path(), "x").unwrap();
        let py = write_report(&y, format, dir.path(), "y").unwrap();
        assert_eq!(std::fs::read(px).unwrap(), std::fs::read(py).unwrap());
    }
    assert_eq!(parse_csv(&emit_report(&x, ReportFormat::Csv)).unwrap().len(), 1);
}

#[test]
fn too_few_resamples_are_rejected() {
    let f = fixture();
    let config = EvalConfig {
        bootstrap_resamples: 999,
        ..f.config
    };
    let err = compare_paired(&f.a, &f.b, &f.schedule, &f.world.conditions(), &reward(&f.world), &config).unwrap_err();
    assert!(matches!(err, EvalError::Invalid(_)));
}

fn toy_pairs(world: &VectorWorld, n: usize) -> Vec<PreferencePair> {
    let conditions = world.conditions();
    (0..n)
        .map(|i| {
            let c = conditions[i % conditions.len()].clone();
            let mu = world.modes(c.condition_id).unwrap()[0].mean.clone();
            PreferencePair {
                winner: LatentSample::clean(mu.clone()),
                loser: LatentSample::clean(mu.iter().map(|m| m + 0.5).collect()),
                condition: c,
                provenance: Provenance::Synthetic,
                flipped: false,
            }
        })
        .collect()
}

#[test]
fn sweep_baseline_and_duplicate_sizes() {
    let f = fixture();
    let conditions = f.world.conditions();
    let rewards: Vec<Arc<dyn RewardFunction>> = vec![Arc::new(reward(&f.world))];
    let dpo = DpoConfig {
        total_steps: 20,
        batch_size: 8,
        ..Default::default()
    };
    let setup = CellSetup {
        reference: &f.a,
        schedule: &f.schedule,
        weight_fn: &WeightFn::Unit,
        dpo: &dpo,
        eval: &f.config,
        conditions: &conditions,
        rewards: &rewards,
    };
    let pairs = toy_pairs(&f.world, 12);
    let report = scaling_sweep(&[0, 8, 8], &pairs, &setup).unwrap();
    assert_eq!(report.rows.len(), 3);
    let base = &report.rows[0];
    assert_eq!(base.group, "size=0");
    assert_eq!(base.baseline_mean, Some(base.mean));
    assert_eq!(report.rows[1], report.rows[2]);
    assert_ne!(report.rows[1].mean, base.mean);

    let err = scaling_sweep(&[13], &pairs, &setup).unwrap_err();
    assert!(matches!(err, EvalError::Invalid(_)));
}

#[test]
fn targets_against_generations_table() {
    let f = fixture();
    let rewards: Vec<Arc<dyn RewardFunction>> = vec![
        Arc::new(reward(&f.world)),
        Arc::new(SyntheticReward::new(RewardKind::MixtureLogDensity, f.world.clone())),
    ];
    let pairs = toy_pairs(&f.world, 8);
    let table = targets_vs_generations(&pairs, &f.a, &f.schedule, &rewards, 5).unwrap();
    assert_eq!(table.row_labels, ["targets", "generations"]);
    assert_eq!(table.rewards.len(), 2);
    assert!(table.values.iter().all(|row| row.len() == 2));
    // winners sit on the modes
    assert_eq!(table.values[0][0], 0.0);
    let again = targets_vs_generations(&pairs, &f.a, &f.schedule, &rewards, 5).unwrap();
    assert_eq!(table, again);

    let err = targets_vs_generations(&[], &f.a, &f.schedule, &rewards, 5).unwrap_err();
    assert!(matches!(err, EvalError::Invalid(_)));
}
