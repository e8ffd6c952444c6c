use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpo::backends::*;
use rpo::diffusion::{LatentSample, PromptCondition};
use rpo::pipeline::*;
use rpo::store::{DatasetStore, Split, SplitConfig};
use rpo::trainer::{PreferencePair, Provenance};

/// Counts calls and optionally fails or rewrites responses.
struct Probe {
    inner: MockBackend,
    calls: AtomicUsize,
    fail_prompt: Option<String>,
    instruction_override: Option<String>,
    seen_critique_prompts: Mutex<Vec<String>>,
}

impl Probe {
    fn new(inner: MockBackend) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            fail_prompt: None,
            instruction_override: None,
            seen_critique_prompts: Mutex::new(Vec::new()),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Critic for Probe {
    fn critique(&self, req: &CritiqueRequest) -> Result<CritiqueResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(r) = &req.rendered_prompt {
            self.seen_critique_prompts.lock().unwrap().push(r.clone());
        }
        if self.fail_prompt.as_deref() == Some(req.prompt.as_str()) {
            return Err(BackendError::Unavailable("down".into()));
        }
        self.inner.critique(req)
    }
}

impl Instructor for Probe {
    fn instruct(&self, req: &InstructRequest) -> Result<InstructResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(text) = &self.instruction_override {
            return Ok(InstructResponse {
                instruction: text.clone(),
            });
        }
        self.inner.instruct(req)
    }
}

impl Editor for Probe {
    fn edit(&self, req: &EditRequest) -> Result<EditResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.edit(req)
    }
}

impl Scorer for Probe {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(req)
    }
}

fn world() -> Arc<VectorWorld> {
    Arc::new(VectorWorld::default())
}

fn mock() -> MockBackend {
    MockBackend::new(world(), MockOptions::default())
}

fn config(backend: &MockBackend) -> PipelineConfig {
    PipelineConfig {
        max_in_flight: 4,
        backend_fingerprint: backend.fingerprint(),
        ..Default::default()
    }
}

fn store(dir: &std::path::Path) -> DatasetStore {
    DatasetStore::open(dir, SplitConfig::default()).unwrap()
}

#[test]
fn rerun_after_completion_issues_no_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let probe = Arc::new(Probe::new(mock()));
    let backends = BackendSet::uniform(probe.clone());
    let cfg = config(&probe.inner);
    let inputs = world_inputs(&world(), 120, 3);
    let mut st = store(dir.path());
    let first = curate(&inputs, &cfg, &backends, &mut st, CurateOptions::default()).unwrap();
    assert_eq!(first.processed, 120);
    let manifest_bytes = std::fs::read(st.manifest_path()).unwrap();
    let before = probe.calls();
    assert!(before > 0);

    let mut st = store(dir.path());
    let second = curate(&inputs, &cfg, &backends, &mut st, CurateOptions::default()).unwrap();
    assert_eq!(second.processed, 0);
    assert_eq!(probe.calls(), before);
    assert_eq!(std::fs::read(st.manifest_path()).unwrap(), manifest_bytes);
}

#[test]
fn interrupted_run_resumes_to_identical_dataset() {
    let inputs = world_inputs(&world(), 200, 11);
    let backend = mock();
    let cfg = config(&backend);
    let backends = BackendSet::uniform(Arc::new(backend));

    let straight = tempfile::tempdir().unwrap();
    let mut st = store(straight.path());
    curate(&inputs, &cfg, &backends, &mut st, CurateOptions::default()).unwrap();
    st.export_jsonl(&straight.path().join("export.jsonl")).unwrap();

    let resumed = tempfile::tempdir().unwrap();
    let mut st = store(resumed.path());
    let half = curate(&inputs, &cfg, &backends, &mut st, CurateOptions { stop_after: Some(100) }).unwrap();
    assert_eq!(half.manifest.counts["pending"], 100);
    drop(st);
    // a crash mid-append leaves a torn line behind
    let records = resumed.path().join("records.jsonl");
    let mut bytes = std::fs::read(&records).unwrap();
    bytes.extend_from_slice(b"{\"record_id\":\"tor");
    std::fs::write(&records, bytes).unwrap();

    let mut st = store(resumed.path());
    assert_eq!(st.len(), 100);
    let rest = curate(&inputs, &cfg, &backends, &mut st, CurateOptions::default()).unwrap();
    assert_eq!(rest.processed, 100);
    st.export_jsonl(&resumed.path().join("export.jsonl")).unwrap();

    assert_eq!(
        std::fs::read(straight.path().join("export.jsonl")).unwrap(),
        std::fs::read(resumed.path().join("export.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(straight.path().join("manifest.json")).unwrap(),
        std::fs::read(resumed.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn concurrency_does_not_change_outputs() {
    let inputs = world_inputs(&world(), 150, 5);
    let backend = mock();
    let backends = BackendSet::uniform(Arc::new(backend.clone()));
    let mut exports = Vec::new();
    for max_in_flight in [1, 7] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            max_in_flight,
            ..config(&backend)
        };
        let mut st = store(dir.path());
        curate(&inputs, &cfg, &backends, &mut st, CurateOptions::default()).unwrap();
        st.export_jsonl(&dir.path().join("e.jsonl")).unwrap();
        exports.push((
            std::fs::read(dir.path().join("e.jsonl")).unwrap(),
            std::fs::read(dir.path().join("manifest.json")).unwrap(),
        ));
    }
    assert_eq!(exports[0], exports[1]);
}

#[test]
fn failing_record_is_isolated() {
    let inputs = world_inputs(&world(), 80, 9);
    let backend = mock();
    let cfg = config(&backend);

    let clean_dir = tempfile::tempdir().unwrap();
    let mut clean = store(clean_dir.path());
    curate(&inputs, &cfg, &BackendSet::uniform(Arc::new(backend.clone())), &mut clean, CurateOptions::default()).unwrap();

    let mut probe = Probe::new(backend);
    probe.fail_prompt = Some(world().prompt_text(3));
    let dir = tempfile::tempdir().unwrap();
    let mut st = store(dir.path());
    let out = curate(&inputs, &cfg, &BackendSet::uniform(Arc::new(probe)), &mut st, CurateOptions::default()).unwrap();
    assert_eq!(out.manifest.counts["failed"], 20);
    assert!(out.manifest.failures.iter().all(|f| f.stage == "critiqued"));
    for r in st.records() {
        if r.prompt_id == 3 {
            assert!(matches!(r.status, RecordStatus::Failed { stage: Stage::Critiqued, .. }));
        } else {
            assert_eq!(Some(r), clean.get_record(&r.record_id));
        }
    }
}

#[test]
fn invalid_instructions_retry_once_then_fail() {
    let mut probe = Probe::new(mock());
    probe.instruction_override = Some("a; b; c; d".into());
    let probe = Arc::new(probe);
    let err = run_instruct(probe.as_ref(), "p", Some("c"), &[0; 8], InvalidInstructionPolicy::Retry).unwrap_err();
    assert!(matches!(err, PipelineError::Format(ref e) if e.has_too_many()));
    assert_eq!(probe.calls(), 2);

    let dir = tempfile::tempdir().unwrap();
    let mut st = store(dir.path());
    let cfg = PipelineConfig {
        on_invalid_instruction: InvalidInstructionPolicy::FailRecord,
        ..config(&probe.inner)
    };
    let out = curate(&world_inputs(&world(), 4, 0), &cfg, &BackendSet::uniform(probe.clone()), &mut st, CurateOptions::default()).unwrap();
    assert_eq!(out.manifest.counts["failed"], 4);
    assert!(out.manifest.failures.iter().all(|f| f.stage == "instructed"));
}

#[test]
fn critique_request_embeds_template_with_prompt_once() {
    let probe = Arc::new(Probe::new(mock()));
    let backends = BackendSet::uniform(probe.clone());
    let w = world();
    let prompt = w.prompt_text(2);
    let c = run_critique(&backends, &prompt, &encode_vector(&[-3.0, 0.4])).unwrap();
    assert!(c.contains("Nearest target mode: 0"));
    let seen = probe.seen_critique_prompts.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].matches(&prompt).count(), 1);
    assert!(seen[0].contains(&format!("[{prompt}]")));
    assert!(matches!(run_critique(&backends, " ", &[0; 8]), Err(PipelineError::Precondition(_))));
}

#[test]
fn edits_stay_within_the_adherence_bound() {
    let w = world();
    let backends = BackendSet::uniform(Arc::new(mock()));
    let bound = w.edit_step + 4.0 * w.edit_noise * (w.dim as f64).sqrt();
    for input in world_inputs(&w, 1000, 21) {
        let x = decode_vector(&input.original).unwrap();
        let critique = run_critique(&backends, &input.condition.prompt_text, &input.original).unwrap();
        let (_, items) = run_instruct(
            backends.instructor.as_ref(),
            &input.condition.prompt_text,
            Some(&critique),
            &input.original,
            InvalidInstructionPolicy::Retry,
        )
        .unwrap();
        let edited = decode_vector(&run_edit(&backends, &input.condition.prompt_text, &items, &input.original).unwrap()).unwrap();
        let dist = x.iter().zip(&edited).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(dist <= bound + 1e-5, "{dist} > {bound}");
    }
}

#[test]
fn noise_free_edits_improve_reward() {
    let w = VectorWorld {
        edit_noise: 0.0,
        ok_tolerance: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let k = rng.random_range(0..4);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-6.0..6.0)).collect();
        let (_, d2) = w.nearest_mode(k, &x).unwrap();
        if d2.sqrt() <= w.edit_step {
            continue;
        }
        let critique = mock::mock_critic(&w, k, "p", &x, Informativeness::Full).unwrap();
        let instruction = mock::mock_instructor(&w, k, Some(&critique), &x).unwrap();
        let edited = mock::mock_editor(&w, k, &instruction, &x, &mut rng).unwrap();
        let c = w.condition(k).unwrap();
        let before = synth_reward(&w, RewardKind::NegSqDistanceToNearestMode, &c, &LatentSample::clean(x.clone())).unwrap();
        let after = synth_reward(&w, RewardKind::NegSqDistanceToNearestMode, &c, &LatentSample::clean(edited)).unwrap();
        assert!(after > before, "{x:?}: {after} <= {before}");
    }
}

#[test]
fn fuller_critiques_give_better_edits() {
    let w = world();
    let inputs = world_inputs(&w, 600, 8);
    let mean_edited = |level: Informativeness| {
        let backend = MockBackend::new(
            w.clone(),
            MockOptions {
                informativeness: level,
                ..Default::default()
            },
        );
        let backends = BackendSet::uniform(Arc::new(backend));
        let mut total = 0.0;
        for input in &inputs {
            let p = &input.condition.prompt_text;
            let c = run_critique(&backends, p, &input.original).unwrap();
            let (_, items) = run_instruct(backends.instructor.as_ref(), p, Some(&c), &input.original, InvalidInstructionPolicy::Retry).unwrap();
            let e = run_edit(&backends, p, &items, &input.original).unwrap();
            total += backends
                .scorer
                .score(&ScoreRequest {
                    prompt: p.clone(),
                    image_b64: b64_encode(&e),
                })
                .unwrap()
                .score;
        }
        total / inputs.len() as f64
    };
    let full = mean_edited(Informativeness::Full);
    let partial = mean_edited(Informativeness::Partial);
    let none = mean_edited(Informativeness::None);
    assert!(full >= partial && partial >= none, "{full} {partial} {none}");
}

#[test]
fn offline_relabel_orders_by_reward() {
    let w = world();
    let reward = SyntheticReward::new(RewardKind::NegSqDistanceToNearestMode, w.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs: Vec<PreferencePair> = (0..500)
        .map(|i| {
            let k = i % 4;
            let mut v = || LatentSample::clean((0..2).map(|_| rng.random_range(-4.0..4.0)).collect());
            PreferencePair {
                condition: w.condition(k).unwrap(),
                winner: v(),
                loser: v(),
                provenance: Provenance::Synthetic,
                flipped: false,
            }
        })
        .collect();
    let out = relabel_offline_dataset(&reward, &pairs);
    assert_eq!(out.len(), 500);
    let mut swapped = 0;
    for (p, q) in pairs.iter().zip(&out) {
        let sw = reward.score(&q.condition, &q.winner.values).unwrap();
        let sl = reward.score(&q.condition, &q.loser.values).unwrap();
        assert!(sw > sl);
        assert_eq!(q.provenance, Provenance::RelabeledOffline);
        if q.winner != p.winner {
            swapped += 1;
            assert!(q.flipped);
        }
    }
    assert!(swapped > 100);
    // already consistent input comes back unchanged apart from provenance
    let again = relabel_offline_dataset(&reward, &out);
    assert_eq!(again, out);

    let tie = PreferencePair {
        condition: w.condition(0).unwrap(),
        winner: LatentSample::clean(vec![1.0, 1.0]),
        loser: LatentSample::clean(vec![1.0, 1.0]),
        provenance: Provenance::Synthetic,
        flipped: false,
    };
    assert!(relabel_offline_dataset(&reward, &[tie]).is_empty());
}

#[test]
fn relabel_builds_pairs() {
    let w = world();
    let reward = SyntheticReward::new(RewardKind::NegSqDistanceToNearestMode, w.clone());
    let c: PromptCondition = w.condition(0).unwrap();
    let far = LatentSample::clean(vec![0.0, 0.0]);
    let near = LatentSample::clean(vec![2.5, 0.0]);
    let r = relabel(&reward, &c, &far, &near, TiePolicy::Drop).unwrap();
    let p = r.pair.unwrap();
    assert_eq!((p.winner.clone(), p.flipped), (near.clone(), false));
    let r = relabel(&reward, &c, &near, &far, TiePolicy::Drop).unwrap();
    assert_eq!((r.pair.unwrap().winner, r.verdict), (near.clone(), Verdict::Keep { winner: Winner::Original, flipped: true }));
    assert!(relabel(&reward, &c, &near, &near, TiePolicy::Drop).unwrap().pair.is_none());
}

#[test]
fn http_backends_curate_like_in_process_mock() {
    let inputs = world_inputs(&world(), 40, 13);
    let backend = mock();
    let cfg = config(&backend);

    let a = tempfile::tempdir().unwrap();
    let mut st = store(a.path());
    curate(&inputs, &cfg, &BackendSet::uniform(Arc::new(backend.clone())), &mut st, CurateOptions::default()).unwrap();
    st.export_jsonl(&a.path().join("e.jsonl")).unwrap();

    let server = MockServer::start(backend, FaultPlan::default()).unwrap();
    let http = HttpBackend::new(EndpointConfig::new(server.url()), RetryPolicy::default()).unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut st = store(b.path());
    curate(&inputs, &cfg, &BackendSet::uniform(Arc::new(http)), &mut st, CurateOptions::default()).unwrap();
    st.export_jsonl(&b.path().join("e.jsonl")).unwrap();
    assert_eq!(
        std::fs::read(a.path().join("e.jsonl")).unwrap(),
        std::fs::read(b.path().join("e.jsonl")).unwrap()
    );
    assert_eq!(st.load_pairs(Split::All, &world().conditions()).unwrap().len(), st.complete_records(Split::All).count());
}
