use std::cell::RefCell;

use streamsel_core::backend::{BackendOutput, ClipBackend, MockBackend, MockModelConfig, ScenarioSpec};
use streamsel_core::memory::ContextAssembly;
use streamsel_core::numerics::{Matrix, SplitMix64};
use streamsel_core::pipeline::{default_queries, run_global_uniform, run_simulation, PipelineConfig, StreamingPipeline};
use streamsel_core::retrieval::QueryEmbedding;
use streamsel_core::selection::Selector;
use streamsel_core::{Error, Result};

/// Wraps the mock and records the memory origin of every context it sees.
struct Recording {
    inner: MockBackend,
    calls: RefCell<Vec<Vec<(u64, usize)>>>,
}

impl Recording {
    fn new(inner: MockBackend) -> Self {
        Self { inner, calls: RefCell::new(Vec::new()) }
    }
}

impl ClipBackend<f64> for Recording {
    fn process_clip(&self, ctx: &ContextAssembly<'_, f64>, layers: &[usize]) -> Result<BackendOutput<f64>> {
        self.calls.borrow_mut().push(ctx.memory_origin.clone());
        self.inner.process_clip(ctx, layers)
    }
}

fn frame(rng: &mut SplitMix64, tokens: usize, dim: usize) -> Matrix<f64> {
    Matrix::new(tokens, dim, (0..tokens * dim).map(|_| rng.next_gaussian() * 0.1).collect()).unwrap()
}

fn mock() -> MockBackend {
    MockBackend::new(MockModelConfig::default()).unwrap()
}

#[test]
fn boundary_fires_once_per_sixteen_frames() {
    let backend = Recording::new(mock());
    let mut p = StreamingPipeline::new(PipelineConfig::default(), &backend).unwrap();
    let mut rng = SplitMix64::new(1);
    for i in 0..15 {
        assert!(p.process_frame(frame(&mut rng, 196, 16)).unwrap().is_none(), "frame {i}");
    }
    assert_eq!(p.buffered_frames(), 15);
    assert!(backend.calls.borrow().is_empty());
    let out = p.process_frame(frame(&mut rng, 196, 16)).unwrap().expect("clip boundary");
    assert_eq!(out.clip_id, 0);
    assert_eq!(out.n_visual, 3136);
    assert_eq!(out.selection.n_select(), 196);
    assert_eq!(backend.calls.borrow().len(), 1);
    assert_eq!(p.buffered_frames(), 0);
}

#[test]
fn five_hundred_twelve_frames_make_thirty_two_clips() {
    let backend = Recording::new(mock());
    let mut p = StreamingPipeline::new(PipelineConfig::default(), &backend).unwrap();
    let mut rng = SplitMix64::new(2);
    for _ in 0..512 {
        p.process_frame(frame(&mut rng, 196, 16)).unwrap();
    }
    assert_eq!(p.clips_processed(), 32);
    let ids: Vec<u64> = p.memory().entries().map(|s| s.clip_id).collect();
    assert_eq!(ids, (16..32).collect::<Vec<u64>>());

    // context of clip t+1 holds the selections of clips max(0, t-15)..=t, oldest first
    let calls = backend.calls.borrow();
    for (t, origin) in calls.iter().enumerate() {
        let mut clips: Vec<u64> = origin.iter().map(|o| o.0).collect();
        clips.dedup();
        let expected: Vec<u64> = (t.saturating_sub(16) as u64..t as u64).collect();
        assert_eq!(clips, expected, "context of clip {t}");
        assert_eq!(origin.len(), 196 * expected.len());
        assert!(origin.len() + 3136 <= 6272);
    }
    let m = p.metrics();
    assert_eq!(m.clips_processed, 32);
    assert!(m.context_utilization > 0.5 && m.context_utilization <= 1.0);
}

#[test]
fn no_recurrency_processes_clips_independently() {
    let config = PipelineConfig { max_mem: 0, ..Default::default() };
    let backend = Recording::new(mock());
    let mut p = StreamingPipeline::new(config.clone(), &backend).unwrap();
    let mut rng = SplitMix64::new(3);
    let frames: Vec<Matrix<f64>> = (0..48).map(|_| frame(&mut rng, 196, 16)).collect();
    let mut selections = Vec::new();
    for f in &frames {
        if let Some(out) = p.process_frame(f.clone()).unwrap() {
            assert_eq!(out.n_memory, 0);
            selections.push(out.selection.indices().to_vec());
        }
    }
    assert!(backend.calls.borrow().iter().all(Vec::is_empty));
    // the third clip alone in a fresh pipeline selects the same tokens
    let mut fresh = StreamingPipeline::new(config, mock()).unwrap();
    let mut last = None;
    for f in &frames[32..] {
        last = fresh.process_frame(f.clone()).unwrap();
    }
    assert_eq!(last.unwrap().selection.indices(), selections[2].as_slice());
}

#[test]
fn frame_shape_is_checked() {
    let mut p = StreamingPipeline::new(PipelineConfig::default(), mock()).unwrap();
    let mut rng = SplitMix64::new(4);
    assert!(matches!(p.process_frame(frame(&mut rng, 195, 16)), Err(Error::InvalidDimension(_))));
    p.process_frame(frame(&mut rng, 196, 16)).unwrap();
    assert!(matches!(p.process_frame(frame(&mut rng, 196, 8)), Err(Error::InvalidDimension(_))));
    assert_eq!(p.frames_in(), 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let too_much_memory = PipelineConfig { max_mem: 17, ..Default::default() };
    assert!(matches!(StreamingPipeline::new(too_much_memory, mock()), Err(Error::ContextOverflow(_))));
    let bad_layers = PipelineConfig { layer_subset: vec![9, 5], ..Default::default() };
    assert!(bad_layers.validate().is_err());
    let bad_lambda = PipelineConfig { mmr_lambda: 1.5, ..Default::default() };
    assert!(bad_lambda.validate().is_err());
}

#[test]
fn single_clip_store_answers_with_its_caption() {
    let model = mock();
    let mut p = StreamingPipeline::new(PipelineConfig::default(), &model).unwrap();
    let q = QueryEmbedding::new(Matrix::from_rows(&[vec![0.25; 16]]).unwrap(), Some("what?".into())).unwrap();
    assert!(matches!(p.answer_query(&q), Err(Error::EmptyStore)));
    let mut rng = SplitMix64::new(5);
    for _ in 0..16 {
        p.process_frame(frame(&mut rng, 196, 16)).unwrap();
    }
    let answer = p.answer_query(&q).unwrap();
    assert_eq!(answer.retrieval.clip_ids(), vec![0]);
    let caption = p.snapshot()[0].text.clone().unwrap();
    assert_eq!(answer.payload, format!("{caption}\nQ: what?"));
}

#[test]
fn snapshots_can_be_queried_while_ingesting() {
    let model = mock();
    let mut p = StreamingPipeline::new(PipelineConfig::default(), &model).unwrap();
    let mut rng = SplitMix64::new(6);
    for _ in 0..32 {
        p.process_frame(frame(&mut rng, 196, 16)).unwrap();
    }
    let snapshot = p.snapshot();
    let config = p.config().clone();
    let q = QueryEmbedding::new(Matrix::from_rows(&[vec![1.0; 16]]).unwrap(), None).unwrap();
    std::thread::scope(|s| {
        let reader = s.spawn(|| streamsel_core::answer_query(&snapshot, &q, &config).unwrap());
        for _ in 0..16 {
            p.process_frame(frame(&mut rng, 196, 16)).unwrap();
        }
        let answer = reader.join().unwrap();
        assert!(answer.retrieval.clip_ids().iter().all(|&id| id < 2));
    });
    assert_eq!(snapshot.len(), 2);
    assert_eq!(p.snapshot().len(), 3);
}

#[test]
fn zero_event_scenario_reports_not_applicable() {
    let spec = ScenarioSpec::with_random_events(2, 16, 196, 16, 0, 0, 0.1, 7).unwrap();
    let model = mock();
    let config = PipelineConfig::default();
    let report = run_simulation(&spec, &config, &model, &[]).unwrap();
    assert_eq!(report.metrics.clips_processed, 2);
    assert_eq!(report.metrics.selection_recall, None);
    let text = report.to_text(false);
    assert!(text.contains("selection_recall=n/a\n"));
    assert!(text.contains("window=6272\n"));
    assert!(text.contains("memory_half=3136\nclip_half=3136\n"));
    assert!(text.contains("compression_rate=0.0625\n"));
    assert!(!text.contains("[timings]"));
    assert!(report.to_text(true).contains("[timings]"));
}

#[test]
fn reports_repeat_byte_for_byte_and_differ_across_selectors() {
    let spec = ScenarioSpec::with_random_events(3, 16, 196, 16, 2, 64, 0.1, 8).unwrap();
    let model = mock();
    let run = |selector| {
        let config = PipelineConfig { selector, ..Default::default() };
        let queries = default_queries(&spec, &model, &config).unwrap();
        run_simulation(&spec, &config, &model, &queries).unwrap()
    };
    let a = run(Selector::Attention);
    assert_eq!(a.to_text(false), run(Selector::Attention).to_text(false));
    let u = run(Selector::Uniform);
    assert!(a.metrics.selection_recall.unwrap() > u.metrics.selection_recall.unwrap());
    assert_eq!(a.queries.len(), 2);
    assert_eq!(a.metrics.retrieval_recall_at_k, Some(1.0));
}

#[test]
fn global_uniform_picks_thirty_two_frames() {
    let spec = ScenarioSpec::with_random_events(8, 16, 196, 16, 2, 64, 0.1, 9).unwrap();
    let report = run_global_uniform(&spec, &PipelineConfig::default(), mock()).unwrap();
    assert_eq!(report.frames.len(), 32);
    assert_eq!(report.frames[..3], [2, 6, 10]);
    assert_eq!(report.selected_tokens, 6272);
    let recall = report.selection_recall.unwrap();
    assert!((0.0..=1.0).contains(&recall));
}
