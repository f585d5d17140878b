//! Runs a planted-event scenario through the streaming pipeline and scores it.
//!
//! The report is plain text with `[section]` headers:
//!
//! ```text
//! [config]    every PipelineConfig field as key=value
//! [budget]    window, memory_half, clip_half, clip_tokens, n_select,
//!             compression_rate, memory_capacity
//! [scenario]  n_clips, t_frames, tokens_per_frame, dim, n_events, noise_scale, seed
//! [metrics]   clips_processed, frames_in, frames_buffered, selection_recall,
//!             memory_concept_recall, retrieval_recall_at_k, retrieval_top1,
//!             context_utilization  ("n/a" when there is no ground truth)
//! [clips]     one row per clip: clip_id n_memory n_visual event_tokens event_selected
//! [queries]   one row per query: index target retrieved tokens_used hit top1
//!             caption_spread visual_spread
//! [timings]   only when requested: wall_clock_per_clip_us and per-clip microseconds
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use super::{BudgetSummary, PipelineConfig, RunMetrics, StreamingPipeline};
use crate::backend::{ClipBackend, MockBackend, ScenarioSpec};
use crate::error::{invalid_arg, Result};
use crate::memory::{assemble_context, ContextBudget, ShortTermMemory};
use crate::numerics::{cosine, Matrix};
use crate::retrieval::{similarity, CaptionRecord, QueryEmbedding};
use crate::selection::ClipTokens;

/// A kept token "carries" an event when its cosine to the event concept reaches this.
pub const CONCEPT_MATCH_COSINE: f64 = 0.9;

const QUERY_TOKENS: usize = 4;

/// A question posed after the stream, with the clip that should answer it.
#[derive(Debug, Clone)]
pub struct SimQuery {
    pub query: QueryEmbedding<f64>,
    pub target_clip: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: u64,
    pub n_memory: usize,
    pub n_visual: usize,
    pub event_tokens: usize,
    pub event_selected: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub index: usize,
    pub target: Option<u64>,
    pub retrieved: Vec<u64>,
    pub tokens_used: usize,
    pub hit: Option<bool>,
    pub top1: Option<bool>,
    /// max - min of query similarity over all stored captions.
    pub caption_spread: f64,
    /// max - min of query cosine over all mean-pooled clips.
    pub visual_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub config: PipelineConfig,
    pub budget: BudgetSummary,
    pub scenario: ScenarioSpec,
    pub metrics: RunMetrics,
    pub frames_in: usize,
    pub frames_buffered: usize,
    pub clips: Vec<ClipRecord>,
    pub queries: Vec<QueryRecord>,
}

fn opt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

fn opt_flag(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "1",
        Some(false) => "0",
        None => "-",
    }
}

impl SimulationReport {
    /// Renders the report. Without timings the output depends only on the inputs.
    pub fn to_text(&self, include_timings: bool) -> String {
        let mut out = String::from("# streamsel simulation report\n");
        let c = &self.config;
        let layers: Vec<String> = c.layer_subset.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "[config]");
        let _ = writeln!(out, "clip_size={}", c.clip_size);
        let _ = writeln!(out, "max_mem={}", c.max_mem);
        let _ = writeln!(out, "tokens_per_frame={}", c.tokens_per_frame);
        let _ = writeln!(out, "n_select={}", c.n_select);
        let _ = writeln!(out, "window={}", c.window);
        let _ = writeln!(out, "layers={}", layers.join(","));
        let _ = writeln!(out, "aggregation={}", c.aggregation);
        let _ = writeln!(out, "selector={}", c.selector);
        let _ = writeln!(out, "mmr_lambda={}", c.mmr_lambda);
        let _ = writeln!(out, "retrieval_budget={}", c.retrieval_budget);
        let _ = writeln!(out, "retrieval_k={}", c.retrieval_k.map_or_else(|| "fill".to_string(), |k| k.to_string()));
        let _ = writeln!(out, "similarity={}", c.similarity);
        let _ = writeln!(out, "seed={}", c.seed);

        let b = &self.budget;
        let _ = writeln!(out, "[budget]");
        let _ = writeln!(out, "window={}", b.window);
        let _ = writeln!(out, "memory_half={}", b.memory_half);
        let _ = writeln!(out, "clip_half={}", b.clip_half);
        let _ = writeln!(out, "clip_tokens={}", b.clip_tokens);
        let _ = writeln!(out, "n_select={}", b.n_select);
        let _ = writeln!(out, "compression_rate={}", b.compression_rate());
        let _ = writeln!(out, "memory_capacity={}", b.memory_capacity);

        let s = &self.scenario;
        let _ = writeln!(out, "[scenario]");
        let _ = writeln!(out, "n_clips={}", s.n_clips);
        let _ = writeln!(out, "t_frames={}", s.t_frames);
        let _ = writeln!(out, "tokens_per_frame={}", s.tokens_per_frame);
        let _ = writeln!(out, "dim={}", s.dim);
        let _ = writeln!(out, "n_events={}", s.events.len());
        let _ = writeln!(out, "noise_scale={}", s.noise_scale);
        let _ = writeln!(out, "seed={}", s.seed);

        let m = &self.metrics;
        let _ = writeln!(out, "[metrics]");
        let _ = writeln!(out, "clips_processed={}", m.clips_processed);
        let _ = writeln!(out, "frames_in={}", self.frames_in);
        let _ = writeln!(out, "frames_buffered={}", self.frames_buffered);
        let _ = writeln!(out, "selection_recall={}", opt_rate(m.selection_recall));
        let _ = writeln!(out, "memory_concept_recall={}", opt_rate(m.memory_concept_recall));
        let _ = writeln!(out, "retrieval_recall_at_k={}", opt_rate(m.retrieval_recall_at_k));
        let _ = writeln!(out, "retrieval_top1={}", opt_rate(m.retrieval_top1));
        let _ = writeln!(out, "context_utilization={}", m.context_utilization);

        let _ = writeln!(out, "[clips]");
        let _ = writeln!(out, "# clip_id n_memory n_visual event_tokens event_selected");
        for r in &self.clips {
            let _ = writeln!(out, "{} {} {} {} {}", r.clip_id, r.n_memory, r.n_visual, r.event_tokens, r.event_selected);
        }

        let _ = writeln!(out, "[queries]");
        let _ = writeln!(out, "# index target retrieved tokens_used hit top1 caption_spread visual_spread");
        for q in &self.queries {
            let ids: Vec<String> = q.retrieved.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                q.index,
                q.target.map_or_else(|| "-".to_string(), |t| t.to_string()),
                ids.join(","),
                q.tokens_used,
                opt_flag(q.hit),
                opt_flag(q.top1),
                q.caption_spread,
                q.visual_spread
            );
        }

        if include_timings {
            let _ = writeln!(out, "[timings]");
            let _ = writeln!(out, "wall_clock_per_clip_us={}", m.wall_clock_per_clip.as_micros());
            let per: Vec<String> = self.clips.iter().map(|r| r.elapsed.as_micros().to_string()).collect();
            let _ = writeln!(out, "clip_us={}", per.join(","));
        }
        out
    }
}

/// One query per planted event: the event concept seen through the mock text space.
/// The target is the pipeline clip holding the event's first token.
pub fn default_queries(spec: &ScenarioSpec, backend: &MockBackend, config: &PipelineConfig) -> Result<Vec<SimQuery>> {
    spec.events
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut query = backend.query_for_concept(&e.concept, QUERY_TOKENS, k as u64)?;
            query.text = Some(format!("What happens in event {k}?"));
            let global = e.clip_id as usize * spec.clip_tokens() + e.token_indices[0];
            Ok(SimQuery { query, target_clip: Some((global / config.clip_tokens()) as u64) })
        })
        .collect()
}

fn frames_of(clip: &ClipTokens<f64>) -> Vec<Matrix<f64>> {
    let d = clip.dim();
    let per = clip.tokens_per_frame * d;
    clip.embeddings()
        .as_slice()
        .chunks(per)
        .map(|c| Matrix::from_raw(clip.tokens_per_frame, d, c.to_vec()))
        .collect()
}

fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Streams every scenario frame through the pipeline, then answers `queries` against
/// the final caption store.
pub fn run_simulation<B: ClipBackend<f64>>(
    spec: &ScenarioSpec,
    config: &PipelineConfig,
    backend: B,
    queries: &[SimQuery],
) -> Result<SimulationReport> {
    spec.validate()?;
    config.validate()?;
    if spec.tokens_per_frame != config.tokens_per_frame {
        return Err(invalid_arg(format!(
            "scenario has {} tokens per frame, pipeline expects {}",
            spec.tokens_per_frame, config.tokens_per_frame
        )));
    }
    let clip_tokens = config.clip_tokens();
    let mut event_at: HashMap<usize, usize> = HashMap::new();
    let mut events_by_clip: HashMap<u64, Vec<usize>> = HashMap::new();
    for (k, e) in spec.events.iter().enumerate() {
        let base = e.clip_id as usize * spec.clip_tokens();
        for &i in &e.token_indices {
            event_at.insert(base + i, k);
            let clips = events_by_clip.entry(((base + i) / clip_tokens) as u64).or_default();
            if clips.last() != Some(&k) {
                clips.push(k);
            }
        }
    }

    let mut pipeline = StreamingPipeline::new(config.clone(), backend)?;
    let mut clips = Vec::new();
    let mut retained = vec![false; spec.events.len()];
    let mut seen = vec![false; spec.events.len()];
    for clip in spec.clips() {
        for frame in frames_of(&clip?) {
            let Some(out) = pipeline.process_frame(frame)? else { continue };
            let start = out.global_offset;
            let event_tokens = (start..start + clip_tokens).filter(|p| event_at.contains_key(p)).count();
            let event_selected =
                out.selection.indices().iter().filter(|&&i| event_at.contains_key(&(start + i))).count();
            for &k in events_by_clip.get(&out.clip_id).map(Vec::as_slice).unwrap_or_default() {
                seen[k] = true;
                let concept = &spec.events[k].concept;
                if !retained[k] {
                    for row in out.selection.embeddings().row_iter() {
                        if cosine(row, concept).unwrap_or(0.0) >= CONCEPT_MATCH_COSINE {
                            retained[k] = true;
                            break;
                        }
                    }
                }
            }
            clips.push(ClipRecord {
                clip_id: out.clip_id,
                n_memory: out.n_memory,
                n_visual: out.n_visual,
                event_tokens,
                event_selected,
                elapsed: out.elapsed,
            });
        }
    }

    let mut metrics = pipeline.metrics();
    let total_event: usize = clips.iter().map(|c| c.event_tokens).sum();
    if total_event > 0 {
        let selected: usize = clips.iter().map(|c| c.event_selected).sum();
        metrics.selection_recall = Some(selected as f64 / total_event as f64);
    }
    let n_seen = seen.iter().filter(|&&s| s).count();
    if n_seen > 0 {
        metrics.memory_concept_recall = Some(retained.iter().filter(|&&r| r).count() as f64 / n_seen as f64);
    }

    let store = pipeline.snapshot();
    let mut records = Vec::with_capacity(queries.len());
    for (index, q) in queries.iter().enumerate() {
        let answer = super::answer_query(&store, &q.query, config)?;
        let retrieved = answer.retrieval.clip_ids();
        let target = q.target_clip.filter(|t| store.iter().any(|c| c.clip_id == *t));
        let caption_sims = store
            .iter()
            .map(|c| similarity(config.similarity, &q.query, c))
            .collect::<Result<Vec<f64>>>()?;
        let visual_sims = pipeline
            .visual_index()
            .values()
            .map(|v| cosine(q.query.pooled(), v))
            .collect::<Result<Vec<f64>>>()?;
        records.push(QueryRecord {
            index,
            target,
            hit: target.map(|t| retrieved.contains(&t)),
            top1: target.map(|t| retrieved.first() == Some(&t)),
            retrieved,
            tokens_used: answer.retrieval.tokens_used,
            caption_spread: spread(&caption_sims),
            visual_spread: spread(&visual_sims),
        });
    }
    let targeted: Vec<&QueryRecord> = records.iter().filter(|r| r.target.is_some()).collect();
    if !targeted.is_empty() {
        let n = targeted.len() as f64;
        metrics.retrieval_recall_at_k = Some(targeted.iter().filter(|r| r.hit == Some(true)).count() as f64 / n);
        metrics.retrieval_top1 = Some(targeted.iter().filter(|r| r.top1 == Some(true)).count() as f64 / n);
    }

    Ok(SimulationReport {
        config: config.clone(),
        budget: config.budget_summary(),
        scenario: spec.clone(),
        metrics,
        frames_in: pipeline.frames_in(),
        frames_buffered: pipeline.buffered_frames(),
        clips,
        queries: records,
    })
}

/// Offline baseline: `window / tokens_per_frame` frames picked uniformly over the whole
/// stream, captioned in one pass with no memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalUniformReport {
    /// Global frame indices, ascending.
    pub frames: Vec<usize>,
    pub selected_tokens: usize,
    /// Fraction of event tokens inside the picked frames.
    pub selection_recall: Option<f64>,
    pub caption: CaptionRecord<f64>,
}

pub fn run_global_uniform<B: ClipBackend<f64>>(
    spec: &ScenarioSpec,
    config: &PipelineConfig,
    backend: B,
) -> Result<GlobalUniformReport> {
    spec.validate()?;
    config.validate()?;
    if spec.tokens_per_frame != config.tokens_per_frame {
        return Err(invalid_arg("scenario and pipeline disagree on tokens per frame"));
    }
    let tpf = spec.tokens_per_frame;
    let total_frames = spec.n_clips * spec.t_frames;
    let n_pick = (config.window / tpf).min(total_frames);
    if n_pick == 0 {
        return Err(invalid_arg("window holds no full frame"));
    }
    let frames: Vec<usize> = (0..n_pick).map(|i| (2 * i + 1) * total_frames / (2 * n_pick)).collect();
    let d = spec.dim;
    let mut data = Vec::with_capacity(n_pick * tpf * d);
    let mut cached: Option<ClipTokens<f64>> = None;
    for &f in &frames {
        let clip_id = (f / spec.t_frames) as u64;
        if cached.as_ref().is_none_or(|c| c.clip_id != clip_id) {
            cached = Some(spec.clip(clip_id)?);
        }
        let clip = cached.as_ref().expect("just filled");
        let local = (f % spec.t_frames) * tpf;
        data.extend_from_slice(&clip.embeddings().as_slice()[local * d..(local + tpf) * d]);
    }
    let picked = ClipTokens::new(0, n_pick, tpf, 0, Matrix::from_raw(n_pick * tpf, d, data))?;
    let memory = ShortTermMemory::new(0);
    let budget = ContextBudget::new(config.window, 0, config.window)?;
    let ctx = assemble_context(&memory, &picked, &budget)?;
    let output = backend.process_clip(&ctx, &config.layer_subset)?;

    let truth = spec.ground_truth();
    let total = truth.total_event_tokens();
    let selection_recall = (total > 0).then(|| {
        let covered: usize = truth
            .events
            .iter()
            .flat_map(|e| {
                let base = e.clip_id as usize * spec.clip_tokens();
                e.token_indices.iter().map(move |&i| (base + i) / tpf)
            })
            .filter(|frame| frames.binary_search(frame).is_ok())
            .count();
        covered as f64 / total as f64
    });
    Ok(GlobalUniformReport { selected_tokens: n_pick * tpf, frames, selection_recall, caption: output.caption })
}
