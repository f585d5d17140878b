//! The streaming loop: buffer frames into clips, run the backend with recurrent memory
//! in context, keep the selected tokens and store the caption; answer questions from
//! the caption store.

mod harness;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

pub use harness::{
    default_queries, run_global_uniform, run_simulation, ClipRecord, GlobalUniformReport, QueryRecord, SimQuery,
    SimulationReport, CONCEPT_MATCH_COSINE,
};

use crate::backend::ClipBackend;
use crate::error::{invalid_arg, invalid_dim, Error, Result};
use crate::memory::{assemble_context, ContextBudget, ShortTermMemory};
use crate::numerics::{Matrix, SplitMix64, Vector};
use crate::retrieval::{retrieve, CaptionRecord, QueryEmbedding, RetrievalParams, RetrievalResult, Similarity};
use crate::scalar::Scalar;
use crate::scoring::{compute_token_scores, AggregationMode, ScoreVector};
use crate::selection::{kmeans_select, mean_pool, select_attention_topk, select_uniform, ClipTokens, SelectedTokenSet, Selector};

/// Every budget and knob of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Frames per short clip.
    pub clip_size: usize,
    /// Selected sets kept in short-term memory.
    pub max_mem: usize,
    pub tokens_per_frame: usize,
    /// Tokens kept per clip.
    pub n_select: usize,
    /// Visual context window per backend pass.
    pub window: usize,
    pub layer_subset: Vec<usize>,
    pub aggregation: AggregationMode,
    pub selector: Selector,
    pub mmr_lambda: f64,
    /// Token budget for retrieved captions plus the question.
    pub retrieval_budget: usize,
    /// Fixed number of captions to retrieve; `None` fills the budget.
    pub retrieval_k: Option<usize>,
    pub similarity: Similarity,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clip_size: 16,
            max_mem: 16,
            tokens_per_frame: 196,
            n_select: 196,
            window: 6272,
            layer_subset: vec![5, 9, 14, 20],
            aggregation: AggregationMode::MeanOverHeads,
            selector: Selector::Attention,
            mmr_lambda: 0.5,
            retrieval_budget: 10_000,
            retrieval_k: None,
            similarity: Similarity::Pooled,
            seed: 0,
        }
    }
}

/// Integer budget arithmetic implied by a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetSummary {
    pub window: usize,
    pub memory_half: usize,
    pub clip_half: usize,
    pub clip_tokens: usize,
    pub n_select: usize,
    pub memory_capacity: usize,
}

impl BudgetSummary {
    /// Kept fraction `n_select / clip_tokens`.
    pub fn compression_rate(&self) -> f64 {
        self.n_select as f64 / self.clip_tokens as f64
    }
}

impl PipelineConfig {
    pub fn clip_tokens(&self) -> usize {
        self.clip_size * self.tokens_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_size == 0 || self.tokens_per_frame == 0 || self.n_select == 0 {
            return Err(invalid_arg("clip_size, tokens_per_frame and n_select must be positive"));
        }
        if self.n_select > self.clip_tokens() {
            return Err(invalid_arg(format!(
                "n_select {} exceeds the {} tokens of a clip",
                self.n_select,
                self.clip_tokens()
            )));
        }
        let needed = self.max_mem * self.n_select + self.clip_tokens();
        if needed > self.window {
            return Err(Error::ContextOverflow(format!(
                "max_mem x n_select + clip tokens = {needed} exceeds window {}",
                self.window
            )));
        }
        if self.layer_subset.is_empty() || self.layer_subset.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg("layer subset must be non-empty and strictly increasing"));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return Err(invalid_arg(format!("mmr_lambda {} outside [0,1]", self.mmr_lambda)));
        }
        if self.retrieval_budget == 0 {
            return Err(invalid_arg("retrieval_budget must be positive"));
        }
        if self.retrieval_k == Some(0) {
            return Err(invalid_arg("retrieval_k must be positive when set"));
        }
        Ok(())
    }

    /// Current clip gets exactly its token count; memory gets the rest of the window.
    pub fn budget(&self) -> ContextBudget {
        let clip_half = self.clip_tokens();
        ContextBudget { window: self.window, memory_half: self.window - clip_half, clip_half }
    }

    pub fn budget_summary(&self) -> BudgetSummary {
        let b = self.budget();
        BudgetSummary {
            window: b.window,
            memory_half: b.memory_half,
            clip_half: b.clip_half,
            clip_tokens: self.clip_tokens(),
            n_select: self.n_select,
            memory_capacity: self.max_mem * self.n_select,
        }
    }

    pub fn retrieval_params(&self, query_tokens: usize) -> RetrievalParams {
        RetrievalParams {
            lambda: self.mmr_lambda,
            similarity: self.similarity,
            budget_tokens: Some(self.retrieval_budget),
            reserve_tokens: query_tokens,
            max_k: self.retrieval_k,
        }
    }
}

/// What happened when a clip boundary fired.
#[derive(Debug, Clone)]
pub struct ClipOutcome<T> {
    pub clip_id: u64,
    pub global_offset: usize,
    pub n_memory: usize,
    pub n_visual: usize,
    pub selection: SelectedTokenSet<T>,
    pub scores: Option<ScoreVector<T>>,
    pub elapsed: Duration,
}

/// Retrieved captions and the mock answer context built from them.
#[derive(Debug, Clone)]
pub struct Answer<T> {
    pub retrieval: RetrievalResult<T>,
    /// Retrieved captions in ascending clip order followed by the question.
    pub payload: String,
}

/// Running counters of a stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub clips_processed: usize,
    /// Fraction of planted event tokens selected (exact index), when ground truth exists.
    pub selection_recall: Option<f64>,
    /// Fraction of events with a kept token within [`CONCEPT_MATCH_COSINE`] of the concept.
    pub memory_concept_recall: Option<f64>,
    /// Fraction of queries whose target clip was retrieved.
    pub retrieval_recall_at_k: Option<f64>,
    /// Fraction of queries whose target clip was retrieved first.
    pub retrieval_top1: Option<f64>,
    /// Mean of (memory + clip tokens) / window over processed clips.
    pub context_utilization: f64,
    pub wall_clock_per_clip: Duration,
}

/// Mutable state owned by the streaming loop.
#[derive(Debug, Clone)]
pub struct StreamState<T> {
    frame_buffer: Vec<Matrix<T>>,
    memory: ShortTermMemory<T>,
    caption_store: Vec<Arc<CaptionRecord<T>>>,
    visual_index: BTreeMap<u64, Vector<T>>,
    dim: Option<usize>,
    frames_in: usize,
    clips_processed: usize,
    utilization_sum: f64,
    elapsed: Duration,
}

impl<T: Scalar> StreamState<T> {
    fn new(max_mem: usize) -> Self {
        Self {
            frame_buffer: Vec::new(),
            memory: ShortTermMemory::new(max_mem),
            caption_store: Vec::new(),
            visual_index: BTreeMap::new(),
            dim: None,
            frames_in: 0,
            clips_processed: 0,
            utilization_sum: 0.0,
            elapsed: Duration::ZERO,
        }
    }
}

/// Single-writer streaming loop around a backend.
pub struct StreamingPipeline<T, B> {
    config: PipelineConfig,
    backend: B,
    state: StreamState<T>,
}

impl<T: Scalar, B: ClipBackend<T>> StreamingPipeline<T, B> {
    pub fn new(config: PipelineConfig, backend: B) -> Result<Self> {
        config.validate()?;
        let state = StreamState::new(config.max_mem);
        Ok(Self { config, backend, state })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn memory(&self) -> &ShortTermMemory<T> {
        &self.state.memory
    }

    pub fn buffered_frames(&self) -> usize {
        self.state.frame_buffer.len()
    }

    pub fn frames_in(&self) -> usize {
        self.state.frames_in
    }

    pub fn clips_processed(&self) -> usize {
        self.state.clips_processed
    }

    /// Captions stored so far; cheap to clone and safe to query while ingestion continues.
    pub fn snapshot(&self) -> Vec<Arc<CaptionRecord<T>>> {
        self.state.caption_store.clone()
    }

    /// Mean-pooled visual tokens per processed clip.
    pub fn visual_index(&self) -> &BTreeMap<u64, Vector<T>> {
        &self.state.visual_index
    }

    pub fn metrics(&self) -> RunMetrics {
        let n = self.state.clips_processed;
        RunMetrics {
            clips_processed: n,
            context_utilization: if n == 0 { 0.0 } else { self.state.utilization_sum / n as f64 },
            wall_clock_per_clip: if n == 0 { Duration::ZERO } else { self.state.elapsed / n as u32 },
            ..Default::default()
        }
    }

    /// Buffers one frame (`tokens_per_frame x dim`); processes a clip when the buffer fills.
    pub fn process_frame(&mut self, frame: Matrix<T>) -> Result<Option<ClipOutcome<T>>> {
        if frame.rows() != self.config.tokens_per_frame {
            return Err(invalid_dim(format!(
                "frame has {} tokens, expected {}",
                frame.rows(),
                self.config.tokens_per_frame
            )));
        }
        match self.state.dim {
            Some(d) if d != frame.cols() => {
                return Err(invalid_dim(format!("frame dim {} but stream dim {d}", frame.cols())));
            }
            None if frame.cols() == 0 => return Err(invalid_dim("frame tokens have zero width")),
            _ => self.state.dim = Some(frame.cols()),
        }
        self.state.frames_in += 1;
        self.state.frame_buffer.push(frame);
        if self.state.frame_buffer.len() < self.config.clip_size {
            return Ok(None);
        }
        let frames = std::mem::take(&mut self.state.frame_buffer);
        self.process_clip(frames).map(Some)
    }

    fn process_clip(&mut self, frames: Vec<Matrix<T>>) -> Result<ClipOutcome<T>> {
        let started = Instant::now();
        let cfg = &self.config;
        let clip_id = self.state.clips_processed as u64;
        let dim = frames[0].cols();
        let mut data = Vec::with_capacity(cfg.clip_tokens() * dim);
        for f in &frames {
            data.extend_from_slice(f.as_slice());
        }
        let global_offset = clip_id as usize * cfg.clip_tokens();
        let clip = ClipTokens::new(clip_id, cfg.clip_size, cfg.tokens_per_frame, global_offset, Matrix::from_raw(cfg.clip_tokens(), dim, data))?;

        let budget = cfg.budget();
        let (output, layout) = {
            let ctx = assemble_context(&self.state.memory, &clip, &budget)?;
            (self.backend.process_clip(&ctx, &cfg.layer_subset)?, ctx.layout)
        };
        let mut scores = None;
        let selection = match cfg.selector {
            Selector::Attention => {
                let s = compute_token_scores(&output.trace, &cfg.layer_subset, cfg.aggregation)?;
                let sel = select_attention_topk(&clip, &s, cfg.n_select)?;
                scores = Some(s);
                sel
            }
            Selector::Uniform => select_uniform(&clip, cfg.n_select)?,
            Selector::MeanPool => mean_pool(&clip, cfg.n_select)?,
            Selector::KMeans => kmeans_select(&clip, cfg.n_select, &mut SplitMix64::derive(cfg.seed, clip_id))?,
        };
        self.state.memory.push(selection.clone())?;
        self.state.caption_store.push(Arc::new(output.caption));
        self.state.visual_index.insert(clip_id, clip.embeddings().mean_row());
        self.state.clips_processed += 1;
        self.state.utilization_sum += (layout.n_memory + layout.n_visual) as f64 / cfg.window as f64;
        let elapsed = started.elapsed();
        self.state.elapsed += elapsed;
        Ok(ClipOutcome { clip_id, global_offset, n_memory: layout.n_memory, n_visual: layout.n_visual, selection, scores, elapsed })
    }

    /// Answers against the captions stored so far; buffered frames are not consulted.
    pub fn answer_query(&self, query: &QueryEmbedding<T>) -> Result<Answer<T>> {
        answer_query(&self.snapshot(), query, &self.config)
    }
}

/// Budgeted MMR over a caption snapshot, then the answer context: retrieved captions
/// in ascending clip order followed by the question.
pub fn answer_query<T: Scalar>(
    store: &[Arc<CaptionRecord<T>>],
    query: &QueryEmbedding<T>,
    config: &PipelineConfig,
) -> Result<Answer<T>> {
    let retrieval = retrieve(query, store, &config.retrieval_params(query.token_count()))?;
    let mut ids = retrieval.clip_ids();
    ids.sort_unstable();
    let mut payload = String::new();
    for id in ids {
        let rec = store.iter().find(|r| r.clip_id == id).expect("retrieved from this store");
        match &rec.text {
            Some(t) => payload.push_str(t),
            None => payload.push_str(&format!("clip {id}")),
        }
        payload.push('\n');
    }
    payload.push_str("Q: ");
    match &query.text {
        Some(t) => payload.push_str(t),
        None => payload.push_str(&format!("<{} query tokens>", query.token_count())),
    }
    Ok(Answer { retrieval, payload })
}
