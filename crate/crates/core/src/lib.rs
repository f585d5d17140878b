//! Streaming video question answering engine with attention-based token selection,
//! recurrent short-term memory and caption retrieval.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases at the crate
//! root fix it to `f64`, with `…32` variants for `f32`. The mock backend and the trace
//! reader work in `f64`.

pub mod backend;
pub mod config;
pub mod error;
pub mod memory;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod scoring;
pub mod selection;

pub use backend::{BackendOutput, ClipBackend, MockBackend, MockModelConfig, ReplayBackend, ScenarioSpec};
pub use error::{Error, Result};
pub use memory::{assemble_context, ContextAssembly, ContextBudget, ShortTermMemory};
pub use numerics::{Matrix, SplitMix64, Vector};
pub use pipeline::{answer_query, run_simulation, PipelineConfig, RunMetrics, StreamingPipeline};
pub use retrieval::{budgeted_retrieve, mmr_retrieve, retrieve, CaptionRecord, QueryEmbedding, RetrievalResult, Similarity};
pub use scalar::Scalar;
pub use scoring::{compute_token_scores, AggregationMode, AttentionTrace, ScoreVector, TokenLayout};
pub use selection::{select_attention_topk, ClipTokens, SelectedTokenSet, Selector};

pub type Mat = Matrix<f64>;
pub type Embedding = Vector<f64>;
pub type Trace = AttentionTrace<f64>;
pub type Scores = ScoreVector<f64>;
pub type Clip = ClipTokens<f64>;
pub type Selection = SelectedTokenSet<f64>;
pub type Memory = ShortTermMemory<f64>;
pub type Caption = CaptionRecord<f64>;
pub type Query = QueryEmbedding<f64>;

pub type Mat32 = Matrix<f32>;
pub type Embedding32 = Vector<f32>;
pub type Trace32 = AttentionTrace<f32>;
pub type Clip32 = ClipTokens<f32>;
pub type Selection32 = SelectedTokenSet<f32>;
pub type Caption32 = CaptionRecord<f32>;
pub type Query32 = QueryEmbedding<f32>;
