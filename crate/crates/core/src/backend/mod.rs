//! The video-LLM seen through one call per clip: context in, caption and attention out.

mod mock;
mod scenario;
mod trace_io;

use std::collections::HashMap;

pub use mock::{MockBackend, MockModelConfig, CAPTION_PROMPT, INSTRUCTION_TOKENS};
pub use scenario::{generate_scenario, GroundTruth, PlantedEvent, ScenarioSpec};
pub use trace_io::{read_trace, read_trace_bytes, write_trace, write_trace_bytes, TRACE_MAGIC, TRACE_VERSION};

use crate::error::{invalid_dim, Error, Result};
use crate::memory::ContextAssembly;
use crate::retrieval::CaptionRecord;
use crate::scalar::Scalar;
use crate::scoring::AttentionTrace;

/// Caption and cross-attention produced for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendOutput<T> {
    pub caption: CaptionRecord<T>,
    pub trace: AttentionTrace<T>,
}

impl<T: Scalar> BackendOutput<T> {
    pub fn new(caption: CaptionRecord<T>, trace: AttentionTrace<T>) -> Result<Self> {
        if caption.token_count() != trace.layout().n_caption {
            return Err(invalid_dim(format!(
                "caption has {} tokens, trace layout says {}",
                caption.token_count(),
                trace.layout().n_caption
            )));
        }
        if caption.clip_id != trace.clip_id() {
            return Err(Error::InvalidArgument(format!(
                "caption clip {} paired with trace clip {}",
                caption.clip_id,
                trace.clip_id()
            )));
        }
        Ok(Self { caption, trace })
    }
}

/// Anything that can caption a clip and expose the attention it used.
///
/// `layers` lists the layers whose attention must be materialized in the trace.
pub trait ClipBackend<T: Scalar> {
    fn process_clip(&self, ctx: &ContextAssembly<'_, T>, layers: &[usize]) -> Result<BackendOutput<T>>;
}

impl<T: Scalar, B: ClipBackend<T> + ?Sized> ClipBackend<T> for &B {
    fn process_clip(&self, ctx: &ContextAssembly<'_, T>, layers: &[usize]) -> Result<BackendOutput<T>> {
        (**self).process_clip(ctx, layers)
    }
}

/// Serves previously recorded outputs (for example dumps from a real model) by clip id.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend<T> {
    outputs: HashMap<u64, BackendOutput<T>>,
}

impl<T: Scalar> ReplayBackend<T> {
    pub fn new(outputs: impl IntoIterator<Item = BackendOutput<T>>) -> Self {
        Self { outputs: outputs.into_iter().map(|o| (o.trace.clip_id(), o)).collect() }
    }
}

impl<T: Scalar> ClipBackend<T> for ReplayBackend<T> {
    fn process_clip(&self, ctx: &ContextAssembly<'_, T>, layers: &[usize]) -> Result<BackendOutput<T>> {
        let clip_id = ctx.clip.clip_id;
        let out = self
            .outputs
            .get(&clip_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no recorded output for clip {clip_id}")))?;
        let layout = out.trace.layout();
        if layout.n_visual != ctx.layout.n_visual || layout.n_memory != ctx.layout.n_memory {
            return Err(invalid_dim(format!(
                "recorded clip {clip_id} has {} memory + {} visual tokens, context has {} + {}",
                layout.n_memory, layout.n_visual, ctx.layout.n_memory, ctx.layout.n_visual
            )));
        }
        for &layer in layers {
            if out.trace.block(layer, 0).is_none() {
                return Err(Error::MissingTrace { layer, head: 0 });
            }
        }
        Ok(out.clone())
    }
}
