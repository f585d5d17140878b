//! Short-term FIFO memory of selected token sets and per-clip context assembly.

use std::collections::VecDeque;

use crate::error::{invalid_arg, Error, Result};
use crate::scalar::Scalar;
use crate::scoring::TokenLayout;
use crate::selection::{ClipTokens, SelectedTokenSet};

/// Bounded FIFO of past selections, oldest first. `max_mem == 0` keeps nothing.
#[derive(Debug, Clone)]
pub struct ShortTermMemory<T> {
    max_mem: usize,
    entries: VecDeque<SelectedTokenSet<T>>,
    last_clip: Option<u64>,
}

impl<T: Scalar> ShortTermMemory<T> {
    pub fn new(max_mem: usize) -> Self {
        Self { max_mem, entries: VecDeque::with_capacity(max_mem), last_clip: None }
    }

    pub fn max_mem(&self) -> usize {
        self.max_mem
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &SelectedTokenSet<T>> {
        self.entries.iter()
    }

    /// Total tokens across all stored sets.
    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|s| s.n_select()).sum()
    }

    /// Appends `set`, evicting the oldest entry first when full. Returns the evicted set.
    pub fn push(&mut self, set: SelectedTokenSet<T>) -> Result<Option<SelectedTokenSet<T>>> {
        if let Some(last) = self.last_clip {
            if set.clip_id <= last {
                return Err(Error::OutOfOrderClip { last, got: set.clip_id });
            }
        }
        self.last_clip = Some(set.clip_id);
        if self.max_mem == 0 {
            return Ok(Some(set));
        }
        let evicted = if self.entries.len() == self.max_mem { self.entries.pop_front() } else { None };
        self.entries.push_back(set);
        Ok(evicted)
    }
}

/// Visual context window split between injected memory and the current clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextBudget {
    pub window: usize,
    pub memory_half: usize,
    pub clip_half: usize,
}

impl ContextBudget {
    pub fn new(window: usize, memory_half: usize, clip_half: usize) -> Result<Self> {
        if memory_half + clip_half != window {
            return Err(invalid_arg(format!(
                "budget halves {memory_half} + {clip_half} do not add up to window {window}"
            )));
        }
        Ok(Self { window, memory_half, clip_half })
    }

    /// Even split; an odd window gives the extra token to the clip side.
    pub fn even(window: usize) -> Self {
        let memory_half = window / 2;
        Self { window, memory_half, clip_half: window - memory_half }
    }
}

/// One pass's visual context: memory tokens (oldest first) followed by the current clip.
#[derive(Debug, Clone)]
pub struct ContextAssembly<'a, T> {
    pub memory_tokens: Vec<&'a [T]>,
    /// `(clip_id, local index)` of each memory token.
    pub memory_origin: Vec<(u64, usize)>,
    pub clip: &'a ClipTokens<T>,
    /// Visual counts only; the backend fills in instruction and caption counts.
    pub layout: TokenLayout,
}

impl<T: Scalar> ContextAssembly<'_, T> {
    pub fn visual_total(&self) -> usize {
        self.layout.n_memory + self.layout.n_visual
    }
}

/// Flattens memory oldest-first and places the clip after it. Fails rather than truncates
/// when either side exceeds its half of the budget.
pub fn assemble_context<'a, T: Scalar>(
    memory: &'a ShortTermMemory<T>,
    clip: &'a ClipTokens<T>,
    budget: &ContextBudget,
) -> Result<ContextAssembly<'a, T>> {
    let n_visual = clip.token_count();
    if n_visual > budget.clip_half {
        return Err(Error::ContextOverflow(format!(
            "clip {} has {n_visual} tokens, clip budget is {}",
            clip.clip_id, budget.clip_half
        )));
    }
    let n_memory = memory.token_count();
    if n_memory > budget.memory_half {
        return Err(Error::ContextOverflow(format!(
            "memory holds {n_memory} tokens, memory budget is {}",
            budget.memory_half
        )));
    }
    let mut memory_tokens = Vec::with_capacity(n_memory);
    let mut memory_origin = Vec::with_capacity(n_memory);
    for set in memory.entries() {
        for (row, &idx) in set.embeddings().row_iter().zip(set.indices()) {
            memory_tokens.push(row);
            memory_origin.push((set.clip_id, idx));
        }
    }
    Ok(ContextAssembly {
        memory_tokens,
        memory_origin,
        clip,
        layout: TokenLayout::new(n_memory, n_visual, 0, 0),
    })
}
