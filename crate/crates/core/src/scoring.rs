//! Per-token importance from caption-to-visual cross attention.
//!
//! The context handed to the model is laid out as
//! `[memory | current-clip visual | instruction | caption]`. Only the block where
//! caption rows attend to current-clip visual columns feeds the score; memory
//! columns are never scored.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid_arg, invalid_dim, Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::scalar::Scalar;

/// Token counts of one backend pass, in context order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TokenLayout {
    pub n_memory: usize,
    pub n_visual: usize,
    pub n_instruction: usize,
    pub n_caption: usize,
}

impl TokenLayout {
    pub fn new(n_memory: usize, n_visual: usize, n_instruction: usize, n_caption: usize) -> Self {
        Self { n_memory, n_visual, n_instruction, n_caption }
    }

    /// First column of the current clip; memory tokens precede it.
    #[inline]
    pub fn visual_col_offset(&self) -> usize {
        self.n_memory
    }

    #[inline]
    pub fn caption_row_offset(&self) -> usize {
        self.n_memory + self.n_visual + self.n_instruction
    }

    #[inline]
    pub fn n_total(&self) -> usize {
        self.caption_row_offset() + self.n_caption
    }
}

/// How head scores are combined inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    #[default]
    MeanOverHeads,
    MaxOverHeads,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanOverHeads => "avg",
            Self::MaxOverHeads => "max",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "mean" => Ok(Self::MeanOverHeads),
            "max" => Ok(Self::MaxOverHeads),
            other => Err(invalid_arg(format!("unknown aggregation `{other}` (expected avg or max)"))),
        }
    }
}

/// Cross-attention blocks (caption rows x current-clip visual columns) for one clip.
///
/// Only the layers listed in `layers` are materialized; `n_layers` is the model depth.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T> {
    clip_id: u64,
    n_layers: usize,
    n_heads: usize,
    layers: Vec<usize>,
    layout: TokenLayout,
    // indexed [layer position * n_heads + head]
    blocks: Vec<Matrix<T>>,
}

const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl<T: Scalar> AttentionTrace<T> {
    /// Validates shapes, entry range and row mass. `blocks` are layer-major, head-minor,
    /// following the order of `layers`.
    pub fn new(
        clip_id: u64,
        n_layers: usize,
        n_heads: usize,
        layers: Vec<usize>,
        layout: TokenLayout,
        blocks: Vec<Matrix<T>>,
    ) -> Result<Self> {
        if n_heads == 0 || n_layers == 0 {
            return Err(invalid_arg("trace needs at least one layer and one head"));
        }
        if layout.n_visual == 0 || layout.n_caption == 0 {
            return Err(invalid_arg("trace needs visual and caption tokens"));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg("trace layers must be strictly increasing"));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(invalid_arg(format!("trace layer {l} outside depth {n_layers}")));
        }
        if blocks.len() != layers.len() * n_heads {
            return Err(invalid_dim(format!(
                "expected {} blocks for {} layers x {n_heads} heads, got {}",
                layers.len() * n_heads,
                layers.len(),
                blocks.len()
            )));
        }
        let tol = T::lit(ROW_SUM_TOLERANCE);
        for (b, block) in blocks.iter().enumerate() {
            if block.rows() != layout.n_caption || block.cols() != layout.n_visual {
                return Err(invalid_dim(format!(
                    "block {b} is {}x{}, layout wants {}x{}",
                    block.rows(),
                    block.cols(),
                    layout.n_caption,
                    layout.n_visual
                )));
            }
            for (r, row) in block.row_iter().enumerate() {
                if row.iter().any(|&v| v < T::zero() || v > T::one()) {
                    return Err(invalid_arg(format!("block {b} row {r} has entries outside [0,1]")));
                }
                let s: T = row.iter().copied().sum();
                if s > T::one() + tol {
                    return Err(invalid_arg(format!("block {b} row {r} carries mass {s} > 1")));
                }
            }
        }
        Ok(Self { clip_id, n_layers, n_heads, layers, layout, blocks })
    }

    pub fn clip_id(&self) -> u64 {
        self.clip_id
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[Matrix<T>] {
        &self.blocks
    }

    pub fn block(&self, layer: usize, head: usize) -> Option<&Matrix<T>> {
        if head >= self.n_heads {
            return None;
        }
        let pos = self.layers.binary_search(&layer).ok()?;
        self.blocks.get(pos * self.n_heads + head)
    }
}

/// Per-visual-token importance for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pub clip_id: u64,
    pub scores: Vector<T>,
}

impl<T: Scalar> ScoreVector<T> {
    pub fn new(clip_id: u64, scores: Vec<T>) -> Result<Self> {
        if scores.iter().any(|&s| s < T::zero() || s > T::one()) {
            return Err(invalid_arg("scores must lie in [0,1]"));
        }
        Ok(Self { clip_id, scores: Vector::new(scores)? })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Copies the caption-rows x current-clip-columns block out of a full attention matrix.
pub fn extract_cross_block<T: Scalar>(full: &Matrix<T>, layout: &TokenLayout) -> Result<Matrix<T>> {
    let n = layout.n_total();
    if full.rows() != n || full.cols() != n {
        return Err(invalid_dim(format!(
            "attention matrix is {}x{}, layout implies {n}x{n}",
            full.rows(),
            full.cols()
        )));
    }
    let c0 = layout.visual_col_offset();
    full.submatrix(layout.caption_row_offset()..n, c0..c0 + layout.n_visual)
}

/// Layer-averaged token importance.
///
/// For each layer in `layer_subset`, every head's block is first averaged over caption
/// rows; heads are then combined by mean or max according to `mode`, and the result is
/// averaged over layers.
pub fn compute_token_scores<T: Scalar>(
    trace: &AttentionTrace<T>,
    layer_subset: &[usize],
    mode: AggregationMode,
) -> Result<ScoreVector<T>> {
    if layer_subset.is_empty() {
        return Err(invalid_arg("layer subset is empty"));
    }
    let n_visual = trace.layout.n_visual;
    let inv_caption = T::one() / T::from_usize(trace.layout.n_caption).unwrap();
    let inv_heads = T::one() / T::from_usize(trace.n_heads).unwrap();
    let inv_layers = T::one() / T::from_usize(layer_subset.len()).unwrap();

    let mut scores = vec![T::zero(); n_visual];
    let mut head_score = vec![T::zero(); n_visual];
    let mut layer_score = vec![T::zero(); n_visual];
    for &layer in layer_subset {
        if layer >= trace.n_layers {
            return Err(invalid_arg(format!("layer {layer} outside depth {}", trace.n_layers)));
        }
        layer_score.fill(match mode {
            AggregationMode::MeanOverHeads => T::zero(),
            AggregationMode::MaxOverHeads => T::neg_infinity(),
        });
        for head in 0..trace.n_heads {
            let block = trace.block(layer, head).ok_or(Error::MissingTrace { layer, head })?;
            head_score.fill(T::zero());
            for row in block.row_iter() {
                for (acc, &a) in head_score.iter_mut().zip(row) {
                    *acc += a;
                }
            }
            for (ls, &hs) in layer_score.iter_mut().zip(&head_score) {
                let hs = hs * inv_caption;
                match mode {
                    AggregationMode::MeanOverHeads => *ls += hs * inv_heads,
                    AggregationMode::MaxOverHeads => *ls = ls.max(hs),
                }
            }
        }
        for (s, &ls) in scores.iter_mut().zip(&layer_score) {
            *s += ls * inv_layers;
        }
    }
    // rounding can leave a hair above 1 when all mass sits on one column
    for s in &mut scores {
        *s = s.min(T::one());
    }
    ScoreVector::new(trace.clip_id, scores)
}

/// `n_pick` layer indices spread evenly over `0..n_layers`: the i-th is
/// `floor((i + 0.5) * n_layers / n_pick)`.
pub fn uniform_layer_subset(n_layers: usize, n_pick: usize) -> Result<Vec<usize>> {
    if n_pick == 0 || n_pick > n_layers {
        return Err(invalid_arg(format!("cannot pick {n_pick} of {n_layers} layers")));
    }
    let mut out = Vec::with_capacity(n_pick);
    for i in 0..n_pick {
        let mut idx = ((2 * i + 1) * n_layers / (2 * n_pick)).min(n_layers - 1);
        if let Some(&prev) = out.last() {
            if idx <= prev {
                idx = prev + 1;
            }
        }
        out.push(idx);
    }
    Ok(out)
}
