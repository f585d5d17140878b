//! Deterministic stand-in for a video-LLM.
//!
//! The mock keeps the parts of a decoder that matter to token selection: per-layer,
//! per-head query/key projections, scaled dot-product logits and causal softmax over
//! `[memory | visual | instruction | caption]`. Caption hidden states are seeded unit
//! vectors pulled toward the clip's dominant content direction, so the caption attends
//! to whatever dominates the clip. Caption token embeddings are the attention-weighted
//! sums of the visual tokens, mapped into a separate "text" space by a fixed
//! orthogonal map `R` with `<v, R v> = 0` for every `v`; raw visual tokens therefore
//! carry no direct similarity to text-space queries.
//!
//! Emitted blocks and caption embeddings are rounded to `f32` precision, matching what
//! an accelerator dump would contain, so they survive the trace file unchanged.

use crate::backend::{BackendOutput, ClipBackend};
use crate::error::{invalid_arg, invalid_dim, Result};
use crate::memory::ContextAssembly;
use crate::numerics::{dot, softmax_in_place, Matrix, SplitMix64};
use crate::retrieval::{CaptionRecord, QueryEmbedding};
use crate::scoring::{AttentionTrace, TokenLayout};

/// Instruction the mock pretends to have been prompted with.
pub const CAPTION_PROMPT: &str = "Describe what's happening in the video.";
/// Fixed instruction length in tokens.
pub const INSTRUCTION_TOKENS: usize = 8;

// logit multiplier on top of 1/sqrt(d_k)
const SHARPNESS: f64 = 16.0;
// weight of the per-token seed in a caption hidden state
const SEED_MIX: f64 = 0.35;
// projection noise around the per-head coordinate slice
const PROJECTION_NOISE: f64 = 0.1;
const POWER_ITERS: usize = 30;
const QUERY_NOISE: f64 = 0.05;

/// Shape and seed of the mock model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub caption_len: usize,
    pub seed: u64,
}

impl Default for MockModelConfig {
    fn default() -> Self {
        Self { dim: 16, n_layers: 28, n_heads: 2, head_dim: 8, caption_len: 8, seed: 0 }
    }
}

impl MockModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.caption_len == 0 {
            return Err(invalid_arg("mock model counts must be at least 1"));
        }
        if self.dim != self.n_heads * self.head_dim {
            return Err(invalid_arg(format!(
                "dim {} != n_heads {} x head_dim {}",
                self.dim, self.n_heads, self.head_dim
            )));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(invalid_arg("mock model dim must be even"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HeadWeights {
    // dim x head_dim, row-major
    wq: Vec<f64>,
    wk: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockModelConfig,
    instruction: Vec<Vec<f64>>,
    caption_seeds: Vec<Vec<f64>>,
    // dim x dim, row-major
    text_map: Vec<f64>,
    probe: Vec<f64>,
    heads: Vec<HeadWeights>,
}

fn round_to_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Largest f32 not above `x`; keeps row sums of probabilities from growing.
fn round_down_to_f32(x: f64) -> f64 {
    let f = x as f32;
    if (f as f64) > x {
        f.next_down() as f64
    } else {
        f as f64
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

impl MockBackend {
    pub fn new(config: MockModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = SplitMix64::derive(config.seed, 0x6d6f_636b);
        let instruction = (0..INSTRUCTION_TOKENS).map(|_| rng.unit_vector(d)).collect();
        let caption_seeds = (0..config.caption_len).map(|_| rng.unit_vector(d)).collect();
        let probe = rng.unit_vector(d);

        // random orthonormal basis Q (rows), then R = Q^T J Q with J a quarter turn in
        // each coordinate pair
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            if normalize(&mut v) {
                basis.push(v);
            }
        }
        let mut text_map = vec![0.0; d * d];
        for k in 0..d / 2 {
            let (a, b) = (&basis[2 * k], &basis[2 * k + 1]);
            // J maps a -> b and b -> -a, i.e. R += b a^T - a b^T
            for r in 0..d {
                for c in 0..d {
                    text_map[r * d + c] += b[r] * a[c] - a[r] * b[c];
                }
            }
        }

        let hd = config.head_dim;
        let mut heads = Vec::with_capacity(config.n_layers * config.n_heads);
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                let mut hrng = SplitMix64::derive(config.seed, ((layer as u64) << 16) | head as u64);
                let mut slice = || {
                    let mut w = vec![0.0; d * hd];
                    for (i, v) in w.iter_mut().enumerate() {
                        let (row, col) = (i / hd, i % hd);
                        let base = if row == head * hd + col { 1.0 } else { 0.0 };
                        *v = base + PROJECTION_NOISE * hrng.next_gaussian();
                    }
                    w
                };
                let wq = slice();
                let wk = slice();
                heads.push(HeadWeights { wq, wk });
            }
        }
        Ok(Self { config, instruction, caption_seeds, text_map, probe, heads })
    }

    pub fn config(&self) -> &MockModelConfig {
        &self.config
    }

    /// Maps a visual-space vector into the text space captions live in.
    pub fn to_text_space(&self, v: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        (0..d).map(|r| dot(&self.text_map[r * d..(r + 1) * d], v)).collect()
    }

    /// Question embedding asking about `concept` (a visual-space direction): `n_tokens`
    /// noisy copies of the concept in text space.
    pub fn query_for_concept(&self, concept: &[f64], n_tokens: usize, seed: u64) -> Result<QueryEmbedding<f64>> {
        if concept.len() != self.config.dim {
            return Err(invalid_dim(format!("concept has dim {}, model dim {}", concept.len(), self.config.dim)));
        }
        let mut rng = SplitMix64::derive(self.config.seed ^ 0x0071_7565_7279, seed);
        let rows: Vec<Vec<f64>> = (0..n_tokens.max(1))
            .map(|_| {
                let noisy: Vec<f64> = concept.iter().map(|&c| c + QUERY_NOISE * rng.next_gaussian()).collect();
                self.to_text_space(&noisy)
            })
            .collect();
        QueryEmbedding::new(Matrix::from_rows(&rows)?, None)
    }

    /// Dominant direction of the clip's tokens (power iteration on the second-moment
    /// matrix), signed so the tokens project onto it positively on average.
    fn dominant_direction(&self, clip: &Matrix<f64>) -> Vec<f64> {
        let d = self.config.dim;
        let mut v = self.probe.clone();
        for _ in 0..POWER_ITERS {
            let mut next = vec![0.0; d];
            for x in clip.row_iter() {
                let p = dot(x, &v);
                next.iter_mut().zip(x).for_each(|(n, &xi)| *n += p * xi);
            }
            if !normalize(&mut next) {
                return self.probe.clone();
            }
            v = next;
        }
        let mean_proj: f64 = clip.row_iter().map(|x| dot(x, &v)).sum();
        if mean_proj < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    }

    fn caption_hidden(&self, clip: &Matrix<f64>) -> Vec<Vec<f64>> {
        let u = self.dominant_direction(clip);
        self.caption_seeds
            .iter()
            .map(|s| {
                let mut h: Vec<f64> = u.iter().zip(s).map(|(a, b)| a + SEED_MIX * b).collect();
                if !normalize(&mut h) {
                    h = s.clone();
                }
                h
            })
            .collect()
    }

    fn check_context(&self, ctx: &ContextAssembly<'_, f64>) -> Result<()> {
        let d = self.config.dim;
        if ctx.clip.dim() != d {
            return Err(invalid_dim(format!("clip dim {} but model dim {d}", ctx.clip.dim())));
        }
        if let Some(t) = ctx.memory_tokens.iter().find(|t| t.len() != d) {
            return Err(invalid_dim(format!("memory token dim {} but model dim {d}", t.len())));
        }
        if ctx.layout.n_memory != ctx.memory_tokens.len() || ctx.layout.n_visual != ctx.clip.token_count() {
            return Err(invalid_dim("context layout disagrees with its tokens"));
        }
        Ok(())
    }

    /// Causal softmax rows of the caption positions for one (layer, head), over the
    /// whole context (`caption_len x n_total`, zero on future positions).
    pub fn caption_attention_rows(&self, ctx: &ContextAssembly<'_, f64>, layer: usize, head: usize) -> Result<Matrix<f64>> {
        self.check_context(ctx)?;
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(invalid_arg(format!("no layer {layer} head {head} in the mock model")));
        }
        let prefix = self.prefix_tokens(ctx);
        let hidden = self.caption_hidden(ctx.clip.embeddings());
        let n_total = prefix.len() + hidden.len();
        let mut out = Matrix::zeros(hidden.len(), n_total);
        for i in 0..hidden.len() {
            let row = self.attention_row(&prefix, &hidden, i, layer, head);
            out.row_mut(i)[..row.len()].copy_from_slice(&row);
        }
        Ok(out)
    }

    fn prefix_tokens<'a>(&'a self, ctx: &'a ContextAssembly<'_, f64>) -> Vec<&'a [f64]> {
        let mut prefix: Vec<&[f64]> = Vec::with_capacity(ctx.visual_total() + INSTRUCTION_TOKENS);
        prefix.extend(ctx.memory_tokens.iter().copied());
        prefix.extend(ctx.clip.embeddings().row_iter());
        prefix.extend(self.instruction.iter().map(Vec::as_slice));
        prefix
    }

    /// Softmax over positions `0..=prefix.len() + i` for caption token `i`.
    fn attention_row(&self, prefix: &[&[f64]], hidden: &[Vec<f64>], i: usize, layer: usize, head: usize) -> Vec<f64> {
        let d = self.config.dim;
        let hd = self.config.head_dim;
        let w = &self.heads[layer * self.config.n_heads + head];
        let h = &hidden[i];
        // logit(x) = (W_Q^T h) . (W_K^T x) * scale = x . (W_K W_Q^T h) * scale
        let q: Vec<f64> = (0..hd).map(|c| (0..d).map(|r| w.wq[r * hd + c] * h[r]).sum()).collect();
        let scale = SHARPNESS / (hd as f64).sqrt();
        let key_dir: Vec<f64> = (0..d).map(|r| scale * dot(&w.wk[r * hd..(r + 1) * hd], &q)).collect();
        let mut logits: Vec<f64> = Vec::with_capacity(prefix.len() + i + 1);
        logits.extend(prefix.iter().map(|x| dot(x, &key_dir)));
        logits.extend(hidden[..=i].iter().map(|x| dot(x, &key_dir)));
        softmax_in_place(&mut logits);
        logits
    }
}

impl ClipBackend<f64> for MockBackend {
    fn process_clip(&self, ctx: &ContextAssembly<'_, f64>, layers: &[usize]) -> Result<BackendOutput<f64>> {
        self.check_context(ctx)?;
        if layers.is_empty() {
            return Err(invalid_arg("mock backend needs at least one layer to trace"));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg("traced layers must be strictly increasing"));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(invalid_arg(format!("layer {l} outside mock depth {}", self.config.n_layers)));
        }
        let n_mem = ctx.layout.n_memory;
        let n_vis = ctx.layout.n_visual;
        let n_cap = self.config.caption_len;
        let d = self.config.dim;
        let prefix = self.prefix_tokens(ctx);
        let hidden = self.caption_hidden(ctx.clip.embeddings());

        let mut blocks = Vec::with_capacity(layers.len() * self.config.n_heads);
        let mut mass = vec![0.0; n_cap * n_vis];
        for &layer in layers {
            for head in 0..self.config.n_heads {
                let mut block = Vec::with_capacity(n_cap * n_vis);
                for i in 0..n_cap {
                    let row = self.attention_row(&prefix, &hidden, i, layer, head);
                    let visual = &row[n_mem..n_mem + n_vis];
                    for (m, &a) in mass[i * n_vis..(i + 1) * n_vis].iter_mut().zip(visual) {
                        *m += a;
                    }
                    block.extend(visual.iter().map(|&a| round_down_to_f32(a)));
                }
                blocks.push(Matrix::from_raw(n_cap, n_vis, block));
            }
        }

        let norm = (layers.len() * self.config.n_heads) as f64;
        let clip = ctx.clip.embeddings();
        let mut caption_rows = Vec::with_capacity(n_cap);
        for i in 0..n_cap {
            let mut acc = vec![0.0; d];
            for (j, x) in clip.row_iter().enumerate() {
                let w = mass[i * n_vis + j] / norm;
                acc.iter_mut().zip(x).for_each(|(a, &xi)| *a += w * xi);
            }
            caption_rows.push(self.to_text_space(&acc).into_iter().map(round_to_f32).collect::<Vec<_>>());
        }

        let clip_id = ctx.clip.clip_id;
        let layout = TokenLayout::new(n_mem, n_vis, INSTRUCTION_TOKENS, n_cap);
        let trace = AttentionTrace::new(clip_id, self.config.n_layers, self.config.n_heads, layers.to_vec(), layout, blocks)?;
        let text = format!("clip {clip_id}: {n_vis} visual tokens, {n_mem} memory tokens in context");
        let caption = CaptionRecord::new(clip_id, Matrix::from_rows(&caption_rows)?, Some(text))?;
        BackendOutput::new(caption, trace)
    }
}
