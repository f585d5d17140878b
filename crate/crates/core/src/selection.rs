//! Reducing a clip's visual tokens to a small set kept in temporal order.
//!
//! [`select_attention_topk`] is the attention-guided selector; uniform sampling,
//! mean pooling and k-means are the comparison baselines.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid_arg, invalid_dim, Error, Result};
use crate::numerics::{top_k_ascending, Matrix, SplitMix64};
use crate::scalar::Scalar;
use crate::scoring::ScoreVector;

/// Visual tokens of one short clip, frame-major then spatial.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTokens<T> {
    pub clip_id: u64,
    pub t_frames: usize,
    pub tokens_per_frame: usize,
    /// Stream position of the first token.
    pub global_offset: usize,
    embeddings: Matrix<T>,
}

impl<T: Scalar> ClipTokens<T> {
    pub fn new(
        clip_id: u64,
        t_frames: usize,
        tokens_per_frame: usize,
        global_offset: usize,
        embeddings: Matrix<T>,
    ) -> Result<Self> {
        if embeddings.rows() != t_frames * tokens_per_frame {
            return Err(invalid_dim(format!(
                "clip {clip_id}: {} embeddings for {t_frames} frames x {tokens_per_frame} tokens",
                embeddings.rows()
            )));
        }
        if embeddings.cols() == 0 {
            return Err(invalid_dim("clip embeddings have zero width"));
        }
        Ok(Self { clip_id, t_frames, tokens_per_frame, global_offset, embeddings })
    }

    pub fn token_count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn token(&self, i: usize) -> &[T] {
        self.embeddings.row(i)
    }
}

/// Tokens retained from one clip. `indices` are local to the clip and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedTokenSet<T> {
    pub clip_id: u64,
    indices: Vec<usize>,
    embeddings: Matrix<T>,
}

impl<T: Scalar> SelectedTokenSet<T> {
    pub fn new(clip_id: u64, indices: Vec<usize>, embeddings: Matrix<T>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_arg("selected indices must be strictly increasing"));
        }
        if indices.len() != embeddings.rows() {
            return Err(invalid_dim(format!(
                "{} indices but {} embeddings",
                indices.len(),
                embeddings.rows()
            )));
        }
        Ok(Self { clip_id, indices, embeddings })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn n_select(&self) -> usize {
        self.indices.len()
    }
}

/// Which selector turns a processed clip into memory tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selector {
    #[default]
    Attention,
    Uniform,
    MeanPool,
    KMeans,
}

impl Selector {
    pub const ALL: [Selector; 4] = [Self::Attention, Self::Uniform, Self::MeanPool, Self::KMeans];

    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Uniform => "uniform",
            Self::MeanPool => "mean-pool",
            Self::KMeans => "kmeans",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|sel| sel.name() == s).ok_or_else(|| {
            invalid_arg(format!(
                "unknown selector `{s}` (valid: attention, uniform, mean-pool, kmeans)"
            ))
        })
    }
}

fn check_n_select(n_select: usize, count: usize) -> Result<()> {
    if n_select == 0 || n_select > count {
        return Err(invalid_arg(format!("cannot select {n_select} of {count} tokens")));
    }
    Ok(())
}

fn gather<T: Scalar>(clip: &ClipTokens<T>, indices: Vec<usize>) -> SelectedTokenSet<T> {
    let embeddings = clip.embeddings.select_rows(&indices);
    SelectedTokenSet { clip_id: clip.clip_id, indices, embeddings }
}

/// Keeps the `n_select` highest-scoring tokens (ties to the earlier token) in temporal order.
pub fn select_attention_topk<T: Scalar>(
    clip: &ClipTokens<T>,
    scores: &ScoreVector<T>,
    n_select: usize,
) -> Result<SelectedTokenSet<T>> {
    if scores.len() != clip.token_count() {
        return Err(invalid_dim(format!(
            "{} scores for {} tokens",
            scores.len(),
            clip.token_count()
        )));
    }
    check_n_select(n_select, clip.token_count())?;
    Ok(gather(clip, top_k_ascending(&scores.scores, n_select)))
}

/// One token from the center of each of `n_select` equal-width blocks:
/// index `floor((i + 0.5) * count / n_select)`.
pub fn select_uniform<T: Scalar>(clip: &ClipTokens<T>, n_select: usize) -> Result<SelectedTokenSet<T>> {
    let count = clip.token_count();
    check_n_select(n_select, count)?;
    let indices = (0..n_select).map(|i| (2 * i + 1) * count / (2 * n_select)).collect();
    Ok(gather(clip, indices))
}

/// Averages `n_select` contiguous chunks (sizes differ by at most one, larger chunks
/// first). Each pooled token is tagged with its chunk's first index.
pub fn mean_pool<T: Scalar>(clip: &ClipTokens<T>, n_select: usize) -> Result<SelectedTokenSet<T>> {
    let count = clip.token_count();
    check_n_select(n_select, count)?;
    let dim = clip.dim();
    let base = count / n_select;
    let extra = count % n_select;
    let mut indices = Vec::with_capacity(n_select);
    let mut data = Vec::with_capacity(n_select * dim);
    let mut start = 0;
    for chunk in 0..n_select {
        let len = base + usize::from(chunk < extra);
        let mut acc = vec![T::zero(); dim];
        for r in start..start + len {
            for (a, &v) in acc.iter_mut().zip(clip.token(r)) {
                *a += v;
            }
        }
        let n = T::from_usize(len).unwrap();
        data.extend(acc.into_iter().map(|a| a / n));
        indices.push(start);
        start += len;
    }
    Ok(SelectedTokenSet { clip_id: clip.clip_id, indices, embeddings: Matrix::from_raw(n_select, dim, data) })
}

const KMEANS_MAX_ITERS: usize = 25;
const KMEANS_SHIFT_TOL: f64 = 1e-4;

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// k-means++ seeding, then Lloyd iterations (at most 25, or until no centroid moves
/// more than 1e-4). Returns the real token nearest each centroid, falling back to the
/// next-nearest unused token on collisions.
pub fn kmeans_select<T: Scalar>(
    clip: &ClipTokens<T>,
    n_select: usize,
    rng: &mut SplitMix64,
) -> Result<SelectedTokenSet<T>> {
    let count = clip.token_count();
    check_n_select(n_select, count)?;
    let points = clip.embeddings();
    let dim = clip.dim();

    // k-means++ seeding
    let mut centroids: Vec<Vec<T>> = Vec::with_capacity(n_select);
    let mut chosen = vec![false; count];
    let first = rng.next_below(count);
    chosen[first] = true;
    centroids.push(points.row(first).to_vec());
    let mut d2: Vec<f64> = (0..count).map(|i| sq_dist(points.row(i), &centroids[0]).as_f64()).collect();
    while centroids.len() < n_select {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centroid already
            chosen.iter().position(|&c| !c).expect("n_select <= count")
        };
        chosen[pick] = true;
        centroids.push(points.row(pick).to_vec());
        let c = centroids.last().unwrap();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), c).as_f64());
        }
    }

    // Lloyd
    let mut assign = vec![0usize; count];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best = (T::infinity(), 0);
            for (k, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.0 {
                    best = (d, k);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![vec![T::zero(); dim]; n_select];
        let mut sizes = vec![0usize; n_select];
        for (i, &k) in assign.iter().enumerate() {
            sizes[k] += 1;
            for (s, &v) in sums[k].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut max_shift = 0.0f64;
        for k in 0..n_select {
            if sizes[k] == 0 {
                continue;
            }
            let n = T::from_usize(sizes[k]).unwrap();
            let next: Vec<T> = sums[k].iter().map(|&s| s / n).collect();
            max_shift = max_shift.max(sq_dist(&next, &centroids[k]).as_f64().sqrt());
            centroids[k] = next;
        }
        if max_shift < KMEANS_SHIFT_TOL {
            break;
        }
    }

    let mut used = vec![false; count];
    let mut indices = Vec::with_capacity(n_select);
    for c in &centroids {
        let mut best: Option<(T, usize)> = None;
        for i in (0..count).filter(|&i| !used[i]) {
            let d = sq_dist(points.row(i), c);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.expect("n_select <= count");
        used[i] = true;
        indices.push(i);
    }
    indices.sort_unstable();
    Ok(gather(clip, indices))
}
