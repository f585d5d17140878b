//! Long-term caption memory and query-time retrieval.
//!
//! Relevance of a caption to a query is the cosine between their mean-pooled token
//! embeddings (or, with [`Similarity::Pairwise`], the mean of all token-pair cosines).
//! Retrieval is greedy Maximal Marginal Relevance:
//!
//! ```text
//! pick argmax_c  lambda * sim(c, q) - (1 - lambda) * max_{s in picked} sim(c, s)
//! ```
//!
//! where the first pick is the plain relevance argmax and ties go to the smaller clip id.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid_arg, invalid_dim, Error, Result};
use crate::numerics::{argsort_desc, cosine, Matrix, SplitMix64, Vector};
use crate::scalar::Scalar;

fn pooled_of<T: Scalar>(tokens: &Matrix<T>) -> Result<Vector<T>> {
    if tokens.rows() == 0 {
        return Err(invalid_arg("embedding needs at least one token"));
    }
    if tokens.cols() == 0 {
        return Err(invalid_dim("embedding tokens have zero width"));
    }
    Ok(tokens.mean_row())
}

/// One clip's caption as stored in long-term memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord<T> {
    pub clip_id: u64,
    token_embeddings: Matrix<T>,
    pooled: Vector<T>,
    pub text: Option<String>,
}

impl<T: Scalar> CaptionRecord<T> {
    pub fn new(clip_id: u64, token_embeddings: Matrix<T>, text: Option<String>) -> Result<Self> {
        let pooled = pooled_of(&token_embeddings)?;
        Ok(Self { clip_id, token_embeddings, pooled, text })
    }

    pub fn token_count(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn token_embeddings(&self) -> &Matrix<T> {
        &self.token_embeddings
    }

    pub fn pooled(&self) -> &Vector<T> {
        &self.pooled
    }
}

/// Token embeddings of a question.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding<T> {
    token_embeddings: Matrix<T>,
    pooled: Vector<T>,
    pub text: Option<String>,
}

impl<T: Scalar> QueryEmbedding<T> {
    pub fn new(token_embeddings: Matrix<T>, text: Option<String>) -> Result<Self> {
        let pooled = pooled_of(&token_embeddings)?;
        Ok(Self { token_embeddings, pooled, text })
    }

    pub fn token_count(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn token_embeddings(&self) -> &Matrix<T> {
        &self.token_embeddings
    }

    pub fn pooled(&self) -> &Vector<T> {
        &self.pooled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    /// Cosine of mean-pooled embeddings.
    #[default]
    Pooled,
    /// Mean cosine over all token pairs.
    Pairwise,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::Pairwise => "pairwise",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "pairwise" => Ok(Self::Pairwise),
            other => Err(invalid_arg(format!("unknown similarity `{other}` (expected pooled or pairwise)"))),
        }
    }
}

fn token_similarity<T: Scalar>(
    mode: Similarity,
    a_tokens: &Matrix<T>,
    a_pooled: &[T],
    b_tokens: &Matrix<T>,
    b_pooled: &[T],
) -> Result<T> {
    match mode {
        Similarity::Pooled => cosine(a_pooled, b_pooled),
        Similarity::Pairwise => {
            let mut acc = T::zero();
            for a in a_tokens.row_iter() {
                for b in b_tokens.row_iter() {
                    acc += cosine(a, b)?;
                }
            }
            Ok(acc / T::from_usize(a_tokens.rows() * b_tokens.rows()).unwrap())
        }
    }
}

/// Query-caption relevance: cosine of the pooled embeddings.
pub fn caption_similarity<T: Scalar>(query: &QueryEmbedding<T>, caption: &CaptionRecord<T>) -> Result<T> {
    similarity(Similarity::Pooled, query, caption)
}

pub fn similarity<T: Scalar>(mode: Similarity, query: &QueryEmbedding<T>, caption: &CaptionRecord<T>) -> Result<T> {
    token_similarity(mode, &query.token_embeddings, &query.pooled, &caption.token_embeddings, &caption.pooled)
}

fn caption_pair_similarity<T: Scalar>(mode: Similarity, a: &CaptionRecord<T>, b: &CaptionRecord<T>) -> Result<T> {
    token_similarity(mode, &a.token_embeddings, &a.pooled, &b.token_embeddings, &b.pooled)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedClip<T> {
    pub clip_id: u64,
    /// Objective value at the time of the pick (plain relevance for the first pick).
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<T> {
    pub ranked: Vec<RankedClip<T>>,
    pub tokens_used: usize,
    pub budget: usize,
}

impl<T> RetrievalResult<T> {
    pub fn clip_ids(&self) -> Vec<u64> {
        self.ranked.iter().map(|r| r.clip_id).collect()
    }
}

/// Knobs for [`retrieve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalParams {
    pub lambda: f64,
    pub similarity: Similarity,
    /// Total token budget; `None` means unbounded.
    pub budget_tokens: Option<usize>,
    /// Tokens held back from the budget for the question itself.
    pub reserve_tokens: usize,
    /// Fixed number of captions; `None` fills the budget.
    pub max_k: Option<usize>,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self { lambda: 0.5, similarity: Similarity::Pooled, budget_tokens: None, reserve_tokens: 0, max_k: None }
    }
}

fn validate_store<T: Scalar, C: Borrow<CaptionRecord<T>>>(store: &[C]) -> Result<Vec<usize>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut seen = HashSet::with_capacity(store.len());
    for c in store {
        if !seen.insert(c.borrow().clip_id) {
            return Err(invalid_arg(format!("duplicate clip id {} in caption store", c.borrow().clip_id)));
        }
    }
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by_key(|&i| store[i].borrow().clip_id);
    Ok(order)
}

/// Greedy MMR over `store` under the given budget and count limits.
///
/// Admission stops at the first caption that would overflow `budget - reserve`.
pub fn retrieve<T: Scalar, C: Borrow<CaptionRecord<T>>>(
    query: &QueryEmbedding<T>,
    store: &[C],
    params: &RetrievalParams,
) -> Result<RetrievalResult<T>> {
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(invalid_arg(format!("lambda {} outside [0,1]", params.lambda)));
    }
    if params.budget_tokens == Some(0) {
        return Err(invalid_arg("retrieval budget must be positive"));
    }
    if let Some(b) = params.budget_tokens.filter(|&b| b < params.reserve_tokens) {
        return Err(invalid_arg(format!(
            "budget of {b} tokens cannot hold the {}-token question",
            params.reserve_tokens
        )));
    }
    let order = validate_store(store)?;
    let cap = params
        .budget_tokens
        .map(|b| b.saturating_sub(params.reserve_tokens))
        .unwrap_or(usize::MAX);
    let max_k = params.max_k.unwrap_or(usize::MAX).min(store.len());
    let lambda = T::lit(params.lambda);
    let one = T::one();

    // candidates in ascending clip id order so strict comparisons break ties toward smaller ids
    let mut candidates: Vec<(usize, T, T)> = Vec::with_capacity(order.len());
    for &i in &order {
        let rel = similarity(params.similarity, query, store[i].borrow())?;
        candidates.push((i, rel, T::neg_infinity()));
    }

    let mut ranked = Vec::new();
    let mut tokens_used = 0usize;
    while ranked.len() < max_k && !candidates.is_empty() {
        let first = ranked.is_empty();
        let objective = |&(_, rel, div): &(usize, T, T)| {
            if first {
                rel
            } else {
                lambda * rel - (one - lambda) * div
            }
        };
        let mut best = 0;
        let mut best_score = objective(&candidates[0]);
        for (pos, cand) in candidates.iter().enumerate().skip(1) {
            let s = objective(cand);
            if s > best_score {
                best = pos;
                best_score = s;
            }
        }
        let (picked, _, _) = candidates.remove(best);
        let record = store[picked].borrow();
        if tokens_used.saturating_add(record.token_count()) > cap {
            break;
        }
        tokens_used += record.token_count();
        ranked.push(RankedClip { clip_id: record.clip_id, score: best_score });
        for (i, _, div) in candidates.iter_mut() {
            let s = caption_pair_similarity(params.similarity, store[*i].borrow(), record)?;
            *div = div.max(s);
        }
    }
    let budget = params.budget_tokens.unwrap_or_else(|| store.iter().map(|c| c.borrow().token_count()).sum());
    Ok(RetrievalResult { ranked, tokens_used, budget })
}

/// Fixed-`k` MMR with pooled similarity and no token budget.
pub fn mmr_retrieve<T: Scalar, C: Borrow<CaptionRecord<T>>>(
    query: &QueryEmbedding<T>,
    store: &[C],
    k: usize,
    lambda: f64,
) -> Result<RetrievalResult<T>> {
    if k > store.len() && !store.is_empty() {
        return Err(invalid_arg(format!("k = {k} exceeds store size {}", store.len())));
    }
    retrieve(query, store, &RetrievalParams { lambda, max_k: Some(k), ..Default::default() })
}

/// MMR filling `budget_tokens`, holding back the query's own token count.
pub fn budgeted_retrieve<T: Scalar, C: Borrow<CaptionRecord<T>>>(
    query: &QueryEmbedding<T>,
    store: &[C],
    lambda: f64,
    budget_tokens: usize,
) -> Result<RetrievalResult<T>> {
    retrieve(
        query,
        store,
        &RetrievalParams {
            lambda,
            budget_tokens: Some(budget_tokens),
            reserve_tokens: query.token_count(),
            ..Default::default()
        },
    )
}

/// `k` distinct captions drawn uniformly at random.
pub fn baseline_retrieve_random<T: Scalar, C: Borrow<CaptionRecord<T>>>(
    store: &[C],
    k: usize,
    rng: &mut SplitMix64,
) -> Result<RetrievalResult<T>> {
    let order = validate_store(store)?;
    if k > store.len() {
        return Err(invalid_arg(format!("k = {k} exceeds store size {}", store.len())));
    }
    let mut tokens_used = 0;
    let ranked = rng
        .sample_distinct(store.len(), k)
        .into_iter()
        .map(|pos| {
            let rec = store[order[pos]].borrow();
            tokens_used += rec.token_count();
            RankedClip { clip_id: rec.clip_id, score: T::zero() }
        })
        .collect();
    Ok(RetrievalResult { ranked, tokens_used, budget: tokens_used })
}

/// Top-`k` clips by cosine between a query vector and pooled visual tokens.
/// Token accounting is left at zero; the caller fetches captions for the returned ids.
pub fn baseline_retrieve_visual<T: Scalar>(
    query_visual: &[T],
    visual_index: &BTreeMap<u64, Vector<T>>,
    k: usize,
) -> Result<RetrievalResult<T>> {
    if visual_index.is_empty() {
        return Err(Error::EmptyStore);
    }
    if k > visual_index.len() {
        return Err(invalid_arg(format!("k = {k} exceeds index size {}", visual_index.len())));
    }
    let ids: Vec<u64> = visual_index.keys().copied().collect();
    let sims = visual_index.values().map(|v| cosine(query_visual, v)).collect::<Result<Vec<T>>>()?;
    let ranked = argsort_desc(&sims)
        .into_iter()
        .take(k)
        .map(|i| RankedClip { clip_id: ids[i], score: sims[i] })
        .collect();
    Ok(RetrievalResult { ranked, tokens_used: 0, budget: 0 })
}
