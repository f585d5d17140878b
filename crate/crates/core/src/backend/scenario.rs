//! Synthetic streams with planted events, for measuring selection and retrieval recall.
//!
//! Background tokens are isotropic Gaussian noise scaled by `noise_scale`. An event
//! overwrites a set of token positions in one clip with `concept + noise`, where the
//! concept is a unit vector. Every clip is generated from its own derived stream, so
//! clips can be produced lazily and in any order.

use std::fmt::Write as _;

use crate::error::{invalid_arg, Result};
use crate::numerics::{dot, Matrix, SplitMix64, Vector};
use crate::selection::ClipTokens;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEvent {
    pub clip_id: u64,
    /// Local token indices, strictly increasing.
    pub token_indices: Vec<usize>,
    pub concept: Vector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub n_clips: usize,
    pub t_frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub events: Vec<PlantedEvent>,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Planted events, for scoring a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub events: Vec<PlantedEvent>,
}

impl GroundTruth {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total_event_tokens(&self) -> usize {
        self.events.iter().map(|e| e.token_indices.len()).sum()
    }

    /// One line per event: `clip=<id> indices=<i,j,..> concept=<x,y,..>`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# planted events\n");
        for e in &self.events {
            let idx: Vec<String> = e.token_indices.iter().map(usize::to_string).collect();
            let concept: Vec<String> = e.concept.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "clip={} indices={} concept={}", e.clip_id, idx.join(","), concept.join(","));
        }
        out
    }
}

impl ScenarioSpec {
    /// Scenario with `n_events` events on distinct clips, each covering `event_tokens`
    /// random positions, all drawn from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_random_events(
        n_clips: usize,
        t_frames: usize,
        tokens_per_frame: usize,
        dim: usize,
        n_events: usize,
        event_tokens: usize,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let clip_tokens = t_frames * tokens_per_frame;
        if n_events > n_clips {
            return Err(invalid_arg(format!("{n_events} events need as many clips, have {n_clips}")));
        }
        if n_events > 0 && (event_tokens == 0 || event_tokens > clip_tokens) {
            return Err(invalid_arg(format!("cannot plant {event_tokens} tokens in a {clip_tokens}-token clip")));
        }
        if dim == 0 {
            return Err(invalid_arg("scenario dim must be positive"));
        }
        let mut rng = SplitMix64::derive(seed, 0x6576_656e_7473);
        let mut clips = rng.sample_distinct(n_clips, n_events);
        clips.sort_unstable();
        let events = clips
            .into_iter()
            .map(|clip| {
                let mut token_indices = rng.sample_distinct(clip_tokens, event_tokens);
                token_indices.sort_unstable();
                let concept = Vector::new(rng.unit_vector(dim)).expect("finite");
                PlantedEvent { clip_id: clip as u64, token_indices, concept }
            })
            .collect();
        let spec = Self { n_clips, t_frames, tokens_per_frame, dim, events, noise_scale, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn clip_tokens(&self) -> usize {
        self.t_frames * self.tokens_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.t_frames == 0 || self.tokens_per_frame == 0 || self.dim == 0 {
            return Err(invalid_arg("scenario counts must be positive"));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(invalid_arg(format!("noise_scale {} must be finite and >= 0", self.noise_scale)));
        }
        let n = self.clip_tokens();
        for (k, e) in self.events.iter().enumerate() {
            if e.clip_id as usize >= self.n_clips {
                return Err(invalid_arg(format!("event {k} on clip {} of {}", e.clip_id, self.n_clips)));
            }
            if e.token_indices.is_empty() || e.token_indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid_arg(format!("event {k} indices must be non-empty and increasing")));
            }
            if *e.token_indices.last().unwrap() >= n {
                return Err(invalid_arg(format!("event {k} index outside {n}-token clip")));
            }
            if e.concept.len() != self.dim || (dot(&e.concept, &e.concept) - 1.0).abs() > 1e-9 {
                return Err(invalid_arg(format!("event {k} concept must be a unit vector of dim {}", self.dim)));
            }
        }
        for (a, ea) in self.events.iter().enumerate() {
            for eb in &self.events[a + 1..] {
                if ea.clip_id == eb.clip_id && ea.token_indices.iter().any(|i| eb.token_indices.binary_search(i).is_ok()) {
                    return Err(invalid_arg(format!("events on clip {} overlap", ea.clip_id)));
                }
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth { events: self.events.clone() }
    }

    /// Tokens of clip `clip_id`, reproducible on their own.
    pub fn clip(&self, clip_id: u64) -> Result<ClipTokens<f64>> {
        if clip_id as usize >= self.n_clips {
            return Err(invalid_arg(format!("clip {clip_id} outside scenario of {} clips", self.n_clips)));
        }
        let n = self.clip_tokens();
        let d = self.dim;
        let mut rng = SplitMix64::derive(self.seed, clip_id);
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.next_gaussian() * self.noise_scale).collect();
        for e in self.events.iter().filter(|e| e.clip_id == clip_id) {
            for &i in &e.token_indices {
                for (x, &c) in data[i * d..(i + 1) * d].iter_mut().zip(e.concept.iter()) {
                    *x = c + rng.next_gaussian() * self.noise_scale;
                }
            }
        }
        ClipTokens::new(clip_id, self.t_frames, self.tokens_per_frame, clip_id as usize * n, Matrix::new(n, d, data)?)
    }

    pub fn clips(&self) -> impl Iterator<Item = Result<ClipTokens<f64>>> + '_ {
        (0..self.n_clips as u64).map(move |id| self.clip(id))
    }
}

/// Materializes every clip together with the ground truth.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(Vec<ClipTokens<f64>>, GroundTruth)> {
    spec.validate()?;
    let clips = spec.clips().collect::<Result<Vec<_>>>()?;
    Ok((clips, spec.ground_truth()))
}
