use proptest::prelude::*;

use streamsel_core::backend::{read_trace_bytes, write_trace_bytes, BackendOutput, MockBackend, MockModelConfig};
use streamsel_core::config::{parse_scenario, scenario_to_text, ScenarioParams};
use streamsel_core::memory::{assemble_context, ContextBudget, ShortTermMemory};
use streamsel_core::numerics::{Matrix, SplitMix64};
use streamsel_core::pipeline::{PipelineConfig, StreamingPipeline};
use streamsel_core::retrieval::{retrieve, CaptionRecord, QueryEmbedding, RetrievalParams, Similarity};
use streamsel_core::scoring::{compute_token_scores, AggregationMode, AttentionTrace, ScoreVector, TokenLayout};
use streamsel_core::selection::{kmeans_select, mean_pool, select_attention_topk, select_uniform, ClipTokens, SelectedTokenSet, Selector};
use streamsel_core::ClipBackend;

fn clip_from(tokens: usize, dim: usize, seed: u64) -> ClipTokens<f64> {
    let mut rng = SplitMix64::new(seed);
    let data = (0..tokens * dim).map(|_| rng.next_gaussian()).collect();
    ClipTokens::new(0, 1, tokens, 0, Matrix::new(tokens, dim, data).unwrap()).unwrap()
}

fn trace_strategy() -> impl Strategy<Value = (AttentionTrace<f64>, Vec<usize>)> {
    (1usize..4, 1usize..4, 1usize..6, 1usize..40, any::<u64>()).prop_map(|(l, h, nc, nv, seed)| {
        let mut rng = SplitMix64::new(seed);
        let blocks = (0..l * h)
            .map(|_| {
                let mut data = Vec::with_capacity(nc * nv);
                for _ in 0..nc {
                    let raw: Vec<f64> = (0..nv).map(|_| rng.next_f64()).collect();
                    let total = raw.iter().sum::<f64>() + rng.next_f64();
                    data.extend(raw.iter().map(|v| v / total));
                }
                Matrix::new(nc, nv, data).unwrap()
            })
            .collect();
        let trace = AttentionTrace::new(seed, l, h, (0..l).collect(), TokenLayout::new(3, nv, 1, nc), blocks).unwrap();
        let k = 1 + rng.next_below(l);
        let mut subset = rng.sample_distinct(l, k);
        subset.sort_unstable();
        (trace, subset)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scores_are_bounded((trace, subset) in trace_strategy(), max in any::<bool>()) {
        let mode = if max { AggregationMode::MaxOverHeads } else { AggregationMode::MeanOverHeads };
        let s = compute_token_scores(&trace, &subset, mode).unwrap();
        prop_assert_eq!(s.len(), trace.layout().n_visual);
        prop_assert!(s.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn max_dominates_mean((trace, subset) in trace_strategy()) {
        let mean = compute_token_scores(&trace, &subset, AggregationMode::MeanOverHeads).unwrap();
        let max = compute_token_scores(&trace, &subset, AggregationMode::MaxOverHeads).unwrap();
        for (a, b) in mean.scores.iter().zip(max.scores.iter()) {
            prop_assert!(*a <= *b + 1e-15);
        }
    }

    #[test]
    fn topk_keeps_the_k_best_in_order(
        scores in prop::collection::vec(0u8..12, 1..300),
        k_frac in 0.0f64..1.0,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|v| f64::from(v) / 16.0).collect();
        let n = scores.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let clip = clip_from(n, 2, 0);
        let sel = select_attention_topk(&clip, &ScoreVector::new(0, scores.clone()).unwrap(), k).unwrap();
        let idx = sel.indices();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let kept_min = idx.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in 0..n {
            if idx.binary_search(&i).is_err() {
                prop_assert!(scores[i] <= kept_min);
                // an unselected tie with the weakest kept score must come after every kept tie
                if scores[i] == kept_min {
                    prop_assert!(idx.iter().filter(|&&j| scores[j] == kept_min).all(|&j| j < i));
                }
            }
        }
        for (row, &i) in sel.embeddings().row_iter().zip(idx) {
            prop_assert_eq!(row, clip.token(i));
        }
    }

    #[test]
    fn baselines_return_valid_index_sets(count in 1usize..400, n_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + ((count - 1) as f64 * n_frac) as usize;
        let clip = clip_from(count, 3, seed);
        for sel in [
            select_uniform(&clip, n).unwrap(),
            mean_pool(&clip, n).unwrap(),
            kmeans_select(&clip, n, &mut SplitMix64::new(seed)).unwrap(),
        ] {
            prop_assert_eq!(sel.n_select(), n);
            prop_assert!(sel.indices().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*sel.indices().last().unwrap() < count);
        }
        let pooled = mean_pool(&clip, n).unwrap();
        prop_assert_eq!(pooled.indices()[0], 0);
        let sizes: Vec<usize> = pooled.indices().windows(2).map(|w| w[1] - w[0]).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sizes.iter().all(|&s| s == count / n || s == count / n + 1));
    }

    #[test]
    fn fifo_keeps_the_newest(max_mem in 0usize..20, n in 0usize..200) {
        let mut mem = ShortTermMemory::new(max_mem);
        for id in 0..n as u64 {
            let set = SelectedTokenSet::new(id, vec![0], Matrix::new(1, 1, vec![0.0]).unwrap()).unwrap();
            let evicted = mem.push(set).unwrap();
            prop_assert!(mem.len() <= max_mem);
            if max_mem > 0 && (id as usize) < max_mem {
                prop_assert!(evicted.is_none());
            }
        }
        let ids: Vec<u64> = mem.entries().map(|s| s.clip_id).collect();
        let expected: Vec<u64> = (n.saturating_sub(max_mem) as u64..n as u64).collect();
        prop_assert_eq!(ids, expected);
    }

    #[test]
    fn retrieval_respects_limits(
        n in 1usize..25,
        budget in 2usize..200,
        lambda in 0.0f64..=1.0,
        k in prop::option::of(1usize..10),
        pairwise in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = SplitMix64::new(seed);
        let store: Vec<CaptionRecord<f64>> = (0..n as u64)
            .map(|id| {
                let rows: Vec<Vec<f64>> = (0..1 + rng.next_below(20)).map(|_| rng.unit_vector(5)).collect();
                CaptionRecord::new(id * 7 % 31, Matrix::from_rows(&rows).unwrap(), None).unwrap()
            })
            .collect();
        let q = QueryEmbedding::new(Matrix::from_rows(&[rng.unit_vector(5), rng.unit_vector(5)]).unwrap(), None).unwrap();
        let params = RetrievalParams {
            lambda,
            similarity: if pairwise { Similarity::Pairwise } else { Similarity::Pooled },
            budget_tokens: Some(budget),
            reserve_tokens: 2,
            max_k: k,
        };
        let r = retrieve(&q, &store, &params).unwrap();
        prop_assert!(r.tokens_used + 2 <= budget);
        prop_assert!(r.ranked.len() <= k.unwrap_or(usize::MAX));
        let mut ids = r.clip_ids();
        let used: usize = ids.iter().map(|id| store.iter().find(|c| c.clip_id == *id).unwrap().token_count()).sum();
        prop_assert_eq!(used, r.tokens_used);
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), r.ranked.len());
    }

    #[test]
    fn scenario_text_round_trips(n_clips in 1usize..5, n_events in 0usize..3, seed in any::<u64>()) {
        let params = ScenarioParams { n_clips: n_clips.max(n_events), t_frames: 2, tokens_per_frame: 6, dim: 4, n_events, event_tokens: 3, noise_scale: 0.2, seed };
        let spec = params.build().unwrap();
        prop_assert_eq!(parse_scenario(&scenario_to_text(&spec)).unwrap(), spec);
    }
}

fn small_model() -> MockBackend {
    MockBackend::new(MockModelConfig { dim: 4, n_layers: 4, n_heads: 2, head_dim: 2, caption_len: 3, seed: 1 }).unwrap()
}

fn small_config(max_mem: usize, selector: Selector) -> PipelineConfig {
    PipelineConfig {
        clip_size: 4,
        max_mem,
        tokens_per_frame: 3,
        n_select: 2,
        window: max_mem * 2 + 12,
        layer_subset: vec![1, 3],
        selector,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn stream_conservation(frames in 0usize..40, max_mem in 0usize..4, sel in 0usize..4, seed in any::<u64>()) {
        let selector = Selector::ALL[sel];
        let mut p = StreamingPipeline::new(small_config(max_mem, selector), small_model()).unwrap();
        let mut rng = SplitMix64::new(seed);
        for f in 0..frames {
            let frame = Matrix::new(3, 4, (0..12).map(|_| rng.next_gaussian()).collect()).unwrap();
            let out = p.process_frame(frame).unwrap();
            prop_assert_eq!(out.is_some(), (f + 1) % 4 == 0);
            prop_assert!(p.buffered_frames() < 4);
            prop_assert!(p.memory().len() <= max_mem);
            if let Some(o) = out {
                prop_assert!(o.n_memory + o.n_visual <= p.config().window);
            }
        }
        prop_assert_eq!(p.clips_processed(), frames / 4);
        prop_assert_eq!(p.buffered_frames(), frames % 4);
        prop_assert_eq!(p.snapshot().len(), frames / 4);
    }

    #[test]
    fn trace_round_trip_is_bit_exact(clips in 1usize..5, tokens in 1usize..30, seed in any::<u64>()) {
        let model = small_model();
        let mut rng = SplitMix64::new(seed);
        let mut memory = ShortTermMemory::new(2);
        let mut outputs: Vec<BackendOutput<f64>> = Vec::new();
        for id in 0..clips as u64 {
            let data = (0..tokens * 4).map(|_| rng.next_gaussian()).collect();
            let clip = ClipTokens::new(id, 1, tokens, 0, Matrix::new(tokens, 4, data).unwrap()).unwrap();
            let ctx = assemble_context(&memory, &clip, &ContextBudget::new(2 * tokens + tokens, 2 * tokens, tokens).unwrap()).unwrap();
            outputs.push(model.process_clip(&ctx, &[0, 2]).unwrap());
            memory.push(select_uniform(&clip, 1.max(tokens / 2).min(tokens)).unwrap()).unwrap();
        }
        let bytes = write_trace_bytes(&outputs).unwrap();
        let back = read_trace_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &outputs);
    }
}
