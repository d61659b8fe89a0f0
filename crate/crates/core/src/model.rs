//! A small deterministic decoder-only transformer used to exercise the
//! prefill engine end to end.
//!
//! Weights come from a seeded pseudo-random stream, so two models built from
//! the same config are bitwise identical. Embeddings are supplied directly as
//! real vectors; there is no vocabulary, tokenizer, or sampling. Each forward
//! emits per-layer KV into a [`KvCache`] and reads attention back out of it,
//! which is exactly the mechanic block-wise prefill manipulates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::{KvCache, SegmentTag};
use crate::error::{Error, Result};
use crate::tensor::{apply_rope, softmax_in_place, Matrix};

const RMS_EPS: f32 = 1e-6;

/// Architecture and seeding parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub rope_base: f32,
    pub seed: u64,
    pub mlp_ratio: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_head == 0 {
            return Err(Error::InvalidArgument("model dims must be >= 1".into()));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must equal heads {} x d_head {}",
                self.d_model, self.heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::InvalidArgument("d_head must be even for rotary encoding".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidArgument("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        ((self.d_model as f32 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// One decoder layer's weights.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm_gain: Vec<f32>,
    pub mlp_norm_gain: Vec<f32>,
}

/// Immutable model state: config plus per-layer weights.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
}

/// Output of one block forward.
#[derive(Debug)]
pub struct BlockForward {
    /// Hidden states for the block, `b x d_model`.
    pub hidden: Matrix,
    /// Rotary-encoded query states per layer, `b x d_model` each; the engine
    /// slices these per head for proxy capture and block-local eviction.
    pub queries: Vec<Matrix>,
    /// Mean attention entropy per layer (over heads and query rows).
    pub attn_entropy: Vec<f64>,
    /// When requested, full attention distributions:
    /// `weights[layer][head][query_row]` over the cache entries visible to
    /// that row, in cache order.
    pub attn_weights: Option<Vec<Vec<Vec<Vec<f32>>>>>,
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (rows as f32).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::new(rows, cols, data).expect("length matches by construction")
}

/// Builds model weights from the config's seed. Deterministic: identical
/// configs yield bitwise-identical states.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let d_ff = config.d_ff();
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: sample_matrix(&mut rng, d, d),
            wk: sample_matrix(&mut rng, d, d),
            wv: sample_matrix(&mut rng, d, d),
            wo: sample_matrix(&mut rng, d, d),
            w_up: sample_matrix(&mut rng, d, d_ff),
            w_down: sample_matrix(&mut rng, d_ff, d),
            attn_norm_gain: vec![1.0; d],
            mlp_norm_gain: vec![1.0; d],
        })
        .collect();
    Ok(ModelState { config: *config, layers })
}

impl ModelState {
    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.layers, self.config.heads, self.config.d_head)
    }

    /// Order-sensitive checksum over all weight bits.
    pub fn weight_checksum(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            for m in [&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w_up, &layer.w_down] {
                for v in m.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

fn rms_norm(x: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Applies rotary encoding to each head's column slice independently.
fn rope_per_head(x: &Matrix, positions: &[usize], heads: usize, d_head: usize, base: f32) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for h in 0..heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let slice = x.col_slice(lo, hi);
        let rotated = apply_rope(&slice, positions, base).expect("even d_head checked at init");
        for i in 0..x.rows() {
            out.row_mut(i)[lo..hi].copy_from_slice(rotated.row(i));
        }
    }
    out
}

/// Runs one block through the model: per layer, computes the block's KV,
/// appends it to the cache, and attends block queries over the cached
/// entries plus the intra-block causal prefix.
///
/// `start_position` must be the next uncached position. `tags` and
/// `protected` annotate the appended entries (one per block token).
pub fn forward_prefill_block(
    model: &ModelState,
    block_embeddings: &Matrix,
    cache: &mut KvCache,
    start_position: usize,
    tags: &[SegmentTag],
    protected: &[bool],
    collect_weights: bool,
) -> Result<BlockForward> {
    let cfg = &model.config;
    let b = block_embeddings.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    if block_embeddings.cols() != cfg.d_model {
        return Err(Error::InvalidArgument(format!(
            "block embedding dim {} != d_model {}",
            block_embeddings.cols(),
            cfg.d_model
        )));
    }
    if tags.len() != b || protected.len() != b {
        return Err(Error::InvalidArgument("tags/protected length mismatch".into()));
    }
    let expected = cache.last_position(0).map_or(0, |p| p + 1);
    if start_position != expected {
        return Err(Error::InvalidArgument(format!(
            "start_position {start_position} does not continue cache (expected {expected})"
        )));
    }

    let positions: Vec<usize> = (start_position..start_position + b).collect();
    let mut x = block_embeddings.clone();
    let mut queries = Vec::with_capacity(cfg.layers);
    let mut attn_entropy = vec![0.0f64; cfg.layers];
    let mut attn_weights = collect_weights.then(Vec::new);
    let scale = 1.0 / (cfg.d_head as f32).sqrt();

    for (layer_idx, layer) in model.layers.iter().enumerate() {
        let xn = rms_norm(&x, &layer.attn_norm_gain);
        let q = rope_per_head(
            &xn.matmul(&layer.wq)?,
            &positions,
            cfg.heads,
            cfg.d_head,
            cfg.rope_base,
        );
        let k = rope_per_head(
            &xn.matmul(&layer.wk)?,
            &positions,
            cfg.heads,
            cfg.d_head,
            cfg.rope_base,
        );
        let v = xn.matmul(&layer.wv)?;
        cache.append_block(layer_idx, &k, &v, &positions, tags, protected)?;

        let mut attn_out = Matrix::zeros(b, cfg.d_model);
        let mut entropy_sum = 0.0f64;
        let mut layer_weights = collect_weights.then(Vec::new);
        for head in 0..cfg.heads {
            let lo = head * cfg.d_head;
            let hi = lo + cfg.d_head;
            let entries = cache.entries(layer_idx, head);
            let mut head_weights = collect_weights.then(Vec::new);
            for (i, &pos) in positions.iter().enumerate() {
                // entries are position-sorted, so visibility is a prefix
                let limit = entries.partition_point(|e| e.position <= pos);
                let qi = &q.row(i)[lo..hi];
                let mut logits: Vec<f32> = entries[..limit]
                    .iter()
                    .map(|e| {
                        qi.iter().zip(&e.key).map(|(a, b)| a * b).sum::<f32>() * scale
                    })
                    .collect();
                softmax_in_place(&mut logits);
                let o = &mut attn_out.row_mut(i)[lo..hi];
                for (e, &w) in entries[..limit].iter().zip(&logits) {
                    for (oc, &vc) in o.iter_mut().zip(&e.value) {
                        *oc += w * vc;
                    }
                }
                entropy_sum += logits
                    .iter()
                    .filter(|&&w| w > 0.0)
                    .map(|&w| -(w as f64) * (w as f64).ln())
                    .sum::<f64>();
                if let Some(hw) = head_weights.as_mut() {
                    hw.push(logits);
                }
            }
            if let (Some(lw), Some(hw)) = (layer_weights.as_mut(), head_weights) {
                lw.push(hw);
            }
        }
        attn_entropy[layer_idx] = entropy_sum / (cfg.heads * b) as f64;
        if let (Some(aw), Some(lw)) = (attn_weights.as_mut(), layer_weights) {
            aw.push(lw);
        }

        let attn_proj = attn_out.matmul(&layer.wo)?;
        for i in 0..b {
            for (xv, av) in x.row_mut(i).iter_mut().zip(attn_proj.row(i)) {
                *xv += av;
            }
        }

        let xm = rms_norm(&x, &layer.mlp_norm_gain);
        let mut up = xm.matmul(&layer.w_up)?;
        for i in 0..up.rows() {
            for val in up.row_mut(i) {
                *val = silu(*val);
            }
        }
        let down = up.matmul(&layer.w_down)?;
        for i in 0..b {
            for (xv, dv) in x.row_mut(i).iter_mut().zip(down.row(i)) {
                *xv += dv;
            }
        }
        queries.push(q);
    }

    Ok(BlockForward { hidden: x, queries, attn_entropy, attn_weights })
}

/// Rotary-encoded query and key states of the first layer only, with no
/// attention and no cache side effects.
///
/// These are exactly the states [`forward_prefill_block`] would produce for
/// layer 0, so a construction validated against them is validated against
/// what the cache will actually hold.
pub fn layer0_projections(
    model: &ModelState,
    embeddings: &Matrix,
    positions: &[usize],
) -> Result<(Matrix, Matrix)> {
    let cfg = &model.config;
    if embeddings.rows() != positions.len() {
        return Err(Error::InvalidArgument("layer0_projections: row/position mismatch".into()));
    }
    if embeddings.cols() != cfg.d_model {
        return Err(Error::InvalidArgument(format!(
            "layer0_projections: embedding dim {} != d_model {}",
            embeddings.cols(),
            cfg.d_model
        )));
    }
    let layer = &model.layers[0];
    let xn = rms_norm(embeddings, &layer.attn_norm_gain);
    let q = rope_per_head(&xn.matmul(&layer.wq)?, positions, cfg.heads, cfg.d_head, cfg.rope_base);
    let k = rope_per_head(&xn.matmul(&layer.wk)?, positions, cfg.heads, cfg.d_head, cfg.rope_base);
    Ok((q, k))
}

/// One-token forward attending to the full (possibly compressed) cache.
/// Appends its own KV like any block.
pub fn decode_step(
    model: &ModelState,
    embedding: &[f32],
    cache: &mut KvCache,
    position: usize,
    tag: SegmentTag,
) -> Result<BlockForward> {
    let emb = Matrix::new(1, embedding.len(), embedding.to_vec())?;
    forward_prefill_block(model, &emb, cache, position, &[tag], &[false], false)
}

/// Like [`decode_step`] but also returns the attention distributions the
/// token placed over the cache (used for needle attention-mass metrics).
pub fn decode_step_probe(
    model: &ModelState,
    embedding: &[f32],
    cache: &mut KvCache,
    position: usize,
    tag: SegmentTag,
) -> Result<BlockForward> {
    let emb = Matrix::new(1, embedding.len(), embedding.to_vec())?;
    forward_prefill_block(model, &emb, cache, position, &[tag], &[false], true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_head: 4,
            rope_base: 10000.0,
            seed,
            mlp_ratio: 2.0,
        }
    }

    fn rand_embeddings(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        Matrix::new(n, d, data).unwrap()
    }

    fn text_tags(n: usize) -> Vec<SegmentTag> {
        vec![SegmentTag::text(); n]
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_model(&small_config(42)).unwrap();
        let b = init_model(&small_config(42)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_model(&small_config(42)).unwrap();
        let b = init_model(&small_config(43)).unwrap();
        assert_ne!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn projection_shapes_follow_config() {
        let m = init_model(&small_config(1)).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!((m.layers[0].wk.rows(), m.layers[0].wk.cols()), (8, 8));
        assert_eq!((m.layers[0].w_up.rows(), m.layers[0].w_up.cols()), (8, 16));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config(1);
        cfg.d_model = 7;
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn single_token_block_on_empty_cache() {
        let model = init_model(&small_config(2)).unwrap();
        let emb = rand_embeddings(3, 1, 8);
        let mut cache = model.new_cache();
        let out =
            forward_prefill_block(&model, &emb, &mut cache, 0, &text_tags(1), &[false], false)
                .unwrap();
        assert!(out.hidden.is_finite());
        assert_eq!(cache.entry_count(0, 0), 1);
        // one-key attention: the attended value is the token's own value row
        let entries = cache.entries(0, 0);
        assert_eq!(entries[0].position, 0);
    }

    #[test]
    fn block_split_independence_without_eviction() {
        // 8 tokens split 4+4 vs 2+2+2+2 must produce identical caches
        let model = init_model(&small_config(5)).unwrap();
        let emb = rand_embeddings(6, 8, 8);

        let run = |splits: &[usize]| {
            let mut cache = model.new_cache();
            let mut hidden_rows: Vec<Vec<f32>> = Vec::new();
            let mut start = 0;
            for &s in splits {
                let mut rows = Vec::new();
                for i in start..start + s {
                    rows.push(emb.row(i).to_vec());
                }
                let block = Matrix::from_rows(&rows).unwrap();
                let out = forward_prefill_block(
                    &model,
                    &block,
                    &mut cache,
                    start,
                    &text_tags(s),
                    &vec![false; s],
                    false,
                )
                .unwrap();
                for i in 0..s {
                    hidden_rows.push(out.hidden.row(i).to_vec());
                }
                start += s;
            }
            (cache, hidden_rows)
        };

        let (c1, h1) = run(&[4, 4]);
        let (c2, h2) = run(&[2, 2, 2, 2]);
        let (c3, h3) = run(&[8]);
        assert_eq!(c1.fingerprint(), c2.fingerprint());
        assert_eq!(c1.fingerprint(), c3.fingerprint());
        for (a, b) in h1.iter().zip(&h2).chain(h1.iter().zip(&h3)) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn decode_matches_bulk_row() {
        let model = init_model(&small_config(6)).unwrap();
        let emb = rand_embeddings(7, 5, 8);

        // bulk over all 5 tokens
        let mut bulk_cache = model.new_cache();
        let bulk = forward_prefill_block(
            &model,
            &emb,
            &mut bulk_cache,
            0,
            &text_tags(5),
            &[false; 5],
            false,
        )
        .unwrap();

        // prefill 4 then decode token 4
        let prefix = Matrix::from_rows(&(0..4).map(|i| emb.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let mut cache = model.new_cache();
        forward_prefill_block(&model, &prefix, &mut cache, 0, &text_tags(4), &[false; 4], false)
            .unwrap();
        let step =
            decode_step(&model, emb.row(4), &mut cache, 4, SegmentTag::text()).unwrap();

        for c in 0..8 {
            let a = bulk.hidden.get(4, c);
            let b = step.hidden.get(0, c);
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn decode_ignores_evicted_entries() {
        let model = init_model(&small_config(7)).unwrap();
        let emb = rand_embeddings(8, 6, 8);
        let mut cache = model.new_cache();
        forward_prefill_block(&model, &emb, &mut cache, 0, &text_tags(6), &[false; 6], false)
            .unwrap();
        // evict entries 1 and 3 everywhere
        for layer in 0..2 {
            for head in 0..2 {
                cache.retain(layer, head, &[0, 2, 4, 5]).unwrap();
            }
        }
        let probe = rand_embeddings(9, 1, 8);
        let mut c1 = cache.clone();
        let out1 = decode_step(&model, probe.row(0), &mut c1, 6, SegmentTag::text()).unwrap();
        let mut c2 = cache.clone();
        let out2 = decode_step(&model, probe.row(0), &mut c2, 6, SegmentTag::text()).unwrap();
        assert_eq!(out1.hidden.data(), out2.hidden.data());
        assert_eq!(c1.entry_count(0, 0), 5);
    }

    #[test]
    fn two_decodes_match_one_two_token_block() {
        let model = init_model(&small_config(8)).unwrap();
        let emb = rand_embeddings(10, 6, 8);
        let prefix = Matrix::from_rows(&(0..4).map(|i| emb.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let tail = Matrix::from_rows(&(4..6).map(|i| emb.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();

        let mut c_block = model.new_cache();
        forward_prefill_block(&model, &prefix, &mut c_block, 0, &text_tags(4), &[false; 4], false)
            .unwrap();
        let block_out = forward_prefill_block(
            &model,
            &tail,
            &mut c_block,
            4,
            &text_tags(2),
            &[false; 2],
            false,
        )
        .unwrap();

        let mut c_steps = model.new_cache();
        forward_prefill_block(&model, &prefix, &mut c_steps, 0, &text_tags(4), &[false; 4], false)
            .unwrap();
        let s1 = decode_step(&model, emb.row(4), &mut c_steps, 4, SegmentTag::text()).unwrap();
        let s2 = decode_step(&model, emb.row(5), &mut c_steps, 5, SegmentTag::text()).unwrap();

        for c in 0..8 {
            let a0 = block_out.hidden.get(0, c);
            let a1 = block_out.hidden.get(1, c);
            assert!((a0 - s1.hidden.get(0, c)).abs() <= 1e-5 * a0.abs().max(1.0));
            assert!((a1 - s2.hidden.get(0, c)).abs() <= 1e-5 * a1.abs().max(1.0));
        }
        assert_eq!(c_block.fingerprint(), c_steps.fingerprint());
    }

    #[test]
    fn position_mismatch_rejected() {
        let model = init_model(&small_config(9)).unwrap();
        let emb = rand_embeddings(11, 2, 8);
        let mut cache = model.new_cache();
        forward_prefill_block(&model, &emb, &mut cache, 0, &text_tags(2), &[false; 2], false)
            .unwrap();
        let err = forward_prefill_block(
            &model,
            &emb,
            &mut cache,
            5,
            &text_tags(2),
            &[false; 2],
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn hidden_states_finite_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let cfg = small_config(100 + trial);
            let model = init_model(&cfg).unwrap();
            let n = rng.gen_range(1..12);
            let emb = rand_embeddings(200 + trial, n, 8);
            let mut cache = model.new_cache();
            let out = forward_prefill_block(
                &model,
                &emb,
                &mut cache,
                0,
                &text_tags(n),
                &vec![false; n],
                false,
            )
            .unwrap();
            assert!(out.hidden.is_finite());
            for q in &out.queries {
                assert!(q.is_finite());
            }
        }
    }

    #[test]
    fn layer0_projections_match_forward() {
        let model = init_model(&small_config(20)).unwrap();
        let emb = rand_embeddings(21, 6, 8);
        let positions: Vec<usize> = (0..6).collect();
        let (q, k) = layer0_projections(&model, &emb, &positions).unwrap();

        let mut cache = model.new_cache();
        let fwd =
            forward_prefill_block(&model, &emb, &mut cache, 0, &text_tags(6), &[false; 6], false)
                .unwrap();
        assert_eq!(q.data(), fwd.queries[0].data());
        for head in 0..2 {
            for (i, e) in cache.entries(0, head).iter().enumerate() {
                assert_eq!(e.key.as_slice(), &k.row(i)[head * 4..(head + 1) * 4]);
            }
        }
    }

    #[test]
    fn proxy_queries_match_bulk_forward() {
        // per-layer query states from split blocks equal those from one pass
        let model = init_model(&small_config(12)).unwrap();
        let emb = rand_embeddings(13, 6, 8);
        let mut bulk_cache = model.new_cache();
        let bulk = forward_prefill_block(
            &model,
            &emb,
            &mut bulk_cache,
            0,
            &text_tags(6),
            &[false; 6],
            false,
        )
        .unwrap();

        let mut cache = model.new_cache();
        let first = Matrix::from_rows(&(0..3).map(|i| emb.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let split1 = forward_prefill_block(
            &model,
            &first,
            &mut cache,
            0,
            &text_tags(3),
            &[false; 3],
            false,
        )
        .unwrap();
        for layer in 0..2 {
            for i in 0..3 {
                for c in 0..8 {
                    let a = bulk.queries[layer].get(i, c);
                    let b = split1.queries[layer].get(i, c);
                    assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
                }
            }
        }
    }
}
