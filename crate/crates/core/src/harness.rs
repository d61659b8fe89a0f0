//! Synthetic tasks, baselines, and experiment sweeps.
//!
//! The sweeps reproduce the engine's qualitative claims at desk scale:
//! constant block-wise peak memory as input grows, the budget/latency
//! trade-off, the cache-compression-vs-input-reduction retention gap, and
//! block-size alignment effects. Each sweep checks its own claims and
//! returns [`RunReport`] rows for the CLI to serialize.
//!
//! The needle-in-haystack construction is self-validating: after building an
//! instance it recomputes the layer-0 query/key states and verifies that
//! every needle key strictly out-scores every unprotected haystack key for
//! every prompt query. Softmax is monotone per query row, so that dominance
//! guarantees the needle survives every eviction round — retention claims
//! then follow from the construction rather than from a statistical argument.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::SegmentTag;
use crate::engine::{
    prefill_blockwise, prefill_bulk, prefill_hybrid, EngineOptions, PrefillResult,
};
use crate::error::{Error, Result};
use crate::eviction::{plan_budgets, BudgetMode, EvictionPolicy};
use crate::layout::{build_layout, kv_memory_bytes, Alignment, PromptPosition, TokenLayout};
use crate::model::{decode_step_probe, init_model, layer0_projections, ModelConfig, ModelState};
use crate::tensor::{invert, Matrix};

/// A retrieval task: a small "needle" tile hidden in visual filler whose
/// survival under eviction is the success metric.
#[derive(Debug, Clone)]
pub struct NeedleTask {
    pub layout: TokenLayout,
    /// `structure_id` of the segment holding the needle.
    pub needle_segment: u32,
    /// Token positions of the needle, all inside the needle segment.
    pub needle_positions: Vec<usize>,
    /// Seed the instance was generated from.
    pub seed: u64,
    /// Alignment strength: how strongly prompt queries project onto the
    /// needle key direction. Zero means the prompt is uninformative.
    pub kappa: f32,
}

/// One experiment row. Field order here is the CSV column order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Compact echo of the generating configuration, sufficient to re-run.
    pub config: String,
    pub global_peak_bytes: u64,
    pub avg_block_peak_bytes: f64,
    /// Measured wall-clock seconds. Machine-dependent: serialized as zero
    /// unless wall-clock output is explicitly requested.
    pub ttft_wall_s: f64,
    pub ttft_flops: u64,
    pub needle_retention: Option<f64>,
    pub decode_attention_mass_on_needle: Option<f64>,
    pub policy: String,
    pub budget: usize,
    pub block_size: usize,
    pub mode: String,
}

impl RunReport {
    /// Builds a row from a prefill result; retention metrics start unset.
    pub fn from_result(
        result: &PrefillResult,
        config: String,
        policy: &str,
        budget: usize,
        block_size: usize,
        mode: &str,
    ) -> Result<Self> {
        Ok(Self {
            config,
            global_peak_bytes: result.trace.global_peak()?,
            avg_block_peak_bytes: result.trace.avg_block_peak()?,
            ttft_wall_s: result.ttft_wall_s,
            ttft_flops: result.ttft_flops,
            needle_retention: None,
            decode_attention_mass_on_needle: None,
            policy: policy.to_string(),
            budget,
            block_size,
            mode: mode.to_string(),
        })
    }
}

/// Deterministic standard-normal embeddings, `n x d`.
pub fn random_embeddings(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::new(n, d, data).expect("length matches by construction")
}

/// Model used by the memory/latency sweeps: two layers keep per-layer budget
/// handling honest while staying fast at multi-thousand-token inputs.
pub fn sweep_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_head: 8,
        rope_base: 10000.0,
        seed,
        mlp_ratio: 2.0,
    }
}

/// Model used by needle tasks. Single layer so the construction can target
/// layer-0 projections exactly; the huge rotary base makes the last rotary
/// pair of each head almost position-independent, which is where the needle
/// direction lives.
pub fn needle_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 32,
        d_head: 16,
        rope_base: 1e8,
        seed,
        mlp_ratio: 2.0,
    }
}

/// Builds a needle-in-haystack instance for `model`'s first layer.
///
/// Embeddings are constructed through the inverse projection matrices so
/// that in key space:
/// - haystack tokens have exactly zero component in each head's last rotary
///   pair (rotary encoding maps each pair to itself, so this stays exactly
///   zero at every position),
/// - needle tokens point along that last-pair direction `u`,
/// - prompt tokens produce queries `kappa * u + noise`, so every prompt query
///   gives needle keys a positive logit and haystack keys a near-zero one.
///
/// With `kappa > 0` the instance is then verified: every needle key must
/// strictly out-score every haystack key under every prompt query. A failed
/// check is a contract violation, not a silent weaker instance.
pub fn gen_needle_haystack(
    model: &ModelState,
    layout: &TokenLayout,
    needle_segment: u32,
    kappa: f32,
    seed: u64,
) -> Result<(Matrix, NeedleTask)> {
    let cfg = &model.config;
    if kappa < 0.0 {
        return Err(Error::InvalidArgument("kappa must be >= 0".into()));
    }
    let segment = layout
        .segments
        .iter()
        .find(|s| s.is_visual() && s.structure_id == Some(needle_segment))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no visual segment with structure_id {needle_segment} in layout"
            ))
        })?;
    let needle_positions: Vec<usize> = (segment.start..segment.end()).collect();

    let layer = &model.layers[0];
    let wq_inv = invert(&layer.wq)?;
    let wk_inv = invert(&layer.wk)?;
    let d = cfg.d_model;
    let dh = cfg.d_head;

    // needle direction: first slot of each head's last rotary pair
    let mut u = Matrix::zeros(1, d);
    for h in 0..cfg.heads {
        u.set(0, h * dh + dh - 2, 1.0);
    }
    let u_k_pre = u.matmul(&wk_inv)?; // embedding whose key is u

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(layout.total_len);
    for pos in 0..layout.total_len {
        let seg = layout.segment_at(pos);
        let row = if seg.is_visual() && seg.structure_id == Some(needle_segment) {
            // tiny per-token scaling keeps needle keys distinct without
            // leaving the needle direction
            let s = 1.0 + 0.01 * (pos - seg.start) as f32;
            u_k_pre.row(0).iter().map(|v| v * s).collect()
        } else if seg.is_visual() {
            // haystack: random key target with the last rotary pair zeroed,
            // mapped back to embedding space
            let mut y = Matrix::zeros(1, d);
            for c in 0..d {
                y.set(0, c, StandardNormal.sample(&mut rng));
            }
            for h in 0..cfg.heads {
                y.set(0, h * dh + dh - 2, 0.0);
                y.set(0, h * dh + dh - 1, 0.0);
            }
            y.matmul(&wk_inv)?.row(0).to_vec()
        } else if kappa == 0.0 {
            // uninformative prompt
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        } else {
            // query-space target kappa * u plus a unit-norm random direction,
            // mapped back through the query projection; kappa is the
            // signal-to-noise ratio of the resulting query against u
            let mut t_q = Matrix::zeros(1, d);
            for c in 0..d {
                t_q.set(0, c, StandardNormal.sample(&mut rng));
            }
            let norm: f32 = t_q.row(0).iter().map(|v| v * v).sum::<f32>().sqrt();
            for (c, &uv) in u.row(0).iter().enumerate() {
                let noisy = t_q.get(0, c) / norm + kappa * uv;
                t_q.set(0, c, noisy);
            }
            t_q.matmul(&wq_inv)?.row(0).to_vec()
        };
        rows.push(row);
    }
    let embeddings = Matrix::from_rows(&rows)?;

    if kappa > 0.0 {
        verify_needle_dominance(model, layout, &embeddings, &needle_positions)?;
    }

    Ok((
        embeddings,
        NeedleTask {
            layout: layout.clone(),
            needle_segment,
            needle_positions,
            seed,
            kappa,
        },
    ))
}

/// The premise behind every retention claim: for each head and each prompt
/// query, the smallest needle logit strictly exceeds the largest haystack
/// logit. Softmax per query row is monotone in logits, and a mean of
/// row-wise-dominating attention weights still dominates, so this implies
/// the needle ranks above all haystack entries in every eviction round.
fn verify_needle_dominance(
    model: &ModelState,
    layout: &TokenLayout,
    embeddings: &Matrix,
    needle_positions: &[usize],
) -> Result<()> {
    let cfg = &model.config;
    let positions: Vec<usize> = (0..layout.total_len).collect();
    let (q, k) = layer0_projections(model, embeddings, &positions)?;
    let (prompt_start, prompt_len) = layout.prompt_span;
    let needle: Vec<bool> = {
        let mut mask = vec![false; layout.total_len];
        for &p in needle_positions {
            mask[p] = true;
        }
        mask
    };
    for head in 0..cfg.heads {
        let lo = head * cfg.d_head;
        let hi = lo + cfg.d_head;
        for qi in prompt_start..prompt_start + prompt_len {
            let qrow = &q.row(qi)[lo..hi];
            let mut needle_min = f32::INFINITY;
            let mut hay_max = f32::NEG_INFINITY;
            for pos in 0..layout.total_len {
                if layout.in_prompt(pos) {
                    continue;
                }
                let logit: f32 = qrow.iter().zip(&k.row(pos)[lo..hi]).map(|(a, b)| a * b).sum();
                if needle[pos] {
                    needle_min = needle_min.min(logit);
                } else {
                    hay_max = hay_max.max(logit);
                }
            }
            if needle_min <= hay_max {
                return Err(Error::ContractViolation(format!(
                    "needle construction premise failed: head {head}, prompt query {qi}: \
                     min needle logit {needle_min} <= max haystack logit {hay_max}"
                )));
            }
        }
    }
    Ok(())
}

/// Fraction of needle positions still cached, averaged over (layer, head).
pub fn eval_retention(result: &PrefillResult, task: &NeedleTask) -> f64 {
    if task.needle_positions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0f64;
    let mut stores = 0usize;
    for layer in &result.retained_positions {
        for head in layer {
            let kept = head.iter().filter(|p| task.needle_positions.contains(p)).count();
            total += kept as f64 / task.needle_positions.len() as f64;
            stores += 1;
        }
    }
    total / stores as f64
}

/// Attention mass a decode probe places on the needle, averaged over layer-0
/// heads. The probe reuses the first prompt token's embedding so it asks the
/// same "question" the prompt did.
pub fn decode_attention_mass(
    model: &ModelState,
    result: &PrefillResult,
    embeddings: &Matrix,
    task: &NeedleTask,
) -> Result<f64> {
    let (prompt_start, _) = task.layout.prompt_span;
    let mut cache = result.cache.clone();
    let probe = decode_step_probe(
        model,
        embeddings.row(prompt_start),
        &mut cache,
        task.layout.total_len,
        SegmentTag::text(),
    )?;
    let weights = probe.attn_weights.expect("probe requested weights");
    let mut mass = 0.0f64;
    let heads = model.config.heads;
    for head in 0..heads {
        let dist = &weights[0][head][0];
        let entries = cache.entries(0, head);
        for (e, &w) in entries.iter().zip(dist) {
            if task.needle_positions.contains(&e.position) {
                mass += w as f64;
            }
        }
    }
    Ok(mass / heads as f64)
}

/// Per-layer mean attention entropy from one bulk pilot pass, used as the
/// layer statistics behind dynamic budget planning.
pub fn pilot_layer_entropy(
    model: &ModelState,
    layout: &TokenLayout,
    embeddings: &Matrix,
) -> Result<Vec<f64>> {
    let mut cache = model.new_cache();
    let tags: Vec<SegmentTag> = (0..layout.total_len)
        .map(|pos| {
            let seg = layout.segment_at(pos);
            SegmentTag { kind: seg.kind, structure_id: seg.structure_id }
        })
        .collect();
    let fwd = crate::model::forward_prefill_block(
        model,
        embeddings,
        &mut cache,
        0,
        &tags,
        &vec![false; layout.total_len],
        false,
    )?;
    Ok(fwd.attn_entropy)
}

/// Input after strided vision-token subsampling.
#[derive(Debug, Clone)]
pub struct ReducedInput {
    pub layout: TokenLayout,
    pub embeddings: Matrix,
    /// Original token positions of the surviving tokens, in order.
    pub kept_positions: Vec<usize>,
    /// The stride used (1 = identity).
    pub stride: usize,
}

/// The input-reduction baseline: keep every k-th vision token per tile/frame
/// (prompt untouched) so the full cache of a bulk pass fits the same budget
/// the compression policies get.
pub fn baseline_input_reduction(
    layout: &TokenLayout,
    embeddings: &Matrix,
    target_tokens: usize,
) -> Result<ReducedInput> {
    let vision_total = layout.vision_len();
    if target_tokens > vision_total {
        return Err(Error::InvalidArgument(format!(
            "reduction target {target_tokens} exceeds vision token count {vision_total}"
        )));
    }
    if embeddings.rows() != layout.total_len {
        return Err(Error::InvalidArgument("embeddings do not match layout".into()));
    }
    let segments_visual = layout.segments.iter().filter(|s| s.is_visual()).count();
    if target_tokens < segments_visual {
        return Err(Error::InvalidArgument(format!(
            "reduction target {target_tokens} is below one token per tile/frame \
             ({segments_visual} visual segments)"
        )));
    }
    let stride = vision_total.div_ceil(target_tokens);

    let mut kept_positions = Vec::new();
    let mut prompt_len = 0usize;
    let mut prompt_position = PromptPosition::First;
    let mut tiles = 0usize;
    let mut tokens_per_tile = 0usize;
    let mut frames = 0usize;
    let mut tokens_per_frame = 0usize;
    for (idx, seg) in layout.segments.iter().enumerate() {
        if seg.is_visual() {
            let kept = seg.len.div_ceil(stride);
            match seg.kind {
                crate::layout::SegmentKind::Tile => {
                    tiles += 1;
                    tokens_per_tile = kept;
                }
                crate::layout::SegmentKind::Frame => {
                    frames += 1;
                    tokens_per_frame = kept;
                }
                crate::layout::SegmentKind::Text => unreachable!(),
            }
            for offset in (0..seg.len).step_by(stride) {
                kept_positions.push(seg.start + offset);
            }
        } else {
            prompt_len = seg.len;
            prompt_position =
                if idx == 0 { PromptPosition::First } else { PromptPosition::Last };
            kept_positions.extend(seg.start..seg.end());
        }
    }
    kept_positions.sort_unstable();
    let reduced_layout = build_layout(
        prompt_len,
        tiles,
        tokens_per_tile,
        frames,
        tokens_per_frame,
        prompt_position,
    )?;
    if reduced_layout.total_len != kept_positions.len() {
        return Err(Error::InvalidState(format!(
            "reduced layout length {} != kept token count {}",
            reduced_layout.total_len,
            kept_positions.len()
        )));
    }
    let rows: Vec<Vec<f32>> = kept_positions.iter().map(|&p| embeddings.row(p).to_vec()).collect();
    Ok(ReducedInput {
        layout: reduced_layout,
        embeddings: Matrix::from_rows(&rows)?,
        kept_positions,
        stride,
    })
}

const SWEEP_BLOCK: usize = 64;
const SWEEP_TOKENS_PER_TILE: usize = 76;

/// Peak-memory-vs-input-size sweep: for each tile count, run full-cache and
/// block-wise prefill. Checks that the block-wise global peak is exactly the
/// modeled bytes at `M + b` (input-size independent) while the full-cache
/// peak scales linearly with the tile count.
pub fn sweep_input_size(seed: u64, tile_counts: &[usize], m: usize) -> Result<Vec<RunReport>> {
    if tile_counts.is_empty() {
        return Err(Error::InvalidArgument("tile_counts must be non-empty".into()));
    }
    let b = SWEEP_BLOCK;
    let cfg = sweep_model_config(seed);
    let model = init_model(&cfg)?;
    let opts = EngineOptions::default();
    let plan = plan_budgets(BudgetMode::Static, cfg.layers, m, None, 0)?;
    let modeled = |entries: usize| {
        kv_memory_bytes(cfg.layers, cfg.heads, cfg.d_head, opts.precision_bytes, entries)
    };

    let mut reports = Vec::new();
    let mut bulk_peaks = Vec::new();
    for (i, &t) in tile_counts.iter().enumerate() {
        // prompt grows with the tile count so total length stays proportional
        let layout = build_layout(4 * t, t, SWEEP_TOKENS_PER_TILE, 0, 0, PromptPosition::First)?;
        let emb = random_embeddings(seed.wrapping_add(t as u64), layout.total_len, cfg.d_model);
        let echo = format!(
            "sweep=input seed={seed} tiles={t} n={} m={m} b={b} model=sweep",
            layout.total_len
        );

        let bulk = prefill_bulk(&model, &layout, &emb, &opts)?;
        bulk_peaks.push(bulk.trace.global_peak()?);
        reports.push(RunReport::from_result(
            &bulk,
            echo.clone(),
            "none",
            layout.total_len,
            layout.total_len,
            "bulk",
        )?);

        let block = prefill_blockwise(
            &model,
            &layout,
            &emb,
            EvictionPolicy::QueryAware,
            &plan,
            b,
            Alignment::None,
            &opts,
        )?;
        // below the eviction regime the peak is just the input itself;
        // beyond it the peak must sit exactly at budget + block
        let expected_block_peak = modeled((m + b).min(layout.total_len));
        let peak = block.trace.global_peak()?;
        if peak != expected_block_peak {
            return Err(Error::ContractViolation(format!(
                "block-wise peak {peak} at {t} tiles != modeled bytes {expected_block_peak} \
                 at budget + block"
            )));
        }
        reports.push(RunReport::from_result(&block, echo, "snapkv", m, b, "blockwise")?);

        // full-cache peak must scale linearly with the tile count
        let expected_bulk = bulk_peaks[0] * (t / tile_counts[0]) as u64;
        if t % tile_counts[0] == 0 && bulk_peaks[i] != expected_bulk {
            return Err(Error::ContractViolation(format!(
                "full-cache peak {} at {t} tiles is not {}x the {}-tile peak",
                bulk_peaks[i],
                t / tile_counts[0],
                tile_counts[0]
            )));
        }
    }
    Ok(reports)
}

/// Budget/latency sweep on a ~9.5k-token layout: hybrid prefill at each
/// budget. Checks that the modeled peak never decreases and the flop proxy
/// strictly decreases as the budget grows.
pub fn sweep_budget(seed: u64, budgets: &[usize]) -> Result<Vec<RunReport>> {
    if budgets.is_empty() {
        return Err(Error::InvalidArgument("budgets must be non-empty".into()));
    }
    let b = 256;
    let cfg = sweep_model_config(seed);
    let model = init_model(&cfg)?;
    // prompt tokens are evicted like any others here: tiny budgets must not
    // be forced to hold the whole prompt
    let opts = EngineOptions { protect_prompt: false, ..EngineOptions::default() };
    let layout = build_layout(256, 36, 256, 0, 0, PromptPosition::First)?;
    let emb = random_embeddings(seed.wrapping_add(1), layout.total_len, cfg.d_model);

    let mut reports = Vec::new();
    let mut prev: Option<(u64, u64)> = None;
    for &m in budgets {
        let plan = plan_budgets(BudgetMode::Static, cfg.layers, m, None, 0)?;
        let run = prefill_hybrid(
            &model,
            &layout,
            &emb,
            EvictionPolicy::QueryAware,
            &plan,
            b,
            Alignment::None,
            &opts,
        )?;
        let peak = run.trace.global_peak()?;
        let flops = run.ttft_flops;
        if let Some((p_peak, p_flops)) = prev {
            if peak < p_peak {
                return Err(Error::ContractViolation(format!(
                    "peak bytes decreased with budget: {p_peak} -> {peak} at budget {m}"
                )));
            }
            if flops >= p_flops {
                return Err(Error::ContractViolation(format!(
                    "flop proxy did not decrease with budget: {p_flops} -> {flops} at budget {m}"
                )));
            }
        }
        prev = Some((peak, flops));
        let echo =
            format!("sweep=budget seed={seed} n={} m={m} b={b} model=sweep", layout.total_len);
        reports.push(RunReport::from_result(&run, echo, "snapkv", m, b, "hybrid")?);
    }
    Ok(reports)
}

/// Block-size/alignment sweep on a needle task with one needle tile.
///
/// For every block size an unaligned run is reported; block sizes that can
/// hold a whole tile also get a structure-aligned run. Checks:
/// - aligned partitions never put a block boundary inside the needle tile,
/// - some unaligned block size smaller than the tile does split it,
/// - the unaligned average per-block peak never decreases with block size.
pub fn sweep_block_size(
    seed: u64,
    block_sizes: &[usize],
    tile_token_count: usize,
) -> Result<Vec<RunReport>> {
    if block_sizes.is_empty() {
        return Err(Error::InvalidArgument("block_sizes must be non-empty".into()));
    }
    let tiles = 20;
    let needle_segment = 10u32;
    let m = 4 * tile_token_count;
    let cfg = needle_model_config(seed);
    let model = init_model(&cfg)?;
    let layout = build_layout(20, tiles, tile_token_count, 0, 0, PromptPosition::First)?;
    let (emb, task) = gen_needle_haystack(&model, &layout, needle_segment, 64.0, seed)?;
    let needle_span = (task.needle_positions[0], *task.needle_positions.last().unwrap() + 1);
    let plan = plan_budgets(BudgetMode::Static, cfg.layers, m, None, 0)?;
    let opts = EngineOptions::default();

    let mut reports = Vec::new();
    let mut prev_unaligned_avg: Option<f64> = None;
    for &b in block_sizes {
        let mut variants = vec![Alignment::None];
        if b >= layout.max_segment_len() {
            variants.push(Alignment::Structure);
        }
        for align in variants {
            let blocks = crate::layout::partition_blocks(&layout, b, align)?;
            let splits_needle = blocks
                .iter()
                .any(|blk| blk.end > needle_span.0 && blk.end < needle_span.1);
            if align == Alignment::Structure && splits_needle {
                return Err(Error::ContractViolation(format!(
                    "aligned partition split the needle tile at block size {b}"
                )));
            }
            let run = prefill_blockwise(
                &model,
                &layout,
                &emb,
                EvictionPolicy::QueryAware,
                &plan,
                b,
                align,
                &opts,
            )?;
            if align == Alignment::None {
                let avg = run.trace.avg_block_peak()?;
                if let Some(p) = prev_unaligned_avg {
                    if avg < p {
                        return Err(Error::ContractViolation(format!(
                            "unaligned avg block peak decreased with block size: {p} -> {avg} \
                             at b = {b}"
                        )));
                    }
                }
                prev_unaligned_avg = Some(avg);
            }
            let mode = match align {
                Alignment::None => "blockwise",
                Alignment::Structure => "blockwise-aligned",
            };
            let echo = format!(
                "sweep=blocksize seed={seed} n={} m={m} b={b} tile={tile_token_count} \
                 align={} model=needle",
                layout.total_len,
                matches!(align, Alignment::Structure)
            );
            let mut report = RunReport::from_result(&run, echo, "snapkv", m, b, mode)?;
            report.needle_retention = Some(eval_retention(&run, &task));
            report.decode_attention_mass_on_needle =
                Some(decode_attention_mass(&model, &run, &emb, &task)?);
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Runs the same needle task under each eviction policy. Checks that the
/// query-aware policy retains the whole needle (guaranteed by the verified
/// construction) and is never beaten by the other policies.
pub fn compare_policies(seed: u64) -> Result<Vec<RunReport>> {
    let tile_token_count = 49;
    let b = 49;
    let m = 4 * tile_token_count;
    let cfg = needle_model_config(seed);
    let model = init_model(&cfg)?;
    let layout = build_layout(20, 20, tile_token_count, 0, 0, PromptPosition::First)?;
    let (emb, task) = gen_needle_haystack(&model, &layout, 10, 64.0, seed)?;
    let plan = plan_budgets(BudgetMode::Static, cfg.layers, m, None, 0)?;
    let opts = EngineOptions::default();

    let policies = [
        EvictionPolicy::QueryAware,
        EvictionPolicy::QueryAgnostic,
        EvictionPolicy::RandomBaseline { seed },
    ];
    let mut reports = Vec::new();
    let mut retentions = Vec::new();
    for policy in policies {
        let run = prefill_blockwise(
            &model,
            &layout,
            &emb,
            policy,
            &plan,
            b,
            Alignment::Structure,
            &opts,
        )?;
        let retention = eval_retention(&run, &task);
        retentions.push(retention);
        let echo = format!(
            "compare=policies seed={seed} n={} m={m} b={b} policy={} model=needle",
            layout.total_len,
            policy.label()
        );
        let mut report = RunReport::from_result(&run, echo, policy.label(), m, b, "blockwise")?;
        report.needle_retention = Some(retention);
        report.decode_attention_mass_on_needle =
            Some(decode_attention_mass(&model, &run, &emb, &task)?);
        reports.push(report);
    }
    if retentions[0] < 1.0 {
        return Err(Error::ContractViolation(format!(
            "query-aware retention {} < 1.0 on a verified top-score instance",
            retentions[0]
        )));
    }
    if retentions.iter().skip(1).any(|&r| r > retentions[0]) {
        return Err(Error::ContractViolation(
            "a baseline policy beat query-aware retention on the constructed task".into(),
        ));
    }
    Ok(reports)
}

/// Cache compression vs input reduction at the same budget.
///
/// Compression runs block-wise query-aware eviction on the full input;
/// reduction subsamples vision tokens down to the budget and runs a bulk
/// pass. On the verified needle instance compression must retain the whole
/// needle while reduction can keep at most one token in `stride`.
pub fn compare_reduction(seed: u64, budget: usize) -> Result<Vec<RunReport>> {
    let b = 256;
    let cfg = needle_model_config(seed);
    let model = init_model(&cfg)?;
    // 64 tiles x 64 tokens = 4096 vision tokens; budget 1024 -> stride 4
    let layout = build_layout(16, 64, 64, 0, 0, PromptPosition::First)?;
    let (emb, task) = gen_needle_haystack(&model, &layout, 32, 64.0, seed)?;
    let plan = plan_budgets(BudgetMode::Static, cfg.layers, budget, None, 0)?;
    let opts = EngineOptions::default();

    let compression = prefill_blockwise(
        &model,
        &layout,
        &emb,
        EvictionPolicy::QueryAware,
        &plan,
        b,
        Alignment::None,
        &opts,
    )?;
    let compression_retention = eval_retention(&compression, &task);
    if compression_retention < 1.0 {
        return Err(Error::ContractViolation(format!(
            "compression retention {compression_retention} < 1.0 on a verified instance"
        )));
    }

    let reduced = baseline_input_reduction(&layout, &emb, budget)?;
    let reduction_run = prefill_bulk(&model, &reduced.layout, &reduced.embeddings, &opts)?;
    let kept_needle = task
        .needle_positions
        .iter()
        .filter(|p| reduced.kept_positions.binary_search(p).is_ok())
        .count();
    let reduction_retention = kept_needle as f64 / task.needle_positions.len() as f64;
    let cap = (task.needle_positions.len() as f64 / reduced.stride as f64).ceil()
        / task.needle_positions.len() as f64;
    if reduction_retention > cap {
        return Err(Error::ContractViolation(format!(
            "strided reduction kept {reduction_retention} of the needle, above the 1/stride \
             cap {cap}"
        )));
    }
    if compression_retention - reduction_retention < 0.5 {
        return Err(Error::ContractViolation(format!(
            "compression-vs-reduction retention gap {} below 0.5",
            compression_retention - reduction_retention
        )));
    }

    let echo_base = format!(
        "compare=reduction seed={seed} n={} budget={budget} b={b} model=needle",
        layout.total_len
    );
    let mut comp_report = RunReport::from_result(
        &compression,
        format!("{echo_base} arm=compression"),
        "snapkv",
        budget,
        b,
        "compression",
    )?;
    comp_report.needle_retention = Some(compression_retention);
    comp_report.decode_attention_mass_on_needle =
        Some(decode_attention_mass(&model, &compression, &emb, &task)?);

    let mut red_report = RunReport::from_result(
        &reduction_run,
        format!("{echo_base} arm=reduction stride={}", reduced.stride),
        "none",
        budget,
        reduced.layout.total_len,
        "reduction",
    )?;
    red_report.needle_retention = Some(reduction_retention);

    Ok(vec![comp_report, red_report])
}
