//! Eviction scoring and selection: which cache entries survive a budget cut.
//!
//! Two policies are provided. The query-aware policy attends proxy queries
//! over cached keys and keeps the entries with the highest mean attention
//! mass. The query-agnostic policy keeps the keys that deviate most from the
//! mean key direction, preserving representational diversity without any
//! query signal. A seeded random baseline exists so retention comparisons in
//! the harness are falsifiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which scoring rule decides survivors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Proxy-query attention importance; mean over proxy rows.
    QueryAware,
    /// Negative cosine similarity to the mean key (diversity).
    QueryAgnostic,
    /// Seeded random scores.
    RandomBaseline { seed: u64 },
}

impl EvictionPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            EvictionPolicy::QueryAware => "snapkv",
            EvictionPolicy::QueryAgnostic => "keydiff",
            EvictionPolicy::RandomBaseline { .. } => "random",
        }
    }
}

/// How per-layer budgets are allocated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    Static,
    Dynamic,
}

/// Per-layer retention budgets, in entries per (layer, head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetPlan {
    pub per_layer: Vec<usize>,
}

impl BudgetPlan {
    pub fn layer_budget(&self, layer: usize) -> usize {
        self.per_layer[layer]
    }

    pub fn min_budget(&self) -> usize {
        self.per_layer.iter().copied().min().unwrap_or(0)
    }
}

/// Query-aware importance per key: for each proxy query row the attention
/// distribution over all keys is computed, then averaged over the rows.
/// Scores are a probability vector (they sum to 1).
pub fn score_query_aware(proxy_q: &Matrix, keys: &Matrix, d_k: usize) -> Result<Vec<f64>> {
    if keys.rows() == 0 {
        return Err(Error::InvalidArgument("score_query_aware: empty key set".into()));
    }
    if proxy_q.rows() == 0 {
        return Err(Error::InvalidArgument("score_query_aware: no proxy queries".into()));
    }
    if proxy_q.cols() != keys.cols() {
        return Err(Error::InvalidArgument(format!(
            "score_query_aware: dim mismatch {} vs {}",
            proxy_q.cols(),
            keys.cols()
        )));
    }
    let n = keys.rows();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut scores = vec![0.0f64; n];
    let mut logits = vec![0.0f64; n];
    for qi in 0..proxy_q.rows() {
        let q = proxy_q.row(qi);
        let mut max = f64::NEG_INFINITY;
        for (j, logit) in logits.iter_mut().enumerate() {
            let dot: f64 = q
                .iter()
                .zip(keys.row(j))
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            *logit = dot * scale;
            max = max.max(*logit);
        }
        let mut sum = 0.0f64;
        for logit in logits.iter_mut() {
            *logit = (*logit - max).exp();
            sum += *logit;
        }
        for (score, logit) in scores.iter_mut().zip(&logits) {
            *score += logit / sum;
        }
    }
    let nq = proxy_q.rows() as f64;
    for s in scores.iter_mut() {
        *s /= nq;
    }
    Ok(scores)
}

/// Query-agnostic diversity score: negative cosine similarity to the mean
/// key, so larger score means "keep". O(n*d), no pairwise comparisons.
///
/// Zero-norm keys (or a zero-norm mean) get a neutral score of 0; their
/// indices are returned for diagnostics.
pub fn score_query_agnostic(keys: &Matrix) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = keys.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("score_query_agnostic: empty key set".into()));
    }
    let d = keys.cols();
    let mut mean = vec![0.0f64; d];
    for j in 0..n {
        for (m, &v) in mean.iter_mut().zip(keys.row(j)) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mean_norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut scores = vec![0.0f64; n];
    let mut degenerate = Vec::new();
    for j in 0..n {
        let key = keys.row(j);
        let key_norm: f64 = key.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if key_norm == 0.0 || mean_norm == 0.0 {
            scores[j] = 0.0;
            degenerate.push(j);
            continue;
        }
        let dot: f64 = key.iter().zip(&mean).map(|(&a, b)| a as f64 * b).sum();
        scores[j] = -(dot / (key_norm * mean_norm));
    }
    Ok((scores, degenerate))
}

/// Picks the surviving indices: protected entries plus the top-scoring
/// unprotected ones, up to `m` total. Ties keep the earlier index. Output is
/// sorted ascending and has cardinality `min(m, n)`.
pub fn select_retained(scores: &[f64], m: usize, protected: &[usize]) -> Result<Vec<usize>> {
    let n = scores.len();
    let mut protected_mask = vec![false; n];
    let mut protected_count = 0usize;
    for &i in protected {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "select_retained: protected index {i} out of range ({n} entries)"
            )));
        }
        if !protected_mask[i] {
            protected_mask[i] = true;
            protected_count += 1;
        }
    }
    if protected_count > m {
        return Err(Error::InvalidConfiguration(format!(
            "budget {m} smaller than protected set of {protected_count} entries"
        )));
    }
    if n <= m {
        return Ok((0..n).collect());
    }

    let mut candidates: Vec<usize> =
        (0..n).filter(|&i| !protected_mask[i]).collect();
    // descending score, ascending index on ties
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let slots = m - protected_count;
    let mut keep: Vec<usize> =
        (0..n).filter(|&i| protected_mask[i]).collect();
    keep.extend(candidates.into_iter().take(slots));
    keep.sort_unstable();
    Ok(keep)
}

/// Builds the per-layer budget plan.
///
/// Static plans are uniform `[m; layers]`. Dynamic plans split `layers * m`
/// proportionally to the supplied per-layer stats (attention entropies),
/// clamp every layer to `floor`, and redistribute any clamped excess over
/// the remaining layers. Rounding uses largest remainders so the total is
/// preserved exactly.
pub fn plan_budgets(
    mode: BudgetMode,
    layers: usize,
    m: usize,
    layer_stats: Option<&[f64]>,
    floor: usize,
) -> Result<BudgetPlan> {
    if layers == 0 {
        return Err(Error::InvalidArgument("plan_budgets: layers must be >= 1".into()));
    }
    match mode {
        BudgetMode::Static => Ok(BudgetPlan { per_layer: vec![m; layers] }),
        BudgetMode::Dynamic => {
            let stats = layer_stats.ok_or_else(|| {
                Error::InvalidConfiguration(
                    "dynamic budget mode requires per-layer stats (set a stats source)".into(),
                )
            })?;
            if stats.len() != layers {
                return Err(Error::InvalidArgument(format!(
                    "plan_budgets: {} stats for {layers} layers",
                    stats.len()
                )));
            }
            if floor * layers > m * layers {
                return Err(Error::InvalidConfiguration(format!(
                    "floor {floor} exceeds mean budget {m}"
                )));
            }
            let total = (layers * m) as f64;
            let stat_sum: f64 = stats.iter().sum();
            let mut weights: Vec<f64> = if stat_sum <= 0.0 {
                vec![1.0 / layers as f64; layers]
            } else {
                stats.iter().map(|s| s / stat_sum).collect()
            };
            // clamp to floor and redistribute the excess proportionally
            let mut budgets = vec![0.0f64; layers];
            let mut fixed = vec![false; layers];
            loop {
                let fixed_total: f64 =
                    budgets.iter().zip(&fixed).filter(|(_, f)| **f).map(|(b, _)| b).sum();
                let free_weight: f64 =
                    weights.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(w, _)| w).sum();
                let mut clamped_any = false;
                for i in 0..layers {
                    if fixed[i] {
                        continue;
                    }
                    let share = if free_weight > 0.0 {
                        (total - fixed_total) * weights[i] / free_weight
                    } else {
                        (total - fixed_total) / layers as f64
                    };
                    if share < floor as f64 {
                        budgets[i] = floor as f64;
                        fixed[i] = true;
                        weights[i] = 0.0;
                        clamped_any = true;
                    } else {
                        budgets[i] = share;
                    }
                }
                if !clamped_any {
                    break;
                }
            }
            // integer rounding with largest remainders, preserving the total
            let mut plan: Vec<usize> = budgets.iter().map(|b| b.floor() as usize).collect();
            let assigned: usize = plan.iter().sum();
            let mut leftover = layers * m - assigned;
            let mut order: Vec<usize> = (0..layers).collect();
            order.sort_by(|&a, &b| {
                let ra = budgets[a] - budgets[a].floor();
                let rb = budgets[b] - budgets[b].floor();
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            for &i in order.iter().cycle() {
                if leftover == 0 {
                    break;
                }
                plan[i] += 1;
                leftover -= 1;
            }
            debug_assert_eq!(plan.iter().sum::<usize>(), layers * m);
            Ok(BudgetPlan { per_layer: plan })
        }
    }
}
