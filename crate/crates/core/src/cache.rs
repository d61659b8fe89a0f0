//! Per-layer, per-head KV store plus the memory tracer.
//!
//! The cache is the object block-wise prefill appends to and evicts from.
//! Entries keep their original token positions after eviction — keys already
//! carry rotary position information, so survivors are never renumbered.
//! The tracer records entry counts and modeled bytes over time and produces
//! the global-peak and per-block-peak statistics the harness reports.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{kv_memory_bytes, SegmentKind};
use crate::tensor::Matrix;

/// Segment provenance of a cached token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTag {
    pub kind: SegmentKind,
    pub structure_id: Option<u32>,
}

impl SegmentTag {
    pub fn text() -> Self {
        Self { kind: SegmentKind::Text, structure_id: None }
    }
}

/// One cached key/value pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub position: usize,
    pub tag: SegmentTag,
    pub protected: bool,
}

/// `layers x heads` grid of ordered entry lists.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: usize,
    heads: usize,
    dim_head: usize,
    entries: Vec<Vec<Vec<CacheEntry>>>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, dim_head: usize) -> Self {
        let entries = vec![vec![Vec::new(); heads]; layers];
        Self { layers, heads, dim_head, entries }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim_head(&self) -> usize {
        self.dim_head
    }

    pub fn entries(&self, layer: usize, head: usize) -> &[CacheEntry] {
        &self.entries[layer][head]
    }

    pub fn entry_count(&self, layer: usize, head: usize) -> usize {
        self.entries[layer][head].len()
    }

    /// Maximum entry count over all (layer, head) stores.
    pub fn max_entry_count(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|layer| layer.iter().map(Vec::len))
            .max()
            .unwrap_or(0)
    }

    pub fn last_position(&self, layer: usize) -> Option<usize> {
        self.entries[layer][0].last().map(|e| e.position)
    }

    /// Appends one block of KV pairs to every head of `layer`.
    ///
    /// `k` and `v` are `b x (heads * dim_head)`; column slices are routed to
    /// the corresponding heads. Positions must continue strictly after the
    /// last cached position in the layer.
    pub fn append_block(
        &mut self,
        layer: usize,
        k: &Matrix,
        v: &Matrix,
        positions: &[usize],
        tags: &[SegmentTag],
        protected: &[bool],
    ) -> Result<()> {
        let b = positions.len();
        if k.rows() != b || v.rows() != b || tags.len() != b || protected.len() != b {
            return Err(Error::InvalidArgument("append_block: row count mismatch".into()));
        }
        if k.cols() != self.heads * self.dim_head || v.cols() != self.heads * self.dim_head {
            return Err(Error::InvalidArgument(format!(
                "append_block: expected {} columns, got {}",
                self.heads * self.dim_head,
                k.cols()
            )));
        }
        let mut last = self.last_position(layer);
        for &p in positions {
            if last.is_some_and(|lp| p <= lp) {
                return Err(Error::InvalidArgument(format!(
                    "append_block: position {p} not greater than last cached {}",
                    last.unwrap()
                )));
            }
            last = Some(p);
        }
        for head in 0..self.heads {
            let lo = head * self.dim_head;
            let hi = lo + self.dim_head;
            let store = &mut self.entries[layer][head];
            store.reserve(b);
            for i in 0..b {
                store.push(CacheEntry {
                    key: k.row(i)[lo..hi].to_vec(),
                    value: v.row(i)[lo..hi].to_vec(),
                    position: positions[i],
                    tag: tags[i],
                    protected: protected[i],
                });
            }
        }
        Ok(())
    }

    /// Keeps only the entries at `keep` indices in one (layer, head) store.
    ///
    /// Survivors stay in their original relative order with their original
    /// positions untouched. Protected entries must be in `keep`.
    pub fn retain(&mut self, layer: usize, head: usize, keep: &[usize]) -> Result<()> {
        let store = &mut self.entries[layer][head];
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.last().is_some_and(|&i| i >= store.len()) {
            return Err(Error::InvalidArgument(format!(
                "retain: index {} out of range ({} entries)",
                sorted.last().unwrap(),
                store.len()
            )));
        }
        let keep_set: Vec<bool> = {
            let mut mask = vec![false; store.len()];
            for &i in &sorted {
                mask[i] = true;
            }
            mask
        };
        for (i, entry) in store.iter().enumerate() {
            if entry.protected && !keep_set[i] {
                return Err(Error::ContractViolation(format!(
                    "retain would evict protected entry at index {i} (position {})",
                    entry.position
                )));
            }
        }
        let mut idx = 0;
        store.retain(|_| {
            let kept = keep_set[idx];
            idx += 1;
            kept
        });
        Ok(())
    }

    /// Modeled byte footprint of the current occupancy:
    /// `2 * sum over (layer, head) of entry_count * dim_head * precision_bytes`.
    pub fn footprint(&self, precision_bytes: usize) -> u64 {
        let total: u64 = self
            .entries
            .iter()
            .flat_map(|layer| layer.iter().map(|h| h.len() as u64))
            .sum();
        2 * total * self.dim_head as u64 * precision_bytes as u64
    }

    /// Keys of one head as an `n x dim_head` matrix.
    pub fn keys_matrix(&self, layer: usize, head: usize) -> Matrix {
        let store = &self.entries[layer][head];
        let mut data = Vec::with_capacity(store.len() * self.dim_head);
        for e in store {
            data.extend_from_slice(&e.key);
        }
        Matrix::new(store.len(), self.dim_head, data).expect("consistent entry dims")
    }

    /// Retained positions per (layer, head).
    pub fn positions(&self) -> Vec<Vec<Vec<usize>>> {
        self.entries
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|head| head.iter().map(|e| e.position).collect())
                    .collect()
            })
            .collect()
    }

    /// Order-sensitive content hash over positions, tags, and key/value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.entries {
            for head in layer {
                head.len().hash(&mut h);
                for e in head {
                    e.position.hash(&mut h);
                    e.protected.hash(&mut h);
                    for v in e.key.iter().chain(&e.value) {
                        v.to_bits().hash(&mut h);
                    }
                }
            }
        }
        h.finish()
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim_head,
            entries: self.entries.clone(),
        }
    }
}

/// Serializable cache dump for golden tests: header plus per-head entry arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub entries: Vec<Vec<Vec<CacheEntry>>>,
}

/// One recorded point in a [`MemoryTrace`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub label: String,
    pub entries_per_layer_head: usize,
    pub modeled_bytes: u64,
}

/// Time series of cache occupancy in entries and modeled bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryTrace {
    layers: usize,
    heads: usize,
    dim_head: usize,
    precision_bytes: usize,
    pub events: Vec<TraceEvent>,
    pub block_peaks: Vec<u64>,
    current_block_peak: Option<u64>,
}

impl MemoryTrace {
    pub fn new(layers: usize, heads: usize, dim_head: usize, precision_bytes: usize) -> Self {
        Self {
            layers,
            heads,
            dim_head,
            precision_bytes,
            events: Vec::new(),
            block_peaks: Vec::new(),
            current_block_peak: None,
        }
    }

    pub fn precision_bytes(&self) -> usize {
        self.precision_bytes
    }

    /// Records the current occupancy under `label`. Modeled bytes follow the
    /// footprint formula at the current maximum per-(layer, head) count.
    pub fn record(&mut self, label: &str, cache: &KvCache) {
        let entries = cache.max_entry_count();
        let bytes =
            kv_memory_bytes(self.layers, self.heads, self.dim_head, self.precision_bytes, entries);
        self.events.push(TraceEvent {
            label: label.to_string(),
            entries_per_layer_head: entries,
            modeled_bytes: bytes,
        });
        if let Some(peak) = self.current_block_peak.as_mut() {
            *peak = (*peak).max(bytes);
        }
    }

    pub fn begin_block(&mut self) {
        self.current_block_peak = Some(0);
    }

    pub fn end_block(&mut self) {
        if let Some(peak) = self.current_block_peak.take() {
            self.block_peaks.push(peak);
        }
    }

    /// Maximum modeled bytes over all recorded events.
    pub fn global_peak(&self) -> Result<u64> {
        self.events
            .iter()
            .map(|e| e.modeled_bytes)
            .max()
            .ok_or_else(|| Error::InvalidState("peak query on empty trace".into()))
    }

    /// Mean of per-block maxima; falls back to the global peak when no block
    /// boundaries were recorded (bulk runs).
    pub fn avg_block_peak(&self) -> Result<f64> {
        if self.block_peaks.is_empty() {
            return self.global_peak().map(|p| p as f64);
        }
        let sum: u64 = self.block_peaks.iter().sum();
        Ok(sum as f64 / self.block_peaks.len() as f64)
    }

    /// Maximum entry count seen at any recorded instant.
    pub fn max_entries_seen(&self) -> usize {
        self.events.iter().map(|e| e.entries_per_layer_head).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::kv_memory_bytes;

    fn tag() -> SegmentTag {
        SegmentTag::text()
    }

    fn block(b: usize, cols: usize, fill: f32) -> Matrix {
        Matrix::new(b, cols, vec![fill; b * cols]).unwrap()
    }

    #[test]
    fn append_grows_every_head() {
        let mut cache = KvCache::new(2, 2, 4);
        let k = block(4, 8, 1.0);
        let v = block(4, 8, 2.0);
        cache
            .append_block(0, &k, &v, &[0, 1, 2, 3], &[tag(); 4], &[false; 4])
            .unwrap();
        assert_eq!(cache.entry_count(0, 0), 4);
        assert_eq!(cache.entry_count(0, 1), 4);
        assert_eq!(cache.entry_count(1, 0), 0);
    }

    #[test]
    fn two_appends_concatenate_positions_in_order() {
        let mut cache = KvCache::new(1, 1, 2);
        cache
            .append_block(0, &block(4, 2, 0.0), &block(4, 2, 0.0), &[0, 1, 2, 3], &[tag(); 4], &[false; 4])
            .unwrap();
        cache
            .append_block(0, &block(3, 2, 0.0), &block(3, 2, 0.0), &[4, 5, 6], &[tag(); 3], &[false; 3])
            .unwrap();
        assert_eq!(cache.entry_count(0, 0), 7);
        let positions: Vec<usize> = cache.entries(0, 0).iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn append_rejects_non_monotone_positions() {
        let mut cache = KvCache::new(1, 1, 2);
        cache
            .append_block(0, &block(2, 2, 0.0), &block(2, 2, 0.0), &[0, 1], &[tag(); 2], &[false; 2])
            .unwrap();
        let err = cache
            .append_block(0, &block(1, 2, 0.0), &block(1, 2, 0.0), &[1], &[tag()], &[false])
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn retain_all_is_identity() {
        let mut cache = KvCache::new(1, 1, 2);
        cache
            .append_block(0, &block(3, 2, 1.0), &block(3, 2, 2.0), &[0, 1, 2], &[tag(); 3], &[false; 3])
            .unwrap();
        let before = cache.fingerprint();
        cache.retain(0, 0, &[0, 1, 2]).unwrap();
        assert_eq!(cache.fingerprint(), before);
    }

    #[test]
    fn retain_keeps_original_positions() {
        let mut cache = KvCache::new(1, 1, 2);
        cache
            .append_block(
                0,
                &block(5, 2, 0.5),
                &block(5, 2, 0.5),
                &[10, 11, 12, 13, 14],
                &[tag(); 5],
                &[false; 5],
            )
            .unwrap();
        cache.retain(0, 0, &[0, 2, 4]).unwrap();
        let positions: Vec<usize> = cache.entries(0, 0).iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![10, 12, 14]);
    }

    #[test]
    fn retain_scrambled_input_still_position_sorted() {
        // oracle: sort-then-apply must match scrambled input
        let mut a = KvCache::new(1, 1, 2);
        let mut b_cache = KvCache::new(1, 1, 2);
        for cache in [&mut a, &mut b_cache] {
            cache
                .append_block(
                    0,
                    &block(5, 2, 0.5),
                    &block(5, 2, 0.5),
                    &[0, 1, 2, 3, 4],
                    &[tag(); 5],
                    &[false; 5],
                )
                .unwrap();
        }
        a.retain(0, 0, &[4, 0, 2]).unwrap();
        b_cache.retain(0, 0, &[0, 2, 4]).unwrap();
        assert_eq!(a.fingerprint(), b_cache.fingerprint());
        let positions: Vec<usize> = a.entries(0, 0).iter().map(|e| e.position).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn retain_out_of_range_rejected() {
        let mut cache = KvCache::new(1, 1, 2);
        cache
            .append_block(0, &block(2, 2, 0.0), &block(2, 2, 0.0), &[0, 1], &[tag(); 2], &[false; 2])
            .unwrap();
        assert!(cache.retain(0, 0, &[0, 5]).is_err());
    }

    #[test]
    fn retain_refuses_to_evict_protected() {
        let mut cache = KvCache::new(1, 1, 2);
        cache
            .append_block(
                0,
                &block(3, 2, 0.0),
                &block(3, 2, 0.0),
                &[0, 1, 2],
                &[tag(); 3],
                &[false, true, false],
            )
            .unwrap();
        let err = cache.retain(0, 0, &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn footprint_matches_formula_on_uniform_occupancy() {
        let mut cache = KvCache::new(2, 2, 4);
        for layer in 0..2 {
            let positions: Vec<usize> = (0..10).collect();
            cache
                .append_block(
                    layer,
                    &block(10, 8, 0.0),
                    &block(10, 8, 0.0),
                    &positions,
                    &[tag(); 10],
                    &[false; 10],
                )
                .unwrap();
        }
        assert_eq!(cache.footprint(2), 640);
        assert_eq!(cache.footprint(2), kv_memory_bytes(2, 2, 4, 2, 10));
    }

    #[test]
    fn footprint_empty_cache_is_zero() {
        assert_eq!(KvCache::new(3, 3, 8).footprint(4), 0);
    }

    #[test]
    fn trace_single_event_peaks() {
        let mut cache = KvCache::new(2, 2, 4);
        for layer in 0..2 {
            let positions: Vec<usize> = (0..10).collect();
            cache
                .append_block(
                    layer,
                    &block(10, 8, 0.0),
                    &block(10, 8, 0.0),
                    &positions,
                    &[tag(); 10],
                    &[false; 10],
                )
                .unwrap();
        }
        let mut trace = MemoryTrace::new(2, 2, 4, 2);
        trace.record("only", &cache);
        assert_eq!(trace.global_peak().unwrap(), 640);
        assert_eq!(trace.avg_block_peak().unwrap(), 640.0);
    }

    #[test]
    fn trace_block_peak_statistics() {
        let mut trace = MemoryTrace::new(1, 1, 1, 1);
        for bytes in [800u64, 800, 600] {
            trace.begin_block();
            trace.events.push(TraceEvent {
                label: "synthetic".into(),
                entries_per_layer_head: 0,
                modeled_bytes: bytes,
            });
            trace.current_block_peak = Some(bytes);
            trace.end_block();
        }
        assert_eq!(trace.global_peak().unwrap(), 800);
        assert!((trace.avg_block_peak().unwrap() - 733.3333333333334).abs() < 1e-9);
    }

    #[test]
    fn trace_peak_query_on_empty_trace_fails() {
        let trace = MemoryTrace::new(1, 1, 1, 1);
        assert!(matches!(trace.global_peak(), Err(Error::InvalidState(_))));
    }

    #[test]
    fn snapshot_roundtrips_through_json() {
        let mut cache = KvCache::new(1, 2, 2);
        cache
            .append_block(0, &block(2, 4, 1.5), &block(2, 4, -0.5), &[0, 1], &[tag(); 2], &[false; 2])
            .unwrap();
        let snap = cache.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: CacheSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back.layers, 1);
        assert_eq!(back.heads, 2);
        assert_eq!(back.entries[0][1][1].key, snap.entries[0][1][1].key);
    }
}
