//! Multimodal token layout: text spans, image tiles, and video frames.
//!
//! The layout carries the structural metadata that drives block alignment:
//! which token ranges belong to which tile or frame, and where the textual
//! prompt sits. It also owns the two bits of footprint arithmetic everything
//! else leans on: the vision token count for an image resolution and the
//! modeled KV byte cost for a sequence length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a contiguous run of tokens represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    Tile,
    Frame,
}

/// A contiguous span of tokens of one kind. Tile and frame segments carry the
/// index of the structure they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
    pub structure_id: Option<u32>,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn is_visual(&self) -> bool {
        matches!(self.kind, SegmentKind::Tile | SegmentKind::Frame)
    }
}

/// Where the textual prompt sits relative to the vision tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPosition {
    First,
    Last,
}

/// Segmented token sequence. Segments tile `[0, total_len)` contiguously.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub segments: Vec<Segment>,
    pub total_len: usize,
    /// `(start, len)` of the textual-prompt segment.
    pub prompt_span: (usize, usize),
}

/// One prefill block over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    /// True iff no tile/frame segment straddles the boundary at `end`.
    pub aligned: bool,
}

impl Block {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Block-boundary behavior for [`partition_blocks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Fixed-size chunks of `b`, regardless of structure.
    None,
    /// Boundaries moved backward so no tile/frame segment is split.
    Structure,
}

/// Number of vision tokens for an `H x W` image with patch size `P`,
/// discretized per dimension: `floor(H/P) * floor(W/P)`.
pub fn vision_token_count(h: usize, w: usize, p: usize) -> Result<usize> {
    if p == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("image dimensions must be positive".into()));
    }
    Ok((h / p) * (w / p))
}

/// Modeled KV-cache bytes for a uniform occupancy of `seq_len` entries:
/// `2 * layers * heads * dim_head * precision_bytes * seq_len`
/// (the factor of 2 covers keys and values).
pub fn kv_memory_bytes(
    layers: usize,
    heads: usize,
    dim_head: usize,
    precision_bytes: usize,
    seq_len: usize,
) -> u64 {
    2 * layers as u64 * heads as u64 * dim_head as u64 * precision_bytes as u64 * seq_len as u64
}

/// Builds a layout of `prompt_len` text tokens plus tile and/or frame
/// segments. Tiles come before frames when both are present; the prompt sits
/// first or last per `prompt_position`.
pub fn build_layout(
    prompt_len: usize,
    tiles: usize,
    tokens_per_tile: usize,
    frames: usize,
    tokens_per_frame: usize,
    prompt_position: PromptPosition,
) -> Result<TokenLayout> {
    if prompt_len == 0 {
        return Err(Error::InvalidArgument("prompt_len must be >= 1".into()));
    }
    if tiles > 0 && tokens_per_tile == 0 {
        return Err(Error::InvalidArgument("tokens_per_tile must be >= 1 when tiles > 0".into()));
    }
    if frames > 0 && tokens_per_frame == 0 {
        return Err(Error::InvalidArgument(
            "tokens_per_frame must be >= 1 when frames > 0".into(),
        ));
    }

    let mut segments = Vec::with_capacity(tiles + frames + 1);
    let mut cursor = 0usize;
    let mut prompt_start = 0usize;

    let mut push_text = |segments: &mut Vec<Segment>, cursor: &mut usize| {
        prompt_start = *cursor;
        segments.push(Segment {
            kind: SegmentKind::Text,
            start: *cursor,
            len: prompt_len,
            structure_id: None,
        });
        *cursor += prompt_len;
    };

    if prompt_position == PromptPosition::First {
        push_text(&mut segments, &mut cursor);
    }
    for t in 0..tiles {
        segments.push(Segment {
            kind: SegmentKind::Tile,
            start: cursor,
            len: tokens_per_tile,
            structure_id: Some(t as u32),
        });
        cursor += tokens_per_tile;
    }
    for f in 0..frames {
        segments.push(Segment {
            kind: SegmentKind::Frame,
            start: cursor,
            len: tokens_per_frame,
            structure_id: Some(f as u32),
        });
        cursor += tokens_per_frame;
    }
    if prompt_position == PromptPosition::Last {
        push_text(&mut segments, &mut cursor);
    }

    Ok(TokenLayout {
        segments,
        total_len: cursor,
        prompt_span: (prompt_start, prompt_len),
    })
}

impl TokenLayout {
    /// Segment covering token index `pos`.
    pub fn segment_at(&self, pos: usize) -> &Segment {
        let idx = self
            .segments
            .partition_point(|s| s.end() <= pos)
            .min(self.segments.len() - 1);
        &self.segments[idx]
    }

    /// Total tokens in tile/frame segments.
    pub fn vision_len(&self) -> usize {
        self.segments.iter().filter(|s| s.is_visual()).map(|s| s.len).sum()
    }

    pub fn max_segment_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).max().unwrap_or(0)
    }

    /// True if `pos` lies inside the textual-prompt span.
    pub fn in_prompt(&self, pos: usize) -> bool {
        let (start, len) = self.prompt_span;
        pos >= start && pos < start + len
    }
}

/// Partitions the layout into prefill blocks of at most `b` tokens.
///
/// With `Alignment::Structure`, a block is the longest prefix of remaining
/// whole segments of one kind whose total length fits in `b` (text never
/// shares a block with tiles or frames, so visual structures are evicted in
/// rounds of their own); configurations where `b` is smaller than some
/// segment are refused instead of silently splitting it.
pub fn partition_blocks(layout: &TokenLayout, b: usize, align: Alignment) -> Result<Vec<Block>> {
    if b == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    let n = layout.total_len;
    let boundary_aligned = |end: usize| -> bool {
        if end >= n {
            return true;
        }
        let seg = layout.segment_at(end);
        !(seg.is_visual() && seg.start < end)
    };

    match align {
        Alignment::None => {
            let mut blocks = Vec::with_capacity(n.div_ceil(b));
            let mut start = 0;
            while start < n {
                let end = (start + b).min(n);
                blocks.push(Block { start, end, aligned: boundary_aligned(end) });
                start = end;
            }
            Ok(blocks)
        }
        Alignment::Structure => {
            let max_seg = layout.max_segment_len();
            if b < max_seg {
                return Err(Error::InvalidConfiguration(format!(
                    "structure alignment requires block size >= max segment length \
                     ({b} < {max_seg}); a smaller block would split a visual structure"
                )));
            }
            let mut blocks = Vec::new();
            let mut start = 0;
            let mut seg_idx = 0;
            while start < n {
                let kind = layout.segments[seg_idx].kind;
                let mut end = start;
                while seg_idx < layout.segments.len()
                    && layout.segments[seg_idx].kind == kind
                    && layout.segments[seg_idx].end() - start <= b
                {
                    end = layout.segments[seg_idx].end();
                    seg_idx += 1;
                }
                debug_assert!(end > start, "every segment fits in b by the check above");
                blocks.push(Block { start, end, aligned: true });
                start = end;
            }
            Ok(blocks)
        }
    }
}
