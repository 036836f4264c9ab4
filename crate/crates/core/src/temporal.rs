//! Temporal span geometry and the temporal-shifting augmentation.
//!
//! Spans carry their unit so seconds and normalized coordinates can't be
//! mixed by accident. Shifting relocates the ground-truth frame block to a
//! uniformly drawn position while preserving the relative order of the
//! background frames.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Seconds,
    Normalized,
}

/// A temporal interval `[start, end]` with `start <= end`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
    pub unit: Unit,
}

impl Span {
    pub fn seconds(start: f64, end: f64) -> Self {
        assert!(start <= end, "span start {start} > end {end}");
        Span {
            start,
            end,
            unit: Unit::Seconds,
        }
    }

    pub fn normalized(start: f64, end: f64) -> Self {
        assert!(start <= end, "span start {start} > end {end}");
        assert!(
            (0.0..=1.0).contains(&start) && (0.0..=1.0).contains(&end),
            "normalized span [{start}, {end}] outside [0, 1]"
        );
        Span {
            start,
            end,
            unit: Unit::Normalized,
        }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Convert a seconds span to normalized coordinates, clamping to the
    /// video extent.
    pub fn to_normalized(&self, duration: f64) -> Span {
        match self.unit {
            Unit::Normalized => *self,
            Unit::Seconds => {
                assert!(duration > 0.0, "duration must be positive");
                Span::normalized(
                    (self.start / duration).clamp(0.0, 1.0),
                    (self.end / duration).clamp(0.0, 1.0),
                )
            }
        }
    }

    pub fn to_seconds(&self, duration: f64) -> Span {
        match self.unit {
            Unit::Seconds => *self,
            Unit::Normalized => Span::seconds(self.start * duration, self.end * duration),
        }
    }
}

/// Discrete frame grid of a video: `frame_count` frames of equal duration,
/// plus the current payload order (a permutation of frame indices).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTimeline {
    pub frame_count: usize,
    pub frame_duration: f64,
    pub order: Vec<usize>,
}

impl FrameTimeline {
    pub fn new(frame_count: usize, frame_duration: f64) -> Self {
        assert!(frame_count >= 1, "timeline needs at least one frame");
        assert!(frame_duration > 0.0, "frame duration must be positive");
        FrameTimeline {
            frame_count,
            frame_duration,
            order: (0..frame_count).collect(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.frame_count as f64 * self.frame_duration
    }
}

fn assert_same_unit(a: &Span, b: &Span, op: &str) {
    assert!(
        a.unit == b.unit,
        "{op}: mixed span units {:?} vs {:?}",
        a.unit,
        b.unit
    );
}

/// Intersection over union of two spans. Zero when both are degenerate.
pub fn iou(a: &Span, b: &Span) -> f64 {
    assert_same_unit(a, b, "iou");
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - |C \ (a u b)| / |C|` with C the smallest span
/// enclosing both. Lies in (-1, 1], equals IoU when the spans touch or
/// overlap, and tends to -1 as the gap dominates the enclosure.
pub fn giou(a: &Span, b: &Span) -> f64 {
    assert_same_unit(a, b, "giou");
    assert!(
        a.length() > 0.0 || b.length() > 0.0,
        "giou undefined for two degenerate spans"
    );
    let enclosure = a.end.max(b.end) - a.start.min(b.start);
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    let base = if union <= 0.0 { 0.0 } else { inter / union };
    base - (enclosure - union) / enclosure
}

/// `(center, width)` of a normalized span.
pub fn center_width(span: &Span) -> (f64, f64) {
    assert!(
        span.unit == Unit::Normalized,
        "center_width requires a normalized span"
    );
    ((span.start + span.end) / 2.0, span.length())
}

/// Inverse of [`center_width`], clamping the result into [0, 1].
pub fn from_center_width(center: f64, width: f64) -> Span {
    let start = (center - width / 2.0).clamp(0.0, 1.0);
    let end = (center + width / 2.0).clamp(0.0, 1.0);
    Span::normalized(start.min(end), end.max(start))
}

/// Why a shift could not be applied.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ShiftError {
    #[error("video duration {0:.1}s is not below the {1:.0}s shifting limit")]
    TooLong(f64, f64),
    #[error("ground truth spans the whole timeline; nothing to shift")]
    FullCover,
    #[error("ground truth [{0:.2}, {1:.2}]s lies outside the timeline")]
    OutOfRange(f64, f64),
}

pub const SHIFT_MAX_DURATION_SECS: f64 = 60.0;

/// Move the ground-truth frame block to a uniformly drawn new position.
///
/// Returns the new payload order (a permutation of `0..frame_count`) and the
/// relocated ground truth in seconds. Background frames keep their relative
/// order; the block stays contiguous.
pub fn temporal_shift(
    frames: &FrameTimeline,
    gt: &Span,
    max_duration: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Span), ShiftError> {
    assert!(gt.unit == Unit::Seconds, "temporal_shift expects a seconds span");
    let duration = frames.duration();
    if duration >= max_duration {
        return Err(ShiftError::TooLong(duration, max_duration));
    }
    if gt.start < 0.0 || gt.end > duration + 1e-9 {
        return Err(ShiftError::OutOfRange(gt.start, gt.end));
    }

    let total = frames.frame_count;
    let first = (gt.start / frames.frame_duration).floor() as usize;
    let len = ((gt.end - gt.start) / frames.frame_duration).round() as usize;
    let len = len.max(1);
    let first = first.min(total - 1);
    let last = (first + len).min(total);
    let len = last - first;
    if len >= total {
        return Err(ShiftError::FullCover);
    }

    let new_start = rng.gen_range(0..=total - len);

    let block: Vec<usize> = frames.order[first..last].to_vec();
    let background: Vec<usize> = frames.order[..first]
        .iter()
        .chain(frames.order[last..].iter())
        .copied()
        .collect();

    let mut order = Vec::with_capacity(total);
    order.extend_from_slice(&background[..new_start]);
    order.extend_from_slice(&block);
    order.extend_from_slice(&background[new_start..]);

    let new_gt = Span::seconds(
        new_start as f64 * frames.frame_duration,
        (new_start + len) as f64 * frames.frame_duration,
    );
    Ok((order, new_gt))
}

/// Coin flip for applying the shift: always `false` for long videos,
/// otherwise true with probability `p_apply`.
pub fn shift_probability_gate(
    duration: f64,
    p_apply: f64,
    max_duration: f64,
    rng: &mut impl Rng,
) -> bool {
    assert!((0.0..=1.0).contains(&p_apply), "p_apply {p_apply} outside [0, 1]");
    if duration >= max_duration {
        return false;
    }
    if p_apply == 0.0 {
        return false;
    }
    if p_apply >= 1.0 {
        return true;
    }
    rng.gen::<f64>() < p_apply
}
