//! Temporal segment arithmetic: anchors, tIoU, offset coding and greedy NMS.
//!
//! Segments live in frame units as half-open real intervals. Conversion to
//! seconds only happens at the I/O boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input frames per step of the temporal feature grid.
pub const TEMPORAL_STRIDE: usize = 8;

/// Largest magnitude a predicted log-length offset may take before decoding.
pub const MAX_LOG_LENGTH_OFFSET: f64 = 10.0;

/// A temporal interval described by its center and length, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub center: f64,
    pub length: f64,
}

impl Segment {
    pub fn new(center: f64, length: f64) -> Self {
        Self { center, length }
    }

    pub fn from_bounds(start: f64, end: f64) -> Self {
        Self {
            center: 0.5 * (start + end),
            length: end - start,
        }
    }

    pub fn start(&self) -> f64 {
        self.center - 0.5 * self.length
    }

    pub fn end(&self) -> f64 {
        self.center + 0.5 * self.length
    }

    pub fn is_valid(&self) -> bool {
        self.length > 0.0 && self.center.is_finite() && self.length.is_finite()
    }
}

/// Regression target relative to a reference segment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    /// Center shift divided by reference length.
    pub center: f64,
    /// Log of the length ratio.
    pub log_length: f64,
}

impl Offset {
    pub fn new(center: f64, log_length: f64) -> Self {
        Self { center, log_length }
    }
}

/// What a scored segment claims to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentLabel {
    Proposal,
    Class(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
    pub label: SegmentLabel,
}

impl ScoredSegment {
    pub fn proposal(segment: Segment, score: f64) -> Self {
        Self {
            segment,
            score,
            label: SegmentLabel::Proposal,
        }
    }

    pub fn class(segment: Segment, score: f64, class: usize) -> Self {
        Self {
            segment,
            score,
            label: SegmentLabel::Class(class),
        }
    }
}

/// Multiscale anchor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor lengths in feature steps, strictly increasing.
    pub scales: Vec<u32>,
    pub temporal_stride: usize,
    /// Frames per second, only used to report durations.
    pub fps: f64,
}

impl AnchorConfig {
    pub fn new(scales: Vec<u32>, fps: f64) -> Result<Self> {
        let cfg = Self {
            scales,
            temporal_stride: TEMPORAL_STRIDE,
            fps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// THUMOS'14 scales at 25 fps.
    pub fn thumos14() -> Self {
        Self::new(vec![2, 4, 5, 6, 8, 9, 10, 12, 14, 16], 25.0).unwrap()
    }

    /// ActivityNet scales at 3 fps.
    pub fn activitynet() -> Self {
        Self::new(
            vec![1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48, 56, 64],
            3.0,
        )
        .unwrap()
    }

    /// Charades scales at 5 fps.
    pub fn charades() -> Self {
        Self::new(
            vec![1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 40, 48],
            5.0,
        )
        .unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("anchor scales must not be empty".into()));
        }
        if self.scales[0] == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "anchor scales must be positive and strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.temporal_stride == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("temporal stride and fps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Duration in seconds of the anchor with the given scale.
    pub fn duration_secs(&self, scale: u32) -> f64 {
        scale as f64 * self.temporal_stride as f64 / self.fps
    }
}

/// Anchors for a buffer of `frames` frames, location-major: anchor
/// `i·K + k` sits at feature step `i` with scale `k`.
pub fn generate_anchors(cfg: &AnchorConfig, frames: usize) -> Result<Vec<Segment>> {
    let stride = cfg.temporal_stride;
    if !frames.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "buffer length {} is not divisible by the temporal stride {}",
            frames, stride
        )));
    }
    let steps = frames / stride;
    let mut anchors = Vec::with_capacity(steps * cfg.scales.len());
    for i in 0..steps {
        let center = (i as f64 + 0.5) * stride as f64;
        for &s in &cfg.scales {
            anchors.push(Segment::new(center, (s as usize * stride) as f64));
        }
    }
    Ok(anchors)
}

/// Temporal intersection over union.
pub fn tiou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = (a.end() - a.start()) + (b.end() - b.start()) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Offset of `gt` relative to `reference`.
pub fn encode(reference: &Segment, gt: &Segment) -> Result<Offset> {
    if !(reference.length > 0.0) || !(gt.length > 0.0) {
        return Err(Error::Domain(format!(
            "segment lengths must be positive (reference {}, target {})",
            reference.length, gt.length
        )));
    }
    Ok(Offset {
        center: (gt.center - reference.center) / reference.length,
        log_length: (gt.length / reference.length).ln(),
    })
}

/// Inverse of [`encode`]; the log-length offset is clamped to
/// ±[`MAX_LOG_LENGTH_OFFSET`] first.
pub fn decode(reference: &Segment, offset: &Offset) -> Segment {
    let dl = offset
        .log_length
        .clamp(-MAX_LOG_LENGTH_OFFSET, MAX_LOG_LENGTH_OFFSET);
    Segment {
        center: reference.center + offset.center * reference.length,
        length: reference.length * dl.exp(),
    }
}

/// Clamps a segment to `[0, frames]`; `None` when nothing positive remains.
pub fn clip(seg: &Segment, frames: f64) -> Option<Segment> {
    let start = seg.start().clamp(0.0, frames);
    let end = seg.end().clamp(0.0, frames);
    (end > start).then(|| Segment::from_bounds(start, end))
}

/// Indices into `items` in descending score order, ties by lower index.
pub fn rank_by_score(items: &[ScoredSegment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].score.total_cmp(&items[a].score).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns indices of kept items in the
/// order they were selected.
pub fn nms_indices(items: &[ScoredSegment], threshold: f64) -> Vec<usize> {
    let order = rank_by_score(items);
    let mut suppressed = vec![false; items.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && tiou(&items[i].segment, &items[j].segment) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy non-maximum suppression returning the kept items.
pub fn nms(items: &[ScoredSegment], threshold: f64) -> Vec<ScoredSegment> {
    nms_indices(items, threshold)
        .into_iter()
        .map(|i| items[i])
        .collect()
}
