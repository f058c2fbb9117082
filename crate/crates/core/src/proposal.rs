//! Temporal proposal subnet: the temporal-only feature map, per-anchor
//! binary scores and offsets, anchor labeling and 1:1 batch sampling.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode, tiou, Offset, Segment};
use crate::params::{fan_in_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// tIoU above which an anchor is positive.
pub const POSITIVE_OVERLAP: f64 = 0.7;
/// tIoU below which (against every ground truth) an anchor is negative.
pub const NEGATIVE_OVERLAP: f64 = 0.3;
pub const BATCH_SIZE: usize = 64;
pub const POSITIVE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalHeadConfig {
    /// Channels of the (possibly fused) backbone output.
    pub in_channels: usize,
    /// Channels of the temporal feature map.
    pub channels: usize,
    /// Anchor scales per temporal location.
    pub num_anchors: usize,
}

impl ProposalHeadConfig {
    /// Score and offset layers start at zero so initial proposals are the
    /// anchors themselves with confidence 0.5.
    pub fn init<S: Scalar, R: Rng>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        let (ci, c, k2) = (self.in_channels, self.channels, 2 * self.num_anchors);
        store.insert("tpn.conv.weight", fan_in_uniform([c, ci, 3, 3, 3], ci * 27, rng));
        store.insert("tpn.conv.bias", Tensor::zeros([c]));
        store.insert("tpn.score.weight", Tensor::zeros([k2, c, 1, 1, 1]));
        store.insert("tpn.score.bias", Tensor::zeros([k2]));
        store.insert("tpn.offset.weight", Tensor::zeros([k2, c, 1, 1, 1]));
        store.insert("tpn.offset.bias", Tensor::zeros([k2]));
    }
}

/// 3×3×3 conv (padding 1, ReLU) then a max pool over the whole spatial
/// extent: `[C, T, H', W']` → `[C', T, 1, 1]`.
pub fn tpn_features<S: Scalar>(g: &mut Graph<S>, params: &ParamStore<S>, c5: Var) -> Result<Var> {
    let w = params.var(g, "tpn.conv.weight")?;
    let b = params.var(g, "tpn.conv.bias")?;
    let x = g.conv3d(c5, w, b, [1, 1, 1], [1, 1, 1])?;
    let x = g.relu(x)?;
    let s = g.shape(x).to_vec();
    g.maxpool3d(x, [1, s[2], s[3]], [1, s[2], s[3]])
}

/// Per-anchor outputs, both shaped `[T, K, 2]`: scores are
/// `(background, activity)` logits, offsets are `(δc, δl)`.
pub struct ProposalOutputs {
    pub scores: Var,
    pub offsets: Var,
}

fn channels_to_anchors<S: Scalar>(g: &mut Graph<S>, x: Var, k: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = s[1];
    let mut idx = Vec::with_capacity(t * k * 2);
    for ti in 0..t {
        for ki in 0..k {
            for j in 0..2 {
                idx.push((2 * ki + j) * t + ti);
            }
        }
    }
    g.gather(x, idx, &[t, k, 2])
}

pub fn predict<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    tpn: Var,
    num_anchors: usize,
) -> Result<ProposalOutputs> {
    let ws = params.get("tpn.score.weight")?.shape().to_vec();
    if ws[0] != 2 * num_anchors {
        return Err(Error::dim(
            "proposal_predict",
            "anchors",
            format!("head has {} outputs, {} anchors need {}", ws[0], num_anchors, 2 * num_anchors),
        ));
    }
    let head = |g: &mut Graph<S>, name: &str| -> Result<Var> {
        let w = params.var(g, &format!("tpn.{name}.weight"))?;
        let b = params.var(g, &format!("tpn.{name}.bias"))?;
        let y = g.conv3d(tpn, w, b, [1, 1, 1], [0, 0, 0])?;
        channels_to_anchors(g, y, num_anchors)
    };
    let scores = head(g, "score")?;
    let offsets = head(g, "offset")?;
    Ok(ProposalOutputs { scores, offsets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabeling {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for each positive anchor.
    pub targets: Vec<Option<Offset>>,
}

impl AnchorLabeling {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, which: AnchorLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == which).then_some(i))
            .collect()
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Positive: tIoU > 0.7 with some ground truth, or the highest-tIoU anchor
/// of some ground truth. Negative: tIoU < 0.3 with every ground truth.
/// Everything else is ignored.
pub fn assign_anchor_labels(anchors: &[Segment], gts: &[Segment]) -> Result<AnchorLabeling> {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut targets = vec![None; n];
    if gts.is_empty() {
        return Ok(AnchorLabeling { labels, targets });
    }
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| tiou(a, g)).collect())
        .collect();
    let best_gt: Vec<(usize, f64)> = overlaps
        .iter()
        .map(|row| argmax_first(row.iter().copied()).unwrap())
        .collect();
    let mut positive = vec![false; n];
    for (i, &(_, o)) in best_gt.iter().enumerate() {
        positive[i] = o > POSITIVE_OVERLAP;
    }
    for j in 0..gts.len() {
        if let Some((i, _)) = argmax_first(overlaps.iter().map(|row| row[j])) {
            positive[i] = true;
        }
    }
    for i in 0..n {
        let (gt, o) = best_gt[i];
        if positive[i] {
            labels[i] = AnchorLabel::Positive;
            targets[i] = Some(encode(&anchors[i], &gts[gt])?);
        } else if o < NEGATIVE_OVERLAP {
            labels[i] = AnchorLabel::Negative;
        } else {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    Ok(AnchorLabeling { labels, targets })
}

/// Indices chosen for one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Set when too few candidates existed to fill the batch.
    pub short: bool,
}

impl BatchSample {
    pub fn indices(&self) -> Vec<usize> {
        self.positives.iter().chain(&self.negatives).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn choose<R: Rng>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Up to `batch · positive_fraction` positives without replacement; the rest
/// of the batch is filled with negatives.
pub fn sample_balanced<R: Rng>(
    positives: &[usize],
    negatives: &[usize],
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> BatchSample {
    let quota = (batch as f64 * positive_fraction).floor() as usize;
    let pos = choose(positives, quota, rng);
    let neg = choose(negatives, batch - pos.len(), rng);
    let short = pos.len() + neg.len() < batch;
    if short {
        log::warn!(
            "batch short: {} positives + {} negatives < {}",
            pos.len(),
            neg.len(),
            batch
        );
    }
    BatchSample {
        positives: pos,
        negatives: neg,
        short,
    }
}

pub fn sample_proposal_batch<R: Rng>(
    labeling: &AnchorLabeling,
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<BatchSample> {
    if !batch.is_multiple_of(2) {
        return Err(Error::Config(format!("proposal batch {batch} must be even")));
    }
    Ok(sample_balanced(
        &labeling.positives(),
        &labeling.negatives(),
        batch,
        positive_fraction,
        rng,
    ))
}
