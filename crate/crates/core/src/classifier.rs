//! Activity classification subnet: proposal selection, labeling, sampling,
//! the fully connected stack with class and regression outputs, and online
//! hard example mining through a read-only copy of the head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{fuse, Fusion, Stream};
use crate::error::{Error, Result};
use crate::geometry::{encode, nms, tiou, Offset, ScoredSegment, Segment};
use crate::params::{fan_in_uniform, ParamStore};
use crate::proposal::{argmax_first, sample_balanced, BatchSample};
use crate::roi::{roi_pool_batch, RoiGrid};
use crate::scalar::Scalar;
use crate::tensor::kernels::{cross_entropy_rows, smooth_l1};
use crate::tensor::{Graph, Tensor, Var};

pub const PROPOSAL_NMS_THRESHOLD: f64 = 0.7;
/// tIoU above which a proposal takes the class of its best ground truth.
pub const FOREGROUND_OVERLAP: f64 = 0.5;
pub const BATCH_SIZE: usize = 128;
pub const FOREGROUND_FRACTION: f64 = 0.25;
pub const OHEM_TOP_N: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Width of one stream's flattened pooled features.
    pub pooled_width: usize,
    pub hidden: usize,
    /// Foreground classes; logits have one extra background column.
    pub num_classes: usize,
    /// One shared offset pair instead of one per class.
    pub class_agnostic: bool,
    pub streams: Vec<Stream>,
    /// How stream responses are combined before the final layers.
    pub fusion: Fusion,
}

impl ClassifierConfig {
    pub fn fused_width(&self) -> usize {
        match (self.streams.len(), self.fusion) {
            (1, _) | (_, Fusion::Sum) => self.hidden,
            (n, Fusion::Concat) => self.hidden * n,
        }
    }

    pub fn offset_rows(&self) -> usize {
        if self.class_agnostic {
            1
        } else {
            self.num_classes
        }
    }

    /// Final layers start at zero: uniform class scores, zero offsets.
    pub fn init<S: Scalar, R: Rng>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        for s in &self.streams {
            let p = s.prefix();
            store.insert(
                format!("cls.{p}.fc6.weight"),
                fan_in_uniform([self.pooled_width, self.hidden], self.pooled_width, rng),
            );
            store.insert(format!("cls.{p}.fc6.bias"), Tensor::zeros([self.hidden]));
            store.insert(
                format!("cls.{p}.fc7.weight"),
                fan_in_uniform([self.hidden, self.hidden], self.hidden, rng),
            );
            store.insert(format!("cls.{p}.fc7.bias"), Tensor::zeros([self.hidden]));
        }
        let f = self.fused_width();
        store.insert("cls.score.weight", Tensor::zeros([f, self.num_classes + 1]));
        store.insert("cls.score.bias", Tensor::zeros([self.num_classes + 1]));
        store.insert("cls.bbox.weight", Tensor::zeros([f, 2 * self.offset_rows()]));
        store.insert("cls.bbox.bias", Tensor::zeros([2 * self.offset_rows()]));
    }

    /// Names of every classifier parameter.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for s in &self.streams {
            for layer in ["fc6", "fc7"] {
                for kind in ["weight", "bias"] {
                    names.push(format!("cls.{}.{layer}.{kind}", s.prefix()));
                }
            }
        }
        for layer in ["score", "bbox"] {
            for kind in ["weight", "bias"] {
                names.push(format!("cls.{layer}.{kind}"));
            }
        }
        names
    }
}

/// Greedy NMS at `threshold`, then the `max_n` best survivors.
pub fn select_proposals(
    scored: &[ScoredSegment],
    threshold: f64,
    max_n: usize,
) -> Vec<ScoredSegment> {
    let mut kept = nms(scored, threshold);
    kept.truncate(max_n);
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalLabeling {
    /// 0 is background, `c + 1` is foreground class `c`.
    pub labels: Vec<usize>,
    pub targets: Vec<Option<Offset>>,
}

impl ProposalLabeling {
    pub fn foreground(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] > 0).collect()
    }

    pub fn background(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 0).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// A proposal takes the class of its highest-tIoU ground truth when that
/// tIoU exceeds 0.5; otherwise it is background.
pub fn assign_proposal_labels(
    proposals: &[Segment],
    gts: &[(usize, Segment)],
) -> Result<ProposalLabeling> {
    let mut labels = vec![0; proposals.len()];
    let mut targets = vec![None; proposals.len()];
    for (i, p) in proposals.iter().enumerate() {
        if let Some((j, o)) = argmax_first(gts.iter().map(|(_, g)| tiou(p, g))) {
            if o > FOREGROUND_OVERLAP {
                labels[i] = gts[j].0 + 1;
                targets[i] = Some(encode(p, &gts[j].1)?);
            }
        }
    }
    Ok(ProposalLabeling { labels, targets })
}

/// Up to `batch · foreground_fraction` foreground proposals, the rest
/// background.
pub fn sample_cls_batch<R: Rng>(
    labeling: &ProposalLabeling,
    batch: usize,
    foreground_fraction: f64,
    rng: &mut R,
) -> BatchSample {
    sample_balanced(
        &labeling.foreground(),
        &labeling.background(),
        batch,
        foreground_fraction,
        rng,
    )
}

/// `[N, C+1]` logits and `[N, R, 2]` offsets (`R` = classes, or 1 when
/// class-agnostic).
pub struct ClassifierOutputs {
    pub logits: Var,
    pub offsets: Var,
}

/// fc6 → ReLU → fc7 → ReLU for one stream.
pub fn stream_features<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    stream: Stream,
    pooled: Var,
) -> Result<Var> {
    let p = stream.prefix();
    let mut x = pooled;
    for layer in ["fc6", "fc7"] {
        let w = params.var(g, &format!("cls.{p}.{layer}.weight"))?;
        let b = params.var(g, &format!("cls.{p}.{layer}.bias"))?;
        x = g.linear(x, w, b)?;
        x = g.relu(x)?;
    }
    Ok(x)
}

/// Final class and regression layers on fused features.
pub fn classify<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    cfg: &ClassifierConfig,
    fused: Var,
) -> Result<ClassifierOutputs> {
    let width = g.shape(fused)[1];
    if width != cfg.fused_width() {
        return Err(Error::dim(
            "classify",
            "width",
            format!("features have width {}, head expects {}", width, cfg.fused_width()),
        ));
    }
    let n = g.shape(fused)[0];
    let w = params.var(g, "cls.score.weight")?;
    let b = params.var(g, "cls.score.bias")?;
    let logits = g.linear(fused, w, b)?;
    let w = params.var(g, "cls.bbox.weight")?;
    let b = params.var(g, "cls.bbox.bias")?;
    let offsets = g.linear(fused, w, b)?;
    let offsets = g.reshape(offsets, &[n, cfg.offset_rows(), 2])?;
    Ok(ClassifierOutputs { logits, offsets })
}

/// The whole classification stage: RoI pooling on each stream's own
/// feature map, per-stream FC stacks, fusion, final layers.
pub fn classifier_stage<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    cfg: &ClassifierConfig,
    grid: RoiGrid,
    features: &[(Stream, Var)],
    proposals: &[Segment],
) -> Result<ClassifierOutputs> {
    if features.len() != cfg.streams.len() {
        return Err(Error::Graph(format!(
            "classifier expects {} streams, got {}",
            cfg.streams.len(),
            features.len()
        )));
    }
    let mut fused: Option<Var> = None;
    for &(stream, feat) in features {
        let pooled = roi_pool_batch(g, feat, proposals, grid)?;
        let h = stream_features(g, params, stream, pooled)?;
        fused = Some(match fused {
            None => h,
            Some(acc) => fuse(g, acc, h, cfg.fusion)?,
        });
    }
    let fused = fused.ok_or_else(|| Error::Graph("classifier needs at least one stream".into()))?;
    classify(g, params, cfg, fused)
}

/// Flat indices into `[N, R, 2]` offsets picking, for each row, the pair of
/// that row's class (class 0's pair for background rows).
pub fn class_offset_indices(labels: &[usize], rows_per_item: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| {
            let r = if rows_per_item == 1 { 0 } else { l.saturating_sub(1) };
            let base = (i * rows_per_item + r) * 2;
            [base, base + 1]
        })
        .collect()
}

/// Per-proposal classification loss plus, for foreground proposals, the
/// regression loss of the labeled class.
pub fn proposal_losses<S: Scalar>(
    logits: &Tensor<S>,
    offsets: &Tensor<S>,
    labeling: &ProposalLabeling,
) -> Result<Vec<f64>> {
    let classes = logits.dim(1);
    let rows = offsets.dim(1);
    let ce = cross_entropy_rows(logits.data(), &labeling.labels, classes)?;
    let idx = class_offset_indices(&labeling.labels, rows);
    Ok(ce
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut loss = c.as_f64();
            if let Some(t) = labeling.targets[i] {
                let dc = offsets.data()[idx[2 * i]].as_f64() - t.center;
                let dl = offsets.data()[idx[2 * i + 1]].as_f64() - t.log_length;
                loss += smooth_l1(dc) + smooth_l1(dl);
            }
            loss
        })
        .collect())
}

/// Indices of the `top_n` largest losses, descending, stable on ties.
pub fn top_by_loss(losses: &[f64], top_n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    order.truncate(top_n);
    order
}

/// Weight-shared, forward-only copy of the classifier used to rank
/// proposals by loss.
#[derive(Debug, Clone)]
pub struct ReadOnlyHead<S: Scalar> {
    params: ParamStore<S>,
}

impl<S: Scalar> ReadOnlyHead<S> {
    /// Shares the live head's tensors (no copy).
    pub fn new(live: &ParamStore<S>, cfg: &ClassifierConfig) -> Result<Self> {
        let mut head = Self {
            params: ParamStore::new(),
        };
        head.sync(live, cfg)?;
        Ok(head)
    }

    pub fn sync(&mut self, live: &ParamStore<S>, cfg: &ClassifierConfig) -> Result<()> {
        for name in cfg.param_names() {
            self.params.insert(name.clone(), live.get(&name)?.clone());
        }
        Ok(())
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    /// Per-proposal losses from already pooled per-stream features
    /// (`[N, pooled_width]` each). Nothing is recorded for backward.
    pub fn losses(
        &self,
        cfg: &ClassifierConfig,
        pooled: &[(Stream, Tensor<S>)],
        labeling: &ProposalLabeling,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let mut fused: Option<Var> = None;
        for (stream, p) in pooled {
            let x = g.constant(p.clone());
            let h = stream_features(&mut g, &self.params, *stream, x)?;
            fused = Some(match fused {
                None => h,
                Some(acc) => fuse(&mut g, acc, h, cfg.fusion)?,
            });
        }
        let fused = fused.ok_or_else(|| Error::Graph("no pooled features".into()))?;
        let out = classify(&mut g, &self.params, cfg, fused)?;
        proposal_losses(g.value(out.logits), g.value(out.offsets), labeling)
    }
}

/// Ranks every proposal by its read-only loss and keeps the `top_n` hardest.
pub fn ohem_select<S: Scalar>(
    readonly: &ReadOnlyHead<S>,
    cfg: &ClassifierConfig,
    pooled: &[(Stream, Tensor<S>)],
    labeling: &ProposalLabeling,
    top_n: usize,
) -> Result<Vec<usize>> {
    let losses = readonly.losses(cfg, pooled, labeling)?;
    Ok(top_by_loss(&losses, top_n))
}
