//! Joint optimization of both subnets: losses, SGD with momentum and weight
//! decay, flat key=value configuration and the epoch loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, LAYERS};
use crate::classifier::{
    assign_proposal_labels, class_offset_indices, classifier_stage, ohem_select,
    sample_cls_batch, select_proposals, ReadOnlyHead, FOREGROUND_FRACTION,
    PROPOSAL_NMS_THRESHOLD,
};
use crate::config::{join, parse_key_values, parse_list, parse_value};
use crate::dataset::{build_buffers, Buffer, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, Offset, ScoredSegment, Segment};
use crate::params::ParamStore;
use crate::pipeline::{backbone_stage, proposal_candidates, proposal_stage, Mode, Model, ModelConfig};
use crate::proposal::{assign_anchor_labels, sample_proposal_batch, POSITIVE_FRACTION};
use crate::roi::{roi_pool_forward, RoiGrid};
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Smooth L1 summed over both coordinates and averaged over rows; 0 for no
/// rows.
pub fn smooth_l1(pred: &[Offset], target: &[Offset]) -> f64 {
    assert_eq!(pred.len(), target.len(), "smooth_l1 needs equal lengths");
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            kernels::smooth_l1(p.center - t.center) + kernels::smooth_l1(p.log_length - t.log_length)
        })
        .sum();
    sum / pred.len() as f64
}

/// The two terms of one subnet's objective and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
}

/// Mean softmax cross-entropy over the batch plus `λ` times the smooth L1
/// over foreground rows divided by their count. With no foreground rows the
/// regression term is 0.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    labels: &[usize],
    reg_pred: Var,
    reg_targets: &Tensor<S>,
    fg_mask: &[bool],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if fg_mask.len() != labels.len() {
        return Err(Error::dim(
            "joint_loss",
            "rows",
            format!("{} labels vs {} mask entries", labels.len(), fg_mask.len()),
        ));
    }
    let cls = g.softmax_cross_entropy(logits, labels)?;
    let weights: Vec<S> = fg_mask.iter().map(|&f| if f { S::one() } else { S::zero() }).collect();
    let n_reg = fg_mask.iter().filter(|&&f| f).count();
    let reg = g.smooth_l1(reg_pred, reg_targets, &weights, S::from_usize(n_reg).unwrap())?;
    let weighted = g.scale(reg, S::from_f64_lossy(cfg.lambda))?;
    let total = g.add(cls, weighted)?;
    Ok(LossTerms { cls, reg, total })
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[S]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }
}

/// Updates every parameter that has a gradient. All gradients are checked
/// before anything changes, so a non-finite gradient leaves parameters and
/// velocities untouched.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Gradients<S>,
    state: &mut OptimState<S>,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "sgd_step",
                "*",
                format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            let max_abs = g
                .data()
                .iter()
                .map(|v| v.as_f64().abs())
                .fold(0.0, |m: f64, v| if v.is_nan() || v > m { v } else { m });
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                max_abs,
            });
        }
    }
    let mu = S::from_f64_lossy(state.momentum);
    let wd = S::from_f64_lossy(state.weight_decay);
    let lr = S::from_f64_lossy(state.lr);
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![S::zero(); g.len()]);
        let mut w = p.data().to_vec();
        for ((vi, wi), &gi) in v.iter_mut().zip(w.iter_mut()).zip(g.data()) {
            *vi = mu * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
        params.insert(name.clone(), Tensor::new(p.shape().to_vec(), w)?);
    }
    Ok(())
}

/// How the classification batch is drawn from the labeled proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Random draw with a fixed foreground fraction.
    Sample { batch: usize },
    /// Highest-loss proposals under the read-only head.
    Ohem { top_n: usize },
    /// Every proposal.
    All,
}

/// Per-step settings shared by every buffer.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub loss: LossConfig,
    pub proposal_batch: usize,
    pub selection: Selection,
    pub frozen_layers: usize,
}

/// The four loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub prop_cls: f64,
    pub prop_reg: f64,
    pub cls_cls: f64,
    pub cls_reg: f64,
    pub total: f64,
}

/// A recorded forward pass for one buffer with its scalar objective.
pub struct StepGraph<S: Scalar> {
    pub graph: Graph<S>,
    pub total: Var,
    pub losses: StepLosses,
    /// Proposal indices fed to the classification subnet.
    pub selected: Vec<usize>,
}

/// Records the full training objective for one buffer: proposal-subnet loss
/// on a balanced anchor batch plus classification-subnet loss on the
/// selected proposals. Proposals are constants for the second stage.
pub fn step_graph<S: Scalar, R: Rng>(
    model: &Model<S>,
    buffer: &Buffer<S>,
    cfg: &StepConfig,
    readonly: Option<&ReadOnlyHead<S>>,
    rng: &mut R,
) -> Result<StepGraph<S>> {
    step_graph_with(model, buffer, cfg, readonly, None, rng)
}

/// [`step_graph`] with the classification subnet's proposals optionally
/// supplied by the caller instead of derived from the proposal subnet.
pub fn step_graph_with<S: Scalar, R: Rng>(
    model: &Model<S>,
    buffer: &Buffer<S>,
    cfg: &StepConfig,
    readonly: Option<&ReadOnlyHead<S>>,
    fixed_proposals: Option<&[ScoredSegment]>,
    rng: &mut R,
) -> Result<StepGraph<S>> {
    let mut g = Graph::new();
    let bb = backbone_stage(&mut g, model, &buffer.rgb, Some(&buffer.flow), cfg.frozen_layers)?;
    let prop = proposal_stage(&mut g, model, bb.fused)?;
    let frames = buffer.len();
    let anchors = generate_anchors(&model.config.anchor_config()?, frames)?;
    let gts: Vec<Segment> = buffer.segments.iter().map(|s| s.segment).collect();

    // Proposal subnet.
    let labeling = assign_anchor_labels(&anchors, &gts)?;
    let batch = sample_proposal_batch(&labeling, cfg.proposal_batch, POSITIVE_FRACTION, rng)?;
    let idx = batch.indices();
    let n = idx.len();
    let pair_idx: Vec<usize> = idx.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    let logits = g.gather(prop.scores, pair_idx.clone(), &[n, 2])?;
    let offsets = g.gather(prop.offsets, pair_idx, &[n, 2])?;
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i < batch.positives.len())).collect();
    let fg: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let targets = offset_targets(idx.iter().map(|&i| labeling.targets[i]))?;
    let prop_terms = joint_loss(&mut g, logits, &labels, offsets, &targets, &fg, &cfg.loss)?;

    // Proposals from detached predictions.
    let candidates = proposal_candidates(
        &anchors,
        g.value(prop.scores),
        g.value(prop.offsets),
        buffer.valid_frames as f64,
    );
    let proposals = match fixed_proposals {
        Some(p) => p.to_vec(),
        None => select_proposals(&candidates, PROPOSAL_NMS_THRESHOLD, model.config.train_proposals),
    };
    let segs: Vec<Segment> = proposals.iter().map(|p| p.segment).collect();
    let gt_labeled: Vec<(usize, Segment)> =
        buffer.segments.iter().map(|s| (s.label, s.segment)).collect();
    let plabels = assign_proposal_labels(&segs, &gt_labeled)?;
    let ccfg = model.config.classifier();
    let selected = match cfg.selection {
        Selection::All => (0..segs.len()).collect(),
        Selection::Sample { batch } => {
            sample_cls_batch(&plabels, batch, FOREGROUND_FRACTION, rng).indices()
        }
        Selection::Ohem { top_n } => {
            let head = readonly
                .ok_or_else(|| Error::Graph("hard example mining needs a read-only head".into()))?;
            let mut pooled = Vec::new();
            for &(stream, feat) in &bb.features {
                pooled.push((
                    stream,
                    pool_values(g.value(feat), &segs, model.config.roi_grid)?,
                ));
            }
            ohem_select(head, &ccfg, &pooled, &plabels, top_n)?
        }
    };

    // Classification subnet.
    let (cls_cls, cls_reg, cls_total) = if selected.is_empty() {
        let z = g.constant(Tensor::scalar(S::zero()));
        (z, z, z)
    } else {
        let chosen: Vec<Segment> = selected.iter().map(|&i| segs[i]).collect();
        let sub = plabels.subset(&selected);
        let out = classifier_stage(
            &mut g,
            &model.params,
            &ccfg,
            model.config.roi_grid,
            &bb.features,
            &chosen,
        )?;
        let m = chosen.len();
        let rows = g.shape(out.offsets)[1];
        let picked = g.gather(out.offsets, class_offset_indices(&sub.labels, rows), &[m, 2])?;
        let fg: Vec<bool> = sub.labels.iter().map(|&l| l > 0).collect();
        let targets = offset_targets(sub.targets.iter().copied())?;
        let t = joint_loss(&mut g, out.logits, &sub.labels, picked, &targets, &fg, &cfg.loss)?;
        (t.cls, t.reg, t.total)
    };
    let total = g.add(prop_terms.total, cls_total)?;
    let item = |g: &Graph<S>, v: Var| g.value(v).item().as_f64();
    let losses = StepLosses {
        prop_cls: item(&g, prop_terms.cls),
        prop_reg: item(&g, prop_terms.reg),
        cls_cls: item(&g, cls_cls),
        cls_reg: item(&g, cls_reg),
        total: item(&g, total),
    };
    Ok(StepGraph {
        graph: g,
        total,
        losses,
        selected,
    })
}

fn offset_targets<S: Scalar>(targets: impl Iterator<Item = Option<Offset>>) -> Result<Tensor<S>> {
    let flat: Vec<f64> = targets
        .flat_map(|t| {
            let t = t.unwrap_or_default();
            [t.center, t.log_length]
        })
        .collect();
    Tensor::from_f64([flat.len() / 2, 2], &flat)
}

/// RoI-pooled values `[N, C·bins]` without recording anything.
fn pool_values<S: Scalar>(feat: &Tensor<S>, segs: &[Segment], grid: RoiGrid) -> Result<Tensor<S>> {
    let width = feat.dim(0) * grid.bins();
    let mut values = Vec::with_capacity(segs.len() * width);
    for s in segs {
        values.extend(roi_pool_forward(feat, s, grid)?.0);
    }
    Tensor::new([segs.len(), width], values)
}

/// One optimization step on one buffer. A read-only head is synced with
/// the live weights before the forward pass and after the update.
pub fn train_step<S: Scalar, R: Rng>(
    model: &mut Model<S>,
    buffer: &Buffer<S>,
    cfg: &StepConfig,
    opt: &mut OptimState<S>,
    readonly: Option<&mut ReadOnlyHead<S>>,
    rng: &mut R,
) -> Result<StepLosses> {
    let ccfg = model.config.classifier();
    let mut readonly = readonly;
    if let Some(h) = readonly.as_deref_mut() {
        h.sync(&model.params, &ccfg)?;
    }
    let step = step_graph(model, buffer, cfg, readonly.as_deref(), rng)?;
    let grads = step.graph.backward(step.total)?;
    sgd_step(&mut model.params, &grads, opt)?;
    if let Some(h) = readonly {
        h.sync(&model.params, &ccfg)?;
    }
    Ok(step.losses)
}

/// Training run settings, read from a flat `key=value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub train_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub dtype: String,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Epoch from which `lr · lr_step_factor` is used.
    pub lr_step_epoch: usize,
    pub lr_step_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub mode: Mode,
    pub ohem: bool,
    pub ohem_top_n: usize,
    pub two_way: bool,
    pub flip: bool,
    /// Leading backbone conv layers kept fixed.
    pub freeze_layers: usize,
    pub buffer_len: usize,
    pub scales: Vec<u32>,
    pub widths: [usize; 5],
    pub tpn_channels: usize,
    pub hidden: usize,
    pub roi_grid: RoiGrid,
    pub class_agnostic: bool,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub proposal_batch: usize,
    pub cls_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            train_manifest: None,
            out_dir: PathBuf::from("run"),
            dtype: "f32".into(),
            seed: 7,
            epochs: 15,
            lr: 0.01,
            lr_step_epoch: 10,
            lr_step_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            lambda: 1.0,
            mode: m.mode,
            ohem: false,
            ohem_top_n: crate::classifier::OHEM_TOP_N,
            two_way: false,
            flip: false,
            freeze_layers: 0,
            buffer_len: m.buffer_len,
            scales: m.scales,
            widths: m.backbone.widths,
            tpn_channels: m.tpn_channels,
            hidden: m.hidden,
            roi_grid: m.roi_grid,
            class_agnostic: m.class_agnostic,
            train_proposals: m.train_proposals,
            test_proposals: m.test_proposals,
            proposal_batch: crate::proposal::BATCH_SIZE,
            cls_batch: crate::classifier::BATCH_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_text(&text)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.train_manifest {
            if m.is_relative() {
                cfg.train_manifest = Some(base.join(m));
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "train_manifest" => self.train_manifest = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "dtype" => self.dtype = v.to_string(),
            "seed" => self.seed = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_step_epoch" => self.lr_step_epoch = parse_value(key, v)?,
            "lr_step_factor" => self.lr_step_factor = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "ohem" => self.ohem = parse_value(key, v)?,
            "ohem_top_n" => self.ohem_top_n = parse_value(key, v)?,
            "two_way" => self.two_way = parse_value(key, v)?,
            "flip" => self.flip = parse_value(key, v)?,
            "freeze_layers" => self.freeze_layers = parse_value(key, v)?,
            "buffer_len" => self.buffer_len = parse_value(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::Config("widths: expected 5 comma-separated values".into()))?;
            }
            "tpn_channels" => self.tpn_channels = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "roi_grid" => {
                let g: Vec<usize> = parse_list(key, v)?;
                let [t, h, w]: [usize; 3] = g
                    .try_into()
                    .map_err(|_| Error::Config("roi_grid: expected time,height,width".into()))?;
                self.roi_grid = RoiGrid::new(t, h, w)?;
            }
            "class_agnostic" => self.class_agnostic = parse_value(key, v)?,
            "train_proposals" => self.train_proposals = parse_value(key, v)?,
            "test_proposals" => self.test_proposals = parse_value(key, v)?,
            "proposal_batch" => self.proposal_batch = parse_value(key, v)?,
            "cls_batch" => self.cls_batch = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Renders every key in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(m) = &self.train_manifest {
            writeln!(s, "train_manifest={}", m.display()).unwrap();
        }
        let g = self.roi_grid;
        for (k, v) in [
            ("out_dir", self.out_dir.display().to_string()),
            ("dtype", self.dtype.clone()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_step_epoch", self.lr_step_epoch.to_string()),
            ("lr_step_factor", self.lr_step_factor.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda", self.lambda.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("ohem", self.ohem.to_string()),
            ("ohem_top_n", self.ohem_top_n.to_string()),
            ("two_way", self.two_way.to_string()),
            ("flip", self.flip.to_string()),
            ("freeze_layers", self.freeze_layers.to_string()),
            ("buffer_len", self.buffer_len.to_string()),
            ("scales", join(&self.scales)),
            ("widths", join(&self.widths)),
            ("tpn_channels", self.tpn_channels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("roi_grid", join(&[g.time, g.height, g.width])),
            ("class_agnostic", self.class_agnostic.to_string()),
            ("train_proposals", self.train_proposals.to_string()),
            ("test_proposals", self.test_proposals.to_string()),
            ("proposal_batch", self.proposal_batch.to_string()),
            ("cls_batch", self.cls_batch.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    /// Rejects contradictory settings before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32" && self.dtype != "f64" {
            return Err(Error::Config(format!("dtype must be f32 or f64, got {:?}", self.dtype)));
        }
        LossConfig { lambda: self.lambda }.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        for (k, v) in [
            ("lr", self.lr),
            ("lr_step_factor", self.lr_step_factor),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        if self.freeze_layers > LAYERS.len() {
            return Err(Error::Config(format!(
                "freeze_layers {} exceeds the {} backbone conv layers",
                self.freeze_layers,
                LAYERS.len()
            )));
        }
        if self.proposal_batch == 0 || !self.proposal_batch.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "proposal_batch {} must be positive and even",
                self.proposal_batch
            )));
        }
        if self.cls_batch == 0 || self.ohem_top_n == 0 {
            return Err(Error::Config("cls_batch and ohem_top_n must be positive".into()));
        }
        self.model_config(1, 1.0).validate()
    }

    pub fn model_config(&self, num_classes: usize, fps: f64) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            num_classes,
            backbone: BackboneConfig { widths: self.widths },
            scales: self.scales.clone(),
            fps,
            tpn_channels: self.tpn_channels,
            roi_grid: self.roi_grid,
            hidden: self.hidden,
            class_agnostic: self.class_agnostic,
            buffer_len: self.buffer_len,
            train_proposals: self.train_proposals,
            test_proposals: self.test_proposals,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            loss: LossConfig { lambda: self.lambda },
            proposal_batch: self.proposal_batch,
            selection: if self.ohem {
                Selection::Ohem {
                    top_n: self.ohem_top_n,
                }
            } else {
                Selection::Sample {
                    batch: self.cls_batch,
                }
            },
            frozen_layers: self.freeze_layers,
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_step_epoch {
            self.lr * self.lr_step_factor
        } else {
            self.lr
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

pub const LOG_HEADER: &str = "iteration,lr,prop_cls_loss,prop_reg_loss,cls_cls_loss,cls_reg_loss,total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let l = r.losses;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration, r.lr, l.prop_cls, l.prop_reg, l.cls_cls, l.cls_reg, l.total
        )
        .unwrap();
    }
    s
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub log: Vec<LogRow>,
}

/// Trains a fresh model on `dataset`. With an output directory, writes a
/// checkpoint after every epoch, `model.tckp` at the end and the log as
/// `train_log.csv`. Fully determined by the config's seed.
pub fn train<S: Scalar>(
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    train_with(dataset, cfg, out_dir, |_, _| Ok(()))
}

/// [`train`] with a hook called after every epoch with the zero-based
/// epoch and the current model.
pub fn train_with<S: Scalar>(
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, &Model<S>) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let fps = dataset.videos[0].fps;
    let mut model = Model::init(cfg.model_config(dataset.num_classes(), fps), cfg.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let step_cfg = cfg.step_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut readonly = if cfg.ohem {
        Some(ReadOnlyHead::new(&model.params, &model.config.classifier())?)
    } else {
        None
    };
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
        order.shuffle(&mut rng);
        // Buffers for upcoming videos are prepared on a second thread while
        // the current step runs.
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Vec<Buffer<S>>>>(2);
            let videos = &dataset.videos;
            let order = &order;
            scope.spawn(move || {
                for &i in order {
                    let b = build_buffers(&videos[i], cfg.buffer_len, cfg.two_way, cfg.flip);
                    if tx.send(b).is_err() {
                        break;
                    }
                }
            });
            for buffers in rx {
                for b in buffers? {
                    let losses =
                        train_step(&mut model, &b, &step_cfg, &mut opt, readonly.as_mut(), &mut rng)?;
                    let row = LogRow {
                        iteration: log.len() + 1,
                        lr: opt.lr,
                        losses,
                    };
                    log::debug!("epoch {} iter {} total {:.4}", epoch + 1, row.iteration, losses.total);
                    log.push(row);
                }
            }
            Ok(())
        })?;
        log::info!(
            "epoch {}/{} done, last total loss {:.4}",
            epoch + 1,
            cfg.epochs,
            log.last().map(|r| r.losses.total).unwrap_or(0.0)
        );
        if let Some(dir) = out_dir {
            model.save(dir.join(format!("checkpoint_epoch{:02}.tckp", epoch + 1)))?;
        }
        on_epoch(epoch, &model)?;
    }
    if let Some(dir) = out_dir {
        model.save(dir.join("model.tckp"))?;
        let path = dir.join("train_log.csv");
        fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { model, log })
}
