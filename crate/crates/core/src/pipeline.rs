//! Single- and two-stream model wiring and the full inference procedure.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, fuse, BackboneConfig, Fusion, Stream};
use crate::classifier::{
    classifier_stage, select_proposals, ClassifierConfig, ClassifierOutputs,
    PROPOSAL_NMS_THRESHOLD,
};
use crate::dataset::{build_buffers, Buffer, Dataset, Detection, VideoSample};
use crate::error::{Error, Result};
use crate::geometry::{
    clip, decode, generate_anchors, nms, rank_by_score, AnchorConfig, Offset, ScoredSegment,
    Segment, SegmentLabel, TEMPORAL_STRIDE,
};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::proposal::{predict, tpn_features, ProposalHeadConfig, ProposalOutputs};
use crate::roi::RoiGrid;
use crate::scalar::Scalar;
use crate::tensor::kernels::softmax_rows;
use crate::tensor::{Graph, Tensor, Var};

/// Which streams run and how they are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    TwoSum,
    TwoConcat,
}

impl Mode {
    pub fn streams(self) -> Vec<Stream> {
        match self {
            Mode::Single => vec![Stream::Rgb],
            _ => vec![Stream::Rgb, Stream::Flow],
        }
    }

    pub fn fusion(self) -> Fusion {
        match self {
            Mode::TwoConcat => Fusion::Concat,
            _ => Fusion::Sum,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::TwoSum => "two_sum",
            Mode::TwoConcat => "two_concat",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "two_sum" => Ok(Mode::TwoSum),
            "two_concat" => Ok(Mode::TwoConcat),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected single, two_sum or two_concat"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// Anchor lengths in feature steps.
    pub scales: Vec<u32>,
    pub fps: f64,
    /// Channels of the proposal subnet's temporal feature map.
    pub tpn_channels: usize,
    pub roi_grid: RoiGrid,
    /// Width of the fc6/fc7 layers.
    pub hidden: usize,
    pub class_agnostic: bool,
    /// Frames per buffer.
    pub buffer_len: usize,
    /// Proposals kept after NMS while training.
    pub train_proposals: usize,
    /// Proposals kept after NMS at inference.
    pub test_proposals: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Single,
            num_classes: 3,
            backbone: BackboneConfig::desk(),
            scales: vec![2, 3, 4, 6],
            fps: 8.0,
            tpn_channels: 32,
            roi_grid: RoiGrid::desk(),
            hidden: 256,
            class_agnostic: false,
            buffer_len: 96,
            train_proposals: 2000,
            test_proposals: 300,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchor_config()?;
        RoiGrid::new(self.roi_grid.time, self.roi_grid.height, self.roi_grid.width)?;
        if self.buffer_len == 0 || !self.buffer_len.is_multiple_of(TEMPORAL_STRIDE) {
            return Err(Error::Config(format!(
                "buffer_len {} must be a positive multiple of {}",
                self.buffer_len, TEMPORAL_STRIDE
            )));
        }
        for (key, v) in [
            ("num_classes", self.num_classes),
            ("tpn_channels", self.tpn_channels),
            ("hidden", self.hidden),
            ("train_proposals", self.train_proposals),
            ("test_proposals", self.test_proposals),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        Ok(())
    }

    pub fn anchor_config(&self) -> Result<AnchorConfig> {
        AnchorConfig::new(self.scales.clone(), self.fps)
    }

    pub fn num_anchors(&self) -> usize {
        self.scales.len()
    }

    /// Channels entering the proposal subnet.
    pub fn fused_channels(&self) -> usize {
        match self.mode {
            Mode::TwoConcat => 2 * self.backbone.out_channels(),
            _ => self.backbone.out_channels(),
        }
    }

    pub fn proposal_head(&self) -> ProposalHeadConfig {
        ProposalHeadConfig {
            in_channels: self.fused_channels(),
            channels: self.tpn_channels,
            num_anchors: self.num_anchors(),
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            pooled_width: self.backbone.out_channels() * self.roi_grid.bins(),
            hidden: self.hidden,
            num_classes: self.num_classes,
            class_agnostic: self.class_agnostic,
            streams: self.mode.streams(),
            fusion: self.mode.fusion(),
        }
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh weights from `seed`. In two-stream modes the flow backbone
    /// starts as a copy of the RGB one with its first layer averaged over
    /// the colour channels.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config
            .backbone
            .init(&mut params, Stream::Rgb.prefix(), Stream::Rgb.in_channels(), &mut rng);
        if config.mode != Mode::Single {
            backbone::init_flow_from_rgb(&mut params, Stream::Rgb.prefix(), Stream::Flow.prefix())?;
        }
        config.proposal_head().init(&mut params, &mut rng);
        config.classifier().init(&mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, params): (ModelConfig, ParamStore<S>) = load_checkpoint(path)?;
        config.validate()?;
        Ok(Self { config, params })
    }
}

/// Backbone outputs per stream plus their fusion.
pub struct BackboneOutputs {
    pub features: Vec<(Stream, Var)>,
    pub fused: Var,
}

/// Runs every backbone the mode needs and fuses their `conv5b` maps.
pub fn backbone_stage<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    rgb: &Tensor<S>,
    flow: Option<&Tensor<S>>,
    frozen_layers: usize,
) -> Result<BackboneOutputs> {
    let mut features = Vec::new();
    for stream in model.config.mode.streams() {
        let input = match stream {
            Stream::Rgb => rgb,
            Stream::Flow => flow.ok_or_else(|| {
                Error::Config(format!(
                    "{} mode needs a flow input",
                    model.config.mode.as_str()
                ))
            })?,
        };
        let x = g.constant(input.clone());
        let c5 = backbone::forward(g, &model.params, stream, x, frozen_layers)?;
        features.push((stream, c5));
    }
    let mut fused = features[0].1;
    for &(_, f) in &features[1..] {
        fused = fuse(g, fused, f, model.config.mode.fusion())?;
    }
    Ok(BackboneOutputs { features, fused })
}

pub fn proposal_stage<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    fused: Var,
) -> Result<ProposalOutputs> {
    let tpn = tpn_features(g, &model.params, fused)?;
    predict(g, &model.params, tpn, model.config.num_anchors())
}

/// Decodes every anchor with its predicted offsets, clips to `[0, limit]`
/// and scores it by the softmax activity probability. Anchors whose clipped
/// interval is empty are dropped.
pub fn proposal_candidates<S: Scalar>(
    anchors: &[Segment],
    scores: &Tensor<S>,
    offsets: &Tensor<S>,
    limit: f64,
) -> Vec<ScoredSegment> {
    let probs = softmax_rows(scores.data(), 2);
    let offs = offsets.data();
    anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let o = Offset::new(offs[2 * i].as_f64(), offs[2 * i + 1].as_f64());
            clip(&decode(a, &o), limit)
                .map(|seg| ScoredSegment::proposal(seg, probs[2 * i + 1].as_f64()))
        })
        .collect()
}

/// Everything one forward pass over a buffer produces.
pub struct ForwardOutputs {
    pub backbone: BackboneOutputs,
    pub proposal: ProposalOutputs,
    /// Proposals after NMS and the top-N cut, in frames.
    pub proposals: Vec<ScoredSegment>,
    /// `None` when no proposal survived.
    pub classifier: Option<ClassifierOutputs>,
}

/// Full forward pass: backbones, fusion, proposal subnet, proposal
/// selection over the first `limit` frames, then the classification subnet
/// on each stream's own feature map.
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    rgb: &Tensor<S>,
    flow: Option<&Tensor<S>>,
    limit: f64,
    max_proposals: usize,
) -> Result<ForwardOutputs> {
    let backbone = backbone_stage(g, model, rgb, flow, 0)?;
    let proposal = proposal_stage(g, model, backbone.fused)?;
    let frames = rgb.dim(1);
    let anchors = generate_anchors(&model.config.anchor_config()?, frames)?;
    let candidates =
        proposal_candidates(&anchors, g.value(proposal.scores), g.value(proposal.offsets), limit);
    let proposals = select_proposals(&candidates, PROPOSAL_NMS_THRESHOLD, max_proposals);
    let classifier = if proposals.is_empty() {
        None
    } else {
        let segs: Vec<Segment> = proposals.iter().map(|p| p.segment).collect();
        Some(classifier_stage(
            g,
            &model.params,
            &model.config.classifier(),
            model.config.roi_grid,
            &backbone.features,
            &segs,
        )?)
    };
    Ok(ForwardOutputs {
        backbone,
        proposal,
        proposals,
        classifier,
    })
}

/// Final NMS threshold for an evaluation tIoU threshold.
pub fn final_nms_threshold(alpha: f64) -> f64 {
    alpha - 0.1
}

/// Greedy NMS run separately per class, merged and sorted by score.
pub fn per_class_nms(dets: &[ScoredSegment], threshold: f64) -> Vec<ScoredSegment> {
    let mut classes: Vec<SegmentLabel> = dets.iter().map(|d| d.label).collect();
    classes.sort_by_key(|l| match l {
        SegmentLabel::Proposal => None,
        SegmentLabel::Class(c) => Some(*c),
    });
    classes.dedup();
    let mut kept = Vec::new();
    for c in classes {
        let group: Vec<ScoredSegment> = dets.iter().copied().filter(|d| d.label == c).collect();
        kept.extend(nms(&group, threshold));
    }
    rank_by_score(&kept).into_iter().map(|i| kept[i]).collect()
}

/// Detections in buffer frames, clipped to `[0, valid_frames]`.
///
/// Each classified proposal yields one detection: its highest-scoring
/// foreground class, that class's probability as score and that class's
/// offsets. Background never produces a detection.
pub fn detect<S: Scalar>(
    model: &Model<S>,
    rgb: &Tensor<S>,
    flow: Option<&Tensor<S>>,
    valid_frames: usize,
    alpha: f64,
) -> Result<Vec<ScoredSegment>> {
    let mut g = Graph::inference();
    let limit = valid_frames as f64;
    let out = forward_graph(&mut g, model, rgb, flow, limit, model.config.test_proposals)?;
    let Some(cls) = out.classifier else {
        return Ok(Vec::new());
    };
    let c1 = model.config.num_classes + 1;
    let probs = softmax_rows(g.value(cls.logits).data(), c1);
    let offsets = g.value(cls.offsets);
    let rows = offsets.dim(1);
    let mut dets = Vec::with_capacity(out.proposals.len());
    for (i, p) in out.proposals.iter().enumerate() {
        let row = &probs[i * c1..(i + 1) * c1];
        let mut best = 1;
        for c in 2..c1 {
            if row[c] > row[best] {
                best = c;
            }
        }
        let r = if rows == 1 { 0 } else { best - 1 };
        let o = Offset::new(
            offsets.at(&[i, r, 0]).as_f64(),
            offsets.at(&[i, r, 1]).as_f64(),
        );
        if let Some(seg) = clip(&decode(&p.segment, &o), limit) {
            dets.push(ScoredSegment::class(seg, row[best].as_f64(), best - 1));
        }
    }
    Ok(per_class_nms(&dets, final_nms_threshold(alpha)))
}

/// Runs [`detect`] on every inference buffer of a video and returns
/// detections in seconds.
pub fn detect_video<S: Scalar>(
    model: &Model<S>,
    sample: &VideoSample<S>,
    alpha: f64,
) -> Result<Vec<Detection>> {
    let buffers = build_buffers(sample, model.config.buffer_len, false, false)?;
    let mut all = Vec::new();
    for b in &buffers {
        for d in detect(model, &b.rgb, Some(&b.flow), b.valid_frames, alpha)? {
            let shift = b.start_frame as f64;
            let seg = Segment::new(d.segment.center + shift, d.segment.length);
            all.push(ScoredSegment { segment: seg, ..d });
        }
    }
    if buffers.len() > 1 {
        all = per_class_nms(&all, final_nms_threshold(alpha));
    }
    Ok(all
        .into_iter()
        .map(|d| Detection {
            video_id: sample.id.clone(),
            label: match d.label {
                SegmentLabel::Class(c) => c,
                SegmentLabel::Proposal => unreachable!("detect emits classes only"),
            },
            start_sec: d.segment.start() / sample.fps,
            end_sec: d.segment.end() / sample.fps,
            score: d.score,
        })
        .collect())
}

/// Detections for every video of a dataset, in video order.
pub fn detect_dataset<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset<S>,
    alpha: f64,
) -> Result<Vec<Detection>> {
    let per_video: Vec<Result<Vec<Detection>>> = dataset
        .videos
        .par_iter()
        .map(|v| detect_video(model, v, alpha))
        .collect();
    let mut out = Vec::new();
    for d in per_video {
        out.extend(d?);
    }
    Ok(out)
}

/// Random-placement baseline: every detection keeps its video, label and
/// score but its interval is replaced by an anchor segment drawn from a
/// shuffled list of all anchors over that video's buffers, clipped to the
/// video.
pub fn random_placement<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset<S>,
    detections: &[Detection],
    seed: u64,
) -> Result<Vec<Detection>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor_cfg = model.config.anchor_config()?;
    let buffer_len = model.config.buffer_len;
    let per_buffer = generate_anchors(&anchor_cfg, buffer_len)?;
    let mut out = Vec::with_capacity(detections.len());
    for video in &dataset.videos {
        let frames = video.num_frames() as f64;
        let mut pool: Vec<Segment> = (0..video.num_frames())
            .step_by(buffer_len)
            .flat_map(|start| {
                per_buffer.iter().filter_map(move |a| {
                    clip(&Segment::new(a.center + start as f64, a.length), frames)
                })
            })
            .collect();
        if pool.is_empty() {
            continue;
        }
        pool.shuffle(&mut rng);
        let mine = detections.iter().filter(|d| d.video_id == video.id);
        for (i, d) in mine.enumerate() {
            let seg = pool[i % pool.len()];
            out.push(Detection {
                start_sec: seg.start() / video.fps,
                end_sec: seg.end() / video.fps,
                ..d.clone()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Raw input frames processed per repeat.
    pub frames: usize,
    /// Frames per second for each timed repeat.
    pub fps: Vec<f64>,
    pub mean_fps: f64,
    /// `(max − min) / mean` over repeats.
    pub spread: f64,
}

/// Times the proposal and classification stages over prepared buffers.
/// Buffer preparation and disk access are outside the timed region; one
/// untimed warm-up pass runs first.
pub fn bench<S: Scalar>(model: &Model<S>, buffers: &[Buffer<S>], repeat: usize) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    if buffers.is_empty() {
        return Err(Error::Config("bench needs at least one buffer".into()));
    }
    let run = || -> Result<()> {
        for b in buffers {
            detect(model, &b.rgb, Some(&b.flow), b.valid_frames, 0.5)?;
        }
        Ok(())
    };
    run()?;
    let frames: usize = buffers.iter().map(|b| b.valid_frames).sum();
    let mut fps = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        run()?;
        fps.push(frames as f64 / t.elapsed().as_secs_f64());
    }
    let mean_fps = fps.iter().sum::<f64>() / repeat as f64;
    let max = fps.iter().copied().fold(f64::MIN, f64::max);
    let min = fps.iter().copied().fold(f64::MAX, f64::min);
    Ok(BenchReport {
        frames,
        fps,
        mean_fps,
        spread: (max - min) / mean_fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            num_classes: 2,
            backbone: BackboneConfig {
                widths: [2, 2, 4, 4, 4],
            },
            scales: vec![1, 2],
            tpn_channels: 4,
            hidden: 4,
            buffer_len: 16,
            ..ModelConfig::default()
        }
    }

    fn input(seed: usize) -> (Tensor<f64>, Tensor<f64>) {
        let f = |n: usize| ((n * 7919 + seed * 104729) % 1000) as f64 / 1000.0;
        (
            Tensor::from_fn([3, 16, 16, 16], f),
            Tensor::from_fn([2, 15, 16, 16], |i| f(i + 17) - 0.5),
        )
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("two_sum".parse::<Mode>().unwrap(), Mode::TwoSum);
        assert!("three".parse::<Mode>().is_err());
    }

    #[test]
    fn final_threshold_is_tenth_below_alpha() {
        assert!((final_nms_threshold(0.5) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_heads_propose_anchors_with_uniform_scores() {
        let model = Model::<f64>::init(tiny(Mode::Single), 1).unwrap();
        let (rgb, _) = input(0);
        let mut g = Graph::inference();
        let out = forward_graph(&mut g, &model, &rgb, None, 16.0, 300).unwrap();
        let anchors = generate_anchors(&model.config.anchor_config().unwrap(), 16).unwrap();
        for p in &out.proposals {
            assert_eq!(p.score, 0.5);
            assert!(anchors.iter().any(|a| clip(a, 16.0) == Some(p.segment)));
        }
        let cls = out.classifier.unwrap();
        let probs = softmax_rows(g.value(cls.logits).data(), 3);
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_stream_needs_flow() {
        let model = Model::<f64>::init(tiny(Mode::TwoSum), 1).unwrap();
        let (rgb, _) = input(0);
        assert!(matches!(detect(&model, &rgb, None, 16, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn concat_keeps_logit_width() {
        let model = Model::<f64>::init(tiny(Mode::TwoConcat), 1).unwrap();
        let (rgb, flow) = input(1);
        let mut g = Graph::inference();
        let out = forward_graph(&mut g, &model, &rgb, Some(&flow), 16.0, 300).unwrap();
        assert_eq!(g.shape(out.backbone.fused)[0], 8);
        assert_eq!(g.shape(out.classifier.unwrap().logits)[1], 3);
    }

    #[test]
    fn detect_is_deterministic_and_within_bounds() {
        let model = Model::<f64>::init(tiny(Mode::TwoSum), 3).unwrap();
        let (rgb, flow) = input(2);
        let a = detect(&model, &rgb, Some(&flow), 12, 0.5).unwrap();
        let b = detect(&model, &rgb, Some(&flow), 12, 0.5).unwrap();
        assert_eq!(a, b);
        for d in &a {
            assert!(d.segment.start() >= 0.0 && d.segment.end() <= 12.0);
            assert!(matches!(d.label, SegmentLabel::Class(_)));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::<f64>::init(tiny(Mode::TwoConcat), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tckp");
        model.save(&path).unwrap();
        let back = Model::<f64>::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert!(back.params.bit_equal(&model.params));
    }
}
