#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempo_core::geometry::{Offset, ScoredSegment, Segment};
use tempo_core::backbone::BackboneConfig;
use tempo_core::dataset::{build_buffers, Annotation, Buffer, VideoSample};
use tempo_core::params::ParamStore;
use tempo_core::pipeline::{Mode, Model, ModelConfig};
use tempo_core::roi::RoiGrid;
use tempo_core::train::{step_graph_with, Selection, StepConfig};
use tempo_core::proposal::{AnchorLabel, AnchorLabeling};
use tempo_core::{Graph64, Result, Tensor64, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `Σ out ⊙ r` for a fixed random weighting `r`.
pub fn readout(g: &mut Graph64, out: Var, r: &Tensor64) -> Result<Var> {
    let w = g.constant(r.clone());
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Builds `f` on the given inputs (registered as named parameters) and
/// compares every analytic partial derivative with a central difference.
/// At most `max_coords` coordinates per input are probed, chosen at random.
/// Returns the largest relative error.
pub fn grad_check(
    inputs: &[(&str, Tensor64)],
    max_coords: usize,
    seed: u64,
    f: impl Fn(&mut Graph64, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |values: &[Tensor64]| -> f64 {
        let mut g = Graph64::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((name, _), v)| g.param(name, v.clone()))
            .collect();
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|(n, t)| g.param(n, t.clone())).collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut r = rng(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(name).expect("gradient present");
        let mut coords: Vec<usize> = (0..t.len()).collect();
        if coords.len() > max_coords {
            coords = rand::seq::index::sample(&mut r, t.len(), max_coords).into_vec();
        }
        for i in coords {
            let mut values: Vec<Tensor64> = inputs.iter().map(|(_, t)| t.clone()).collect();
            let mut plus = t.data().to_vec();
            plus[i] += h;
            values[k] = Tensor64::new(t.shape().to_vec(), plus).unwrap();
            let fp = eval(&values);
            let mut minus = t.data().to_vec();
            minus[i] -= h;
            values[k] = Tensor64::new(t.shape().to_vec(), minus).unwrap();
            let fm = eval(&values);
            worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}

// Oracles written directly from the rules, without the library's helpers.

pub fn bounds(s: &Segment) -> (f64, f64) {
    (s.center - s.length / 2.0, s.center + s.length / 2.0)
}

pub fn overlap(a: &Segment, b: &Segment) -> f64 {
    let (a0, a1) = bounds(a);
    let (b0, b1) = bounds(b);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn offset_oracle(anchor: &Segment, gt: &Segment) -> Offset {
    Offset::new(
        (gt.center - anchor.center) / anchor.length,
        (gt.length / anchor.length).ln(),
    )
}

pub fn random_segment(rng: &mut impl Rng, extent: f64) -> Segment {
    let a = rng.gen_range(0.0..extent);
    let b = rng.gen_range(0.0..extent);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    Segment::from_bounds(lo, hi.max(lo + 0.5))
}

/// Kept indices, in selection order, by repeated scans for the best
/// unsuppressed item.
pub fn nms_oracle(items: &[ScoredSegment], threshold: f64) -> Vec<usize> {
    let n = items.len();
    let mut alive = vec![true; n];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if alive[i] && best.is_none_or(|b| items[i].score > items[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..n {
            if alive[j] && overlap(&items[b].segment, &items[j].segment) > threshold {
                alive[j] = false;
            }
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleLabel {
    Pos,
    Neg,
    Ignore,
}

/// Anchor labels by the rule: positive above 0.7 or best anchor of some gt,
/// negative below 0.3 with every gt, ignored otherwise.
pub fn anchor_label_oracle(anchors: &[Segment], gts: &[Segment]) -> Vec<(OracleLabel, Option<Offset>)> {
    let mut best_anchor_of_gt = Vec::new();
    for g in gts {
        let mut best = 0;
        for (i, a) in anchors.iter().enumerate() {
            if overlap(a, g) > overlap(&anchors[best], g) {
                best = i;
            }
        }
        best_anchor_of_gt.push(best);
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if gts.is_empty() {
                return (OracleLabel::Neg, None);
            }
            let mut best_gt = 0;
            for j in 1..gts.len() {
                if overlap(a, &gts[j]) > overlap(a, &gts[best_gt]) {
                    best_gt = j;
                }
            }
            let max = overlap(a, &gts[best_gt]);
            if max > 0.7 || best_anchor_of_gt.contains(&i) {
                (OracleLabel::Pos, Some(offset_oracle(a, &gts[best_gt])))
            } else if max < 0.3 {
                (OracleLabel::Neg, None)
            } else {
                (OracleLabel::Ignore, None)
            }
        })
        .collect()
}

/// `(label, target)` per proposal: the class of the best gt above 0.5, else 0.
pub fn proposal_label_oracle(props: &[Segment], gts: &[(usize, Segment)]) -> Vec<(usize, Option<Offset>)> {
    props
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (_, g)) in gts.iter().enumerate() {
                let o = overlap(p, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o > 0.5 => (gts[j].0 + 1, Some(offset_oracle(p, &gts[j].1))),
                _ => (0, None),
            }
        })
        .collect()
}

/// `k` rounds of "take the largest remaining, lowest index first".
pub fn top_k_oracle(losses: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; losses.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(losses.len()) {
        let mut best: Option<usize> = None;
        for i in 0..losses.len() {
            if !taken[i] && best.is_none_or(|b| losses[i] > losses[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// For each detection in order: scan gts from highest tIoU down and take the
/// first unmatched one at or above `alpha`.
pub fn match_oracle(dets: &[Segment], gts: &[Segment], alpha: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut order: Vec<usize> = (0..gts.len()).collect();
            order.sort_by(|&a, &b| overlap(d, &gts[b]).partial_cmp(&overlap(d, &gts[a])).unwrap());
            for j in order {
                if overlap(d, &gts[j]) < alpha {
                    break;
                }
                if !used[j] {
                    used[j] = true;
                    return true;
                }
            }
            false
        })
        .collect()
}

/// Area under the monotone precision envelope, integrated over recall steps.
pub fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        rec.push(tp / num_gt as f64);
        prec.push(tp / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut area = 0.0;
    for i in 1..rec.len() {
        area += (rec[i] - rec[i - 1]) * prec[i];
    }
    area
}

/// Mean over budgets 1..=100 of recall averaged over videos with ground
/// truth and over the ten thresholds, each budget matched from scratch.
pub fn ar_an_oracle(
    proposals: &BTreeMap<String, Vec<Segment>>,
    gts: &BTreeMap<String, Vec<Segment>>,
) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let videos: Vec<_> = gts.iter().filter(|(_, g)| !g.is_empty()).collect();
    if videos.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=100usize {
        let mut sum = 0.0;
        for (id, g) in &videos {
            let p: &[Segment] = proposals.get(*id).map(|v| v.as_slice()).unwrap_or(&[]);
            let top = &p[..n.min(p.len())];
            for &a in &thresholds {
                let hits = match_oracle(top, g, a).iter().filter(|&&f| f).count();
                sum += hits as f64 / g.len() as f64;
            }
        }
        total += sum / (videos.len() * thresholds.len()) as f64;
    }
    total / 100.0
}

pub fn agrees_with_oracle(lab: &AnchorLabeling, anchors: &[Segment], gts: &[Segment]) -> bool {
    let oracle = anchor_label_oracle(anchors, gts);
    lab.labels.iter().zip(&lab.targets).zip(&oracle).all(|((l, t), (ol, ot))| {
        let same_label = matches!(
            (l, ol),
            (AnchorLabel::Positive, OracleLabel::Pos)
                | (AnchorLabel::Negative, OracleLabel::Neg)
                | (AnchorLabel::Ignore, OracleLabel::Ignore)
        );
        let same_target = match (t, ot) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                (a.center - b.center).abs() < 1e-12 && (a.log_length - b.log_length).abs() < 1e-12
            }
            _ => false,
        };
        same_label && same_target
    })
}

fn dense(x: &[f64], w: &Tensor64, b: &Tensor64, relu: bool) -> Vec<f64> {
    let (d, m) = (w.dim(0), w.dim(1));
    (0..m)
        .map(|j| {
            let mut acc = b.data()[j];
            for i in 0..d {
                acc += x[i] * w.data()[i * m + j];
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

fn huber(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Per-proposal loss of the classifier head written as plain loops: per
/// stream fc6/fc7 with ReLU, streams summed (or concatenated), softmax
/// cross-entropy plus smooth L1 on the labeled class's offsets.
pub fn head_loss_oracle(
    params: &ParamStore<f64>,
    streams: &[&str],
    concat: bool,
    pooled: &[Tensor64],
    labels: &[usize],
    targets: &[Option<Offset>],
) -> Vec<f64> {
    let p = |n: &str| params.get(n).unwrap();
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mut fused: Vec<f64> = Vec::new();
            for (s, feat) in streams.iter().zip(pooled) {
                let width = feat.dim(1);
                let x = &feat.data()[i * width..(i + 1) * width];
                let h = dense(x, p(&format!("cls.{s}.fc6.weight")), p(&format!("cls.{s}.fc6.bias")), true);
                let h = dense(&h, p(&format!("cls.{s}.fc7.weight")), p(&format!("cls.{s}.fc7.bias")), true);
                if fused.is_empty() {
                    fused = h;
                } else if concat {
                    fused.extend(h);
                } else {
                    fused.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
                }
            }
            let logits = dense(&fused, p("cls.score.weight"), p("cls.score.bias"), false);
            let offs = dense(&fused, p("cls.bbox.weight"), p("cls.bbox.bias"), false);
            let top = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
            let mut loss = lse - logits[labels[i]];
            if let Some(t) = targets[i] {
                let row = if offs.len() == 2 { 0 } else { labels[i] - 1 };
                loss += huber(offs[2 * row] - t.center) + huber(offs[2 * row + 1] - t.log_length);
            }
            loss
        })
        .collect()
}

/// Replaces every parameter with uniform noise in `[lo, hi)`.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng, lo: f64, hi: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, rand_tensor(&shape, rng, lo, hi));
    }
}

/// A model small enough for finite differences: 16-frame buffers of 16×16
/// pixels, 4-channel 2×1×1 feature maps, two anchor scales.
pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        num_classes: 3,
        backbone: BackboneConfig { widths: [2, 2, 3, 3, 4] },
        scales: vec![1, 2],
        tpn_channels: 4,
        roi_grid: RoiGrid::new(1, 1, 1).unwrap(),
        hidden: 6,
        buffer_len: 16,
        train_proposals: 40,
        test_proposals: 40,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(mode: Mode, seed: u64) -> Model<f64> {
    Model::init(tiny_config(mode), seed).unwrap()
}

/// One 16-frame buffer of random pixels and flow with the given
/// `(label, start, end)` activities in frames.
pub fn tiny_buffer(rng: &mut impl Rng, activities: &[(usize, f64, f64)]) -> Buffer<f64> {
    let rgb = rand_tensor(&[3, 16, 16, 16], rng, 0.0, 1.0);
    let flow = rand_tensor(&[2, 15, 16, 16], rng, -1.0, 1.0);
    let anns = activities
        .iter()
        .map(|&(label, s, e)| Annotation {
            label,
            start: s / 8.0,
            end: e / 8.0,
        })
        .collect();
    let v = VideoSample::new("tiny", 8.0, rgb, flow, anns).unwrap();
    build_buffers(&v, 16, false, false).unwrap().remove(0)
}

/// Gives every all-zero parameter (biases, final layers) small random
/// values; fan-in initialized weights are already random and stay as they
/// are.
pub fn fill_zero_params(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get(&n).unwrap();
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            store.insert(n, rand_tensor(&shape, rng, -scale, scale));
        }
    }
}

/// Directional finite-difference check of the whole training objective of
/// one buffer (backbone, proposal subnet, RoI pooling, classifier, both
/// losses) on a tiny model. Proposals for the classifier are fixed and
/// every proposal is used, so the objective is a smooth function of the
/// weights away from ReLU and max-pool switches. Returns the largest
/// relative error over `directions` random directions.
pub fn micro_step_fd(mode: Mode, seed: u64, directions: usize) -> f64 {
    let mut r = rng(seed);
    let mut model = tiny_model(mode, seed);
    fill_zero_params(&mut model.params, &mut r, 0.1);
    let buffer = tiny_buffer(&mut r, &[(1, 2.0, 9.0), (2, 10.0, 15.0)]);
    let proposals: Vec<ScoredSegment> = [(1.5, 9.5), (2.5, 8.0), (0.0, 6.0), (9.0, 15.5), (11.0, 16.0), (4.0, 12.0)]
        .iter()
        .map(|&(s, e)| ScoredSegment::proposal(Segment::from_bounds(s, e), 0.5))
        .collect();
    let cfg = StepConfig {
        loss: Default::default(),
        proposal_batch: 4,
        selection: Selection::All,
        frozen_layers: 0,
    };
    let objective = |m: &Model<f64>| {
        step_graph_with(m, &buffer, &cfg, None, Some(&proposals), &mut rng(seed + 1)).unwrap()
    };
    let step = objective(&model);
    let grads = step.graph.backward(step.total).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut dirs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut norm = 0.0;
        for (name, t) in model.params.iter() {
            let d: Vec<f64> = (0..t.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
            norm += d.iter().map(|v| v * v).sum::<f64>();
            dirs.insert(name.clone(), d);
        }
        let norm = norm.sqrt();
        let mut analytic = 0.0;
        for (name, d) in &dirs {
            let g = grads.get(name).unwrap();
            analytic += g.data().iter().zip(d).map(|(a, b)| a * b / norm).sum::<f64>();
        }
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (name, d) in &dirs {
                let t = m.params.get(name).unwrap();
                let data: Vec<f64> = t.data().iter().zip(d).map(|(w, v)| w + sign * h * v / norm).collect();
                let shape = t.shape().to_vec();
                m.params.insert(name.clone(), Tensor64::new(shape, data).unwrap());
            }
            objective(&m).losses.total
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}
