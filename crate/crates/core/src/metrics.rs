//! Detection and proposal evaluation: tIoU matching, average precision,
//! mAP at one or many thresholds, AR-AN area under curve and frame-level
//! mAP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Detection, Manifest};
use crate::scalar::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{tiou, Segment};

/// The ten thresholds 0.5, 0.55, …, 0.95.
pub fn standard_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Maximum proposals per video for the AR-AN curve.
pub const MAX_PROPOSALS: usize = 100;
pub const FRAME_SAMPLES: usize = 25;

/// One annotated activity, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub label: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl GroundTruth {
    pub fn segment(&self) -> Segment {
        Segment::from_bounds(self.start_sec, self.end_sec)
    }
}

fn det_segment(d: &Detection) -> Segment {
    Segment::from_bounds(d.start_sec, d.end_sec)
}

/// Ground truth and durations of every video in a manifest.
pub fn ground_truth(manifest: &Manifest) -> (Vec<GroundTruth>, BTreeMap<String, f64>) {
    let mut gts = Vec::new();
    let mut durations = BTreeMap::new();
    for v in &manifest.videos {
        durations.insert(v.id.clone(), v.duration_secs());
        for a in &v.annotations {
            gts.push(GroundTruth {
                video_id: v.id.clone(),
                label: a.label,
                start_sec: a.start_sec,
                end_sec: a.end_sec,
            });
        }
    }
    (gts, durations)
}

/// Ground truth and durations of every video in an in-memory dataset.
pub fn dataset_ground_truth<S: Scalar>(ds: &Dataset<S>) -> (Vec<GroundTruth>, BTreeMap<String, f64>) {
    let mut gts = Vec::new();
    let mut durations = BTreeMap::new();
    for v in &ds.videos {
        durations.insert(v.id.clone(), v.duration_secs());
        for a in &v.annotations {
            gts.push(GroundTruth {
                video_id: v.id.clone(),
                label: a.label,
                start_sec: a.start,
                end_sec: a.end,
            });
        }
    }
    (gts, durations)
}

/// Greedy one-to-one matching of score-sorted detections: each detection
/// takes its highest-tIoU unmatched ground truth (lowest index on ties) and
/// is a true positive iff that tIoU is at least `alpha`.
pub fn match_detections(dets: &[Segment], gts: &[Segment], alpha: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if matched[j] {
                    continue;
                }
                let o = tiou(d, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= alpha => {
                    matched[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of a ranked list of TP/FP flags. Zero when
/// there are no ground truths.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    flags
        .iter()
        .zip(&precision)
        .filter(|(&f, _)| f)
        .fold(0.0, |acc, (_, &p)| acc + p)
        / num_gt as f64
}

/// Indices sorted by descending score, stable on ties.
fn by_score<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| score(&items[b]).total_cmp(&score(&items[a])));
    order
}

/// AP for one class over all videos.
pub fn class_ap(dets: &[Detection], gts: &[GroundTruth], label: usize, alpha: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.label == label).collect();
    if gts.is_empty() {
        return None;
    }
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.label == label).collect();
    let mut per_video: BTreeMap<&str, Vec<Segment>> = BTreeMap::new();
    for g in &gts {
        per_video.entry(g.video_id.as_str()).or_default().push(g.segment());
    }
    let mut matched: BTreeMap<&str, Vec<bool>> =
        per_video.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let flags: Vec<bool> = by_score(&dets, |d| d.score)
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let Some(vgts) = per_video.get(d.video_id.as_str()) else {
                return false;
            };
            let m = matched.get_mut(d.video_id.as_str()).unwrap();
            let seg = det_segment(d);
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in vgts.iter().enumerate() {
                if !m[j] {
                    let o = tiou(&seg, g);
                    if best.is_none_or(|(_, b)| o > b) {
                        best = Some((j, o));
                    }
                }
            }
            match best {
                Some((j, o)) if o >= alpha => {
                    m[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    Some(average_precision(&flags, gts.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub alpha: f64,
    /// AP per class label; classes without ground truth are absent.
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

/// mAP at `alpha`: the unweighted mean of AP over classes that have at
/// least one ground truth. Zero when no class has any.
pub fn map_at(dets: &[Detection], gts: &[GroundTruth], alpha: f64) -> MapResult {
    let mut labels: Vec<usize> = gts.iter().map(|g| g.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let per_class: BTreeMap<usize, f64> = labels
        .iter()
        .filter_map(|&c| class_ap(dets, gts, c, alpha).map(|ap| (c, ap)))
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    MapResult {
        alpha,
        per_class,
        map,
    }
}

/// Mean of mAP over the ten standard thresholds.
pub fn average_map(dets: &[Detection], gts: &[GroundTruth]) -> f64 {
    let t = standard_thresholds();
    t.iter().map(|&a| map_at(dets, gts, a).map).sum::<f64>() / t.len() as f64
}

/// Recall after each of the first `max_n` proposals (greedy one-to-one by
/// rank) at one threshold. Entry `n-1` is the recall of the top `n`.
fn recall_curve(proposals: &[Segment], gts: &[Segment], alpha: f64, max_n: usize) -> Vec<f64> {
    let flags = match_detections(&proposals[..proposals.len().min(max_n)], gts, alpha);
    let mut hits = 0usize;
    (0..max_n)
        .map(|n| {
            if let Some(&f) = flags.get(n) {
                hits += usize::from(f);
            }
            hits as f64 / gts.len() as f64
        })
        .collect()
}

/// Area under the average-recall vs proposals-per-video curve, as a
/// fraction. At each budget `n = 1..=100`, recall is averaged over the ten
/// thresholds and over videos with at least one ground truth; the AUC is
/// the mean over `n`. Proposals must be score-sorted per video.
pub fn ar_an_auc(
    proposals: &BTreeMap<String, Vec<Segment>>,
    gts: &BTreeMap<String, Vec<Segment>>,
) -> f64 {
    let thresholds = standard_thresholds();
    let videos: Vec<(&String, &Vec<Segment>)> = gts.iter().filter(|(_, g)| !g.is_empty()).collect();
    if videos.is_empty() {
        return 0.0;
    }
    let empty = Vec::new();
    let mut ar = vec![0.0; MAX_PROPOSALS];
    for (id, g) in &videos {
        let p = proposals.get(*id).unwrap_or(&empty);
        for &a in &thresholds {
            for (n, r) in recall_curve(p, g, a, MAX_PROPOSALS).into_iter().enumerate() {
                ar[n] += r;
            }
        }
    }
    let norm = (videos.len() * thresholds.len()) as f64;
    ar.iter().map(|v| v / norm).sum::<f64>() / MAX_PROPOSALS as f64
}

/// Groups detections into score-ranked per-video proposal lists, keeping at
/// most [`MAX_PROPOSALS`] each.
pub fn proposals_by_video(dets: &[Detection]) -> BTreeMap<String, Vec<Segment>> {
    let mut out: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for i in by_score(dets, |d| d.score) {
        let list = out.entry(dets[i].video_id.clone()).or_default();
        if list.len() < MAX_PROPOSALS {
            list.push(det_segment(&dets[i]));
        }
    }
    out
}

pub fn gts_by_video(gts: &[GroundTruth]) -> BTreeMap<String, Vec<Segment>> {
    let mut out: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for g in gts {
        out.entry(g.video_id.clone()).or_default().push(g.segment());
    }
    out
}

/// Timestamps sampled from a video: bin centres of `n` equal parts.
pub fn sample_times(duration: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| duration * (j as f64 + 0.5) / n as f64).collect()
}

fn covers(start: f64, end: f64, t: f64) -> bool {
    start <= t && t <= end
}

/// Frame-level mAP. Each video contributes `num_frames` equidistant
/// timestamps as multi-label instances. A timestamp's score for a class is
/// the highest score among that class's detections covering it; timestamps
/// no detection covers are never retrieved. With `smoothing = Some(w)`,
/// scores are averaged over a centred window of `w` timestamps. AP is
/// computed per class over all timestamps and averaged over classes with at
/// least one positive timestamp.
pub fn frame_level_map(
    dets: &[Detection],
    gts: &[GroundTruth],
    durations: &BTreeMap<String, f64>,
    num_frames: usize,
    smoothing: Option<usize>,
) -> f64 {
    let mut labels: Vec<usize> = gts.iter().map(|g| g.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut aps = Vec::new();
    for &c in &labels {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut positives = 0usize;
        for (id, &dur) in durations {
            let times = sample_times(dur, num_frames);
            let mut scores: Vec<Option<f64>> = times
                .iter()
                .map(|&t| {
                    dets.iter()
                        .filter(|d| d.label == c && &d.video_id == id && covers(d.start_sec, d.end_sec, t))
                        .map(|d| d.score)
                        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
                })
                .collect();
            if let Some(w) = smoothing.filter(|&w| w > 1) {
                scores = smooth(&scores, w);
            }
            for (j, &t) in times.iter().enumerate() {
                let pos = gts
                    .iter()
                    .any(|g| g.label == c && &g.video_id == id && covers(g.start_sec, g.end_sec, t));
                positives += usize::from(pos);
                if let Some(s) = scores[j] {
                    scored.push((s, pos));
                }
            }
        }
        if positives == 0 {
            continue;
        }
        let flags: Vec<bool> = by_score(&scored, |x| x.0).into_iter().map(|i| scored[i].1).collect();
        aps.push(average_precision(&flags, positives));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Centred moving average; missing scores count as 0 inside a window that
/// has at least one score.
fn smooth(scores: &[Option<f64>], w: usize) -> Vec<Option<f64>> {
    let half = w / 2;
    (0..scores.len())
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + w - half).min(scores.len());
            let window = &scores[lo..hi];
            if window.iter().all(|s| s.is_none()) {
                None
            } else {
                Some(window.iter().map(|s| s.unwrap_or(0.0)).sum::<f64>() / window.len() as f64)
            }
        })
        .collect()
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    /// A class name, or `ALL`.
    pub class: String,
    pub alpha: Option<f64>,
    pub value: f64,
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,class_or_ALL,alpha,value\n");
    for r in rows {
        let alpha = r.alpha.map(|a| format!("{a:.2}")).unwrap_or_default();
        writeln!(s, "{},{},{},{}", r.metric, r.class, alpha, r.value).unwrap();
    }
    s
}

/// Summary JSON: one object per metric, mapping the threshold (or `all`)
/// to the overall value.
pub fn summary_json(rows: &[MetricRow]) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for r in rows.iter().filter(|r| r.class == "ALL") {
        let entry = out
            .entry(r.metric.clone())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
        let key = r.alpha.map(|a| format!("{a:.2}")).unwrap_or_else(|| "all".into());
        entry.as_object_mut().unwrap().insert(key, r.value.into());
    }
    serde_json::Value::Object(out)
}

pub fn write_report(dir: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary_json(rows)).expect("summary serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Report rows for mAP at each threshold, per class and overall.
pub fn map_rows(dets: &[Detection], gts: &[GroundTruth], classes: &[String], alphas: &[f64]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for &a in alphas {
        let r = map_at(dets, gts, a);
        for (&c, &ap) in &r.per_class {
            rows.push(MetricRow {
                metric: "ap".into(),
                class: classes.get(c).cloned().unwrap_or_else(|| c.to_string()),
                alpha: Some(a),
                value: ap,
            });
        }
        rows.push(MetricRow {
            metric: "map".into(),
            class: "ALL".into(),
            alpha: Some(a),
            value: r.map,
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(v: &str, label: usize, s: f64, e: f64, score: f64) -> Detection {
        Detection {
            video_id: v.into(),
            label,
            start_sec: s,
            end_sec: e,
            score,
        }
    }

    fn gt(v: &str, label: usize, s: f64, e: f64) -> GroundTruth {
        GroundTruth {
            video_id: v.into(),
            label,
            start_sec: s,
            end_sec: e,
        }
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn two_detections_one_gt() {
        let g = Segment::from_bounds(0.0, 10.0);
        assert_eq!(match_detections(&[g, g], &[g], 0.5), vec![true, false]);
    }

    #[test]
    fn map_perfect_and_empty() {
        let gts = vec![gt("a", 0, 1.0, 3.0), gt("a", 1, 5.0, 8.0), gt("b", 0, 0.0, 2.0)];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.video_id, g.label, g.start_sec, g.end_sec, 1.0))
            .collect();
        assert_eq!(map_at(&dets, &gts, 0.5).map, 1.0);
        assert_eq!(average_map(&dets, &gts), 1.0);
        assert_eq!(average_map(&[], &gts), 0.0);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let gts = vec![gt("a", 0, 0.0, 4.0)];
        let dets = vec![det("a", 0, 0.0, 4.0, 0.9), det("a", 2, 0.0, 4.0, 0.95)];
        let r = map_at(&dets, &gts, 0.5);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn auc_extremes() {
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), vec![Segment::from_bounds(0.0, 5.0)]);
        gts.insert("empty".to_string(), vec![]);
        let mut props = BTreeMap::new();
        props.insert("a".to_string(), vec![Segment::from_bounds(0.0, 5.0)]);
        assert_eq!(ar_an_auc(&props, &gts), 1.0);
        props.insert("a".to_string(), vec![Segment::from_bounds(10.0, 15.0)]);
        assert_eq!(ar_an_auc(&props, &gts), 0.0);
    }

    #[test]
    fn frame_map_cases() {
        let mut dur = BTreeMap::new();
        dur.insert("a".to_string(), 10.0);
        let gts = vec![gt("a", 0, 0.0, 10.0)];
        assert_eq!(frame_level_map(&[det("a", 0, 0.0, 10.0, 1.0)], &gts, &dur, 25, None), 1.0);
        assert_eq!(frame_level_map(&[], &gts, &dur, 25, None), 0.0);
        // gt covers the first half; detections score the second half higher
        let gts = vec![gt("a", 0, 0.0, 5.0)];
        let dets = vec![det("a", 0, 0.0, 5.0, 0.4), det("a", 0, 5.0, 10.0, 0.8)];
        let ap = frame_level_map(&dets, &gts, &dur, 4, None);
        // ranking: t=6.25, 8.75 (neg), then 1.25, 3.75 (pos); precision 1/3
        // at the first hit is lifted to 2/4 by the running maximum
        assert!((ap - 0.5).abs() < 1e-12);
        let smoothed = frame_level_map(&dets, &gts, &dur, 4, Some(3));
        assert!(smoothed.is_finite());
    }

    #[test]
    fn report_formats() {
        let rows = map_rows(
            &[det("a", 0, 0.0, 4.0, 1.0)],
            &[gt("a", 0, 0.0, 4.0)],
            &["jump".to_string()],
            &[0.5],
        );
        let csv = report_csv(&rows);
        assert!(csv.starts_with("metric,class_or_ALL,alpha,value\n"));
        assert!(csv.contains("ap,jump,0.50,1\n"));
        assert!(csv.contains("map,ALL,0.50,1\n"));
        assert_eq!(summary_json(&rows)["map"]["0.50"], 1.0);
    }
}
