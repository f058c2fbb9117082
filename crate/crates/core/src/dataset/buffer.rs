//! Fixed-length network inputs cut from untrimmed videos.

use super::VideoSample;
use crate::error::{Error, Result};
use crate::geometry::{tiou, Segment, TEMPORAL_STRIDE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Minimum tIoU between a buffer-clipped annotation and the original for
/// the clipped instance to be kept.
pub const MIN_CLIPPED_OVERLAP: f64 = 0.5;

/// An annotation remapped into buffer frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferSegment {
    pub label: usize,
    pub segment: Segment,
}

#[derive(Debug, Clone)]
pub struct Buffer<S: Scalar> {
    pub video_id: String,
    /// First frame of the buffer in the (possibly reversed) source video.
    pub start_frame: usize,
    /// Frames of real video in the buffer; the rest is padding.
    pub valid_frames: usize,
    pub reversed: bool,
    pub flipped: bool,
    /// `[3, B, H, W]`
    pub rgb: Tensor<S>,
    /// `[2, B - 1, H, W]`
    pub flow: Tensor<S>,
    pub segments: Vec<BufferSegment>,
}

impl<S: Scalar> Buffer<S> {
    pub fn len(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Frames<S> {
    rgb: Vec<S>,
    flow: Vec<S>,
    len: usize,
    plane: usize,
}

impl<S: Scalar> Frames<S> {
    fn reversed(&self) -> Self {
        let (l, p) = (self.len, self.plane);
        let mut rgb = Vec::with_capacity(self.rgb.len());
        for c in 0..3 {
            for t in 0..l {
                let src = (c * l + (l - 1 - t)) * p;
                rgb.extend_from_slice(&self.rgb[src..src + p]);
            }
        }
        // flow between reversed frames t and t+1 is the negated forward flow
        // between original frames L-2-t and L-1-t
        let mut flow = Vec::with_capacity(self.flow.len());
        for c in 0..2 {
            for t in 0..l - 1 {
                let src = (c * (l - 1) + (l - 2 - t)) * p;
                flow.extend(self.flow[src..src + p].iter().map(|&v| -v));
            }
        }
        Self {
            rgb,
            flow,
            len: l,
            plane: p,
        }
    }

    fn cut(&self, start: usize, len: usize) -> (Vec<S>, Vec<S>) {
        let (l, p) = (self.len, self.plane);
        let mut rgb = Vec::with_capacity(3 * len * p);
        for c in 0..3 {
            for j in 0..len {
                let t = (start + j).min(l - 1);
                let src = (c * l + t) * p;
                rgb.extend_from_slice(&self.rgb[src..src + p]);
            }
        }
        let mut flow = Vec::with_capacity(2 * (len - 1) * p);
        for c in 0..2 {
            for j in 0..len - 1 {
                let t = start + j;
                if t < l - 1 {
                    let src = (c * (l - 1) + t) * p;
                    flow.extend_from_slice(&self.flow[src..src + p]);
                } else {
                    flow.extend(std::iter::repeat_n(S::zero(), p));
                }
            }
        }
        (rgb, flow)
    }
}

fn mirror<S: Scalar>(data: &[S], width: usize, negate_first: Option<usize>) -> Vec<S> {
    let mut out = Vec::with_capacity(data.len());
    for (r, row) in data.chunks(width).enumerate() {
        let neg = negate_first.is_some_and(|rows| r < rows);
        out.extend(row.iter().rev().map(|&v| if neg { -v } else { v }));
    }
    out
}

fn remap(annotations: &[(usize, Segment)], start: usize, len: usize) -> Vec<BufferSegment> {
    let (lo, hi) = (start as f64, (start + len) as f64);
    annotations
        .iter()
        .filter_map(|&(label, seg)| {
            let s = seg.start().max(lo);
            let e = seg.end().min(hi);
            if e <= s {
                return None;
            }
            let clipped = Segment::from_bounds(s, e);
            (tiou(&clipped, &seg) >= MIN_CLIPPED_OVERLAP).then(|| BufferSegment {
                label,
                segment: Segment::from_bounds(s - lo, e - lo),
            })
        })
        .collect()
}

/// Cuts a video into `buffer_len`-frame buffers.
///
/// Short videos (and the tail of long ones) are padded by repeating the last
/// frame, with zero flow. `two_way` adds a pass over the temporally reversed
/// video; `flip` adds a horizontally mirrored copy of every buffer with the
/// horizontal flow negated.
pub fn build_buffers<S: Scalar>(
    sample: &VideoSample<S>,
    buffer_len: usize,
    two_way: bool,
    flip: bool,
) -> Result<Vec<Buffer<S>>> {
    if buffer_len == 0 || !buffer_len.is_multiple_of(TEMPORAL_STRIDE) {
        return Err(Error::Config(format!(
            "buffer length {} must be a positive multiple of {}",
            buffer_len, TEMPORAL_STRIDE
        )));
    }
    sample.validate()?;
    let shape = sample.rgb.shape();
    let (l, h, w) = (shape[1], shape[2], shape[3]);
    let forward = Frames {
        rgb: sample.rgb.data().to_vec(),
        flow: sample.flow.data().to_vec(),
        len: l,
        plane: h * w,
    };
    let anns: Vec<(usize, Segment)> = sample
        .annotations
        .iter()
        .map(|a| (a.label, a.to_frames(sample.fps)))
        .collect();
    let mut passes = vec![(false, forward, anns.clone())];
    if two_way {
        let rev = passes[0].1.reversed();
        let rev_anns = anns
            .iter()
            .map(|&(label, s)| (label, Segment::from_bounds(l as f64 - s.end(), l as f64 - s.start())))
            .collect();
        passes.push((true, rev, rev_anns));
    }
    let mut buffers = Vec::new();
    for (reversed, frames, anns) in &passes {
        let mut start = 0;
        loop {
            let (rgb, flow) = frames.cut(start, buffer_len);
            let segments = remap(anns, start, buffer_len);
            let valid_frames = (l - start).min(buffer_len);
            buffers.push(Buffer {
                video_id: sample.id.clone(),
                start_frame: start,
                valid_frames,
                reversed: *reversed,
                flipped: false,
                rgb: Tensor::new([3, buffer_len, h, w], rgb)?,
                flow: Tensor::new([2, buffer_len - 1, h, w], flow)?,
                segments,
            });
            start += buffer_len;
            if start >= l {
                break;
            }
        }
    }
    if flip {
        let mirrored: Vec<Buffer<S>> = buffers
            .iter()
            .map(|b| {
                let flow_rows = (buffer_len - 1) * h;
                Buffer {
                    flipped: true,
                    rgb: Tensor::new(b.rgb.shape(), mirror(b.rgb.data(), w, None)).unwrap(),
                    flow: Tensor::new(b.flow.shape(), mirror(b.flow.data(), w, Some(flow_rows)))
                        .unwrap(),
                    ..b.clone()
                }
            })
            .collect();
        buffers.extend(mirrored);
    }
    Ok(buffers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Annotation;

    fn video(l: usize, anns: Vec<Annotation>) -> VideoSample<f64> {
        let (h, w) = (2, 3);
        let rgb = Tensor::from_fn([3, l, h, w], |i| i as f64);
        let flow = Tensor::from_fn([2, l - 1, h, w], |i| 1.0 + i as f64);
        VideoSample::new("v", 1.0, rgb, flow, anns).unwrap()
    }

    fn ann(label: usize, s: f64, e: f64) -> Annotation {
        Annotation {
            label,
            start: s,
            end: e,
        }
    }

    #[test]
    fn exact_length_is_one_unchanged_buffer() {
        let v = video(96, vec![ann(0, 10.0, 20.0)]);
        let bufs = build_buffers(&v, 96, false, false).unwrap();
        assert_eq!(bufs.len(), 1);
        assert_eq!(bufs[0].rgb, v.rgb);
        assert_eq!(bufs[0].flow, v.flow);
        assert_eq!(bufs[0].segments[0].segment, Segment::from_bounds(10.0, 20.0));
    }

    #[test]
    fn short_video_repeats_last_frame() {
        let v = video(40, vec![]);
        let b = &build_buffers(&v, 96, false, false).unwrap()[0];
        let plane = 6;
        for c in 0..3 {
            let last = &v.rgb.data()[(c * 40 + 39) * plane..(c * 40 + 40) * plane];
            for t in 40..96 {
                assert_eq!(&b.rgb.data()[(c * 96 + t) * plane..(c * 96 + t + 1) * plane], last);
            }
        }
        for c in 0..2 {
            for t in 39..95 {
                let f = &b.flow.data()[(c * 95 + t) * plane..(c * 95 + t + 1) * plane];
                assert!(f.iter().all(|&x| x == 0.0));
            }
        }
        assert_eq!(b.valid_frames, 40);
    }

    #[test]
    fn two_way_reverses_indices() {
        let v = video(96, vec![ann(1, 10.0, 20.0)]);
        let bufs = build_buffers(&v, 96, true, false).unwrap();
        assert_eq!(bufs.len(), 2);
        assert!(bufs[1].reversed);
        assert_eq!(bufs[1].segments[0].segment, Segment::from_bounds(76.0, 86.0));
        // first reversed frame is the last original frame
        assert_eq!(bufs[1].rgb.at(&[0, 0, 1, 2]), v.rgb.at(&[0, 95, 1, 2]));
        assert_eq!(bufs[1].flow.at(&[0, 0, 0, 0]), -v.flow.at(&[0, 94, 0, 0]));
    }

    #[test]
    fn long_video_splits_and_drops_small_remnants() {
        // 200 frames into 96-frame buffers: 3 buffers
        let v = video(200, vec![ann(0, 90.0, 100.0), ann(1, 80.0, 100.0)]);
        let bufs = build_buffers(&v, 96, false, false).unwrap();
        assert_eq!(bufs.len(), 3);
        assert_eq!(bufs[2].valid_frames, 8);
        // [90,100] splits 6/4: 6/10 kept in buffer 0, 4/10 dropped in buffer 1
        assert_eq!(bufs[0].segments.len(), 2);
        assert_eq!(bufs[0].segments[0].segment, Segment::from_bounds(90.0, 96.0));
        assert_eq!(bufs[1].segments.len(), 0);
    }

    #[test]
    fn flip_mirrors_and_negates_horizontal_flow() {
        let v = video(16, vec![ann(0, 2.0, 6.0)]);
        let bufs = build_buffers(&v, 16, true, true).unwrap();
        assert_eq!(bufs.len(), 4);
        let (a, b) = (&bufs[0], &bufs[2]);
        assert!(b.flipped && !b.reversed);
        assert_eq!(b.rgb.at(&[1, 3, 1, 0]), a.rgb.at(&[1, 3, 1, 2]));
        assert_eq!(b.flow.at(&[0, 3, 1, 0]), -a.flow.at(&[0, 3, 1, 2]));
        assert_eq!(b.flow.at(&[1, 3, 1, 0]), a.flow.at(&[1, 3, 1, 2]));
        assert_eq!(b.segments, a.segments);
    }

    #[test]
    fn buffer_length_must_be_multiple_of_stride() {
        let v = video(16, vec![]);
        assert!(build_buffers(&v, 12, false, false).is_err());
    }
}
