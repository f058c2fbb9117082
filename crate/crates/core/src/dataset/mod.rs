//! Video samples, the synthetic corpus, buffering and on-disk formats.

mod buffer;
mod manifest;
mod synth;

pub use buffer::{build_buffers, Buffer, BufferSegment};
pub use manifest::{
    load_detections, load_manifest, save_dataset, save_detections, AnnotationRecord, Detection,
    Manifest, VideoEntry,
};
pub use synth::{class_velocity, render_split, render_video, synth_generate, SynthConfig, SynthOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Segment;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ground-truth activity instance, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: usize,
    pub start: f64,
    pub end: f64,
}

impl Annotation {
    /// The annotated interval in frame units.
    pub fn to_frames(&self, fps: f64) -> Segment {
        Segment::from_bounds(self.start * fps, self.end * fps)
    }
}

/// One untrimmed video: RGB frames `[3, L, H, W]` in `[0, 1]` and flow
/// `[2, L-1, H, W]` (channel 0 horizontal, channel 1 vertical).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample<S: Scalar> {
    pub id: String,
    pub fps: f64,
    pub rgb: Tensor<S>,
    pub flow: Tensor<S>,
    pub annotations: Vec<Annotation>,
}

impl<S: Scalar> VideoSample<S> {
    pub fn new(
        id: impl Into<String>,
        fps: f64,
        rgb: Tensor<S>,
        flow: Tensor<S>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let sample = Self {
            id: id.into(),
            fps,
            rgb,
            flow,
            annotations,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn num_frames(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rgb.shape();
        if r.len() != 4 || r[0] != 3 || r[1] == 0 {
            return Err(Error::dim("video", "rgb", format!("expected [3,L,H,W], got {:?}", r)));
        }
        let f = self.flow.shape();
        if f != [2, r[1] - 1, r[2], r[3]] {
            return Err(Error::dim(
                "video",
                "flow",
                format!("expected [2,{},{},{}], got {:?}", r[1] - 1, r[2], r[3], f),
            ));
        }
        for a in &self.annotations {
            if !(0.0 <= a.start && a.start < a.end) {
                return Err(Error::Domain(format!(
                    "annotation [{}, {}) in {} is not a valid interval",
                    a.start, a.end, self.id
                )));
            }
        }
        Ok(())
    }
}

/// A class list plus fully loaded videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S: Scalar> {
    pub classes: Vec<String>,
    pub videos: Vec<VideoSample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}
