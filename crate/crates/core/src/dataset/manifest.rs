//! Manifest JSON and detection JSON-lines files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Annotation, Dataset, VideoSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::io as tensor_io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub label: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub rgb_path: String,
    pub flow_path: String,
    pub annotations: Vec<AnnotationRecord>,
}

impl VideoEntry {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.annotations
            .iter()
            .map(|a| Annotation {
                label: a.label,
                start: a.start_sec,
                end: a.end_sec,
            })
            .collect()
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }
}

/// Dataset index. Tensor paths are resolved relative to the manifest's
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            Error::format(path, "manifest", e.to_string())
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for (i, v) in manifest.videos.iter().enumerate() {
            for (j, a) in v.annotations.iter().enumerate() {
                if a.label >= manifest.classes.len() {
                    return Err(Error::format(
                        path,
                        format!("videos[{i}].annotations[{j}].label"),
                        format!("{} >= {} classes", a.label, manifest.classes.len()),
                    ));
                }
                if !(0.0 <= a.start_sec && a.start_sec < a.end_sec) {
                    return Err(Error::format(
                        path,
                        format!("videos[{i}].annotations[{j}]"),
                        "start_sec must be >= 0 and < end_sec",
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Loads the tensors of video `index`.
    pub fn load_video<S: Scalar>(&self, index: usize) -> Result<VideoSample<S>> {
        let entry = &self.videos[index];
        let rgb_path = self.resolve(&entry.rgb_path);
        let flow_path = self.resolve(&entry.flow_path);
        let rgb = tensor_io::read::<S>(&rgb_path)?;
        let flow = tensor_io::read::<S>(&flow_path)?;
        let rs = rgb.shape();
        if rs.len() != 4 || rs[0] != 3 || rs[1] != entry.num_frames {
            return Err(Error::format(
                &rgb_path,
                "shape",
                format!("expected [3,{},H,W], got {:?}", entry.num_frames, rs),
            ));
        }
        let expected = [2, entry.num_frames - 1, rs[2], rs[3]];
        if flow.shape() != expected {
            return Err(Error::format(
                &flow_path,
                "shape",
                format!("expected {:?}, got {:?}", expected, flow.shape()),
            ));
        }
        Ok(VideoSample {
            id: entry.id.clone(),
            fps: entry.fps,
            rgb,
            flow,
            annotations: entry.annotations(),
        })
    }
}

/// Loads a manifest and every tensor it references.
pub fn load_manifest<S: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<S>> {
    let manifest = Manifest::load(path)?;
    let videos = (0..manifest.videos.len())
        .map(|i| manifest.load_video(i))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        classes: manifest.classes,
        videos,
    })
}

/// Writes tensors next to `manifest_path` (in a `videos/` directory) and
/// the manifest itself.
pub fn save_dataset<S: Scalar>(manifest_path: impl AsRef<Path>, dataset: &Dataset<S>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let video_dir = base.join("videos");
    fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let rgb_rel = format!("videos/{}_rgb.tnsr", v.id);
        let flow_rel = format!("videos/{}_flow.tnsr", v.id);
        tensor_io::write(base.join(&rgb_rel), &v.rgb)?;
        tensor_io::write(base.join(&flow_rel), &v.flow)?;
        videos.push(VideoEntry {
            id: v.id.clone(),
            fps: v.fps,
            num_frames: v.num_frames(),
            rgb_path: rgb_rel,
            flow_path: flow_rel,
            annotations: v
                .annotations
                .iter()
                .map(|a| AnnotationRecord {
                    label: a.label,
                    start_sec: a.start,
                    end_sec: a.end,
                })
                .collect(),
        });
    }
    Manifest {
        classes: dataset.classes.clone(),
        videos,
        base_dir: base.to_path_buf(),
    }
    .save(manifest_path)
}

/// One detected activity instance, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub label: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

pub fn save_detections(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for d in detections {
        serde_json::to_writer(&mut out, d).expect("detection serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}", i + 1), e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}
