//! Synthetic untrimmed videos with exact temporal ground truth and exact flow.
//!
//! Every video is a noise background. Each activity instance renders a
//! textured block that moves with a class-specific velocity for the
//! duration of the instance. Flow carries the renderer's per-pixel
//! displacement: the class velocity on the block support, zero elsewhere.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::save_dataset;
use super::{Annotation, Dataset, VideoSample};
use crate::config::{parse_key_values, parse_value};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Training videos.
    pub num_videos: usize,
    /// Held-out videos, generated after the training ones.
    pub num_test_videos: usize,
    pub num_classes: usize,
    pub frames: usize,
    /// Frame height and width.
    pub size: usize,
    pub fps: f64,
    /// Activity duration range in frames, inclusive.
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_activities: usize,
    pub max_activities: usize,
    /// Allow activity intervals to overlap.
    pub overlapping: bool,
    /// Tint each class with its own color. When false all classes share one
    /// appearance and only motion tells them apart.
    pub appearance_cue: bool,
    /// Side of the moving block in pixels.
    pub block: usize,
    /// Half-width of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            num_test_videos: 50,
            num_classes: 3,
            frames: 96,
            size: 32,
            fps: 8.0,
            min_duration: 16,
            max_duration: 40,
            min_activities: 1,
            max_activities: 2,
            overlapping: false,
            appearance_cue: true,
            block: 10,
            noise: 0.15,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("frames", self.frames),
            ("size", self.size),
            ("min_duration", self.min_duration),
            ("block", self.block),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frames < 2 {
            return Err(Error::Config("videos need at least two frames".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.min_duration > self.max_duration || self.max_duration > self.frames {
            return Err(Error::Config(format!(
                "duration range [{}, {}] does not fit in {} frames",
                self.min_duration, self.max_duration, self.frames
            )));
        }
        if self.min_activities > self.max_activities {
            return Err(Error::Config("min_activities exceeds max_activities".into()));
        }
        if !self.overlapping && self.max_activities * self.min_duration > self.frames {
            return Err(Error::Config(format!(
                "cannot pack {} non-overlapping activities of at least {} frames into {} frames",
                self.max_activities, self.min_duration, self.frames
            )));
        }
        if self.block > self.size {
            return Err(Error::Config("block larger than the frame".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Reads a flat `key=value` file; keys are the field names and unknown
    /// keys are rejected.
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
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "num_videos" => self.num_videos = parse_value(key, v)?,
            "num_test_videos" => self.num_test_videos = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "frames" => self.frames = parse_value(key, v)?,
            "size" => self.size = parse_value(key, v)?,
            "fps" => self.fps = parse_value(key, v)?,
            "min_duration" => self.min_duration = parse_value(key, v)?,
            "max_duration" => self.max_duration = parse_value(key, v)?,
            "min_activities" => self.min_activities = parse_value(key, v)?,
            "max_activities" => self.max_activities = parse_value(key, v)?,
            "overlapping" => self.overlapping = parse_value(key, v)?,
            "appearance_cue" => self.appearance_cue = parse_value(key, v)?,
            "block" => self.block = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown synth key {other:?}"))),
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| format!("class{k}")).collect()
    }
}

const BASE_VELOCITIES: [(i32, i32); 8] = [
    (-1, 0),
    (1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// Per-frame `(dx, dy)` pixel displacement of class `k`'s block.
pub fn class_velocity(class: usize) -> (i32, i32) {
    let (dx, dy) = BASE_VELOCITIES[class % BASE_VELOCITIES.len()];
    let speed = 1 + (class / BASE_VELOCITIES.len()) as i32;
    (dx * speed, dy * speed)
}

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.15, 0.15, 1.0],
    [1.0, 1.0, 0.15],
    [1.0, 0.15, 1.0],
    [0.15, 1.0, 1.0],
];

/// Look shared by every class when there is no appearance cue; dark so the
/// block stands out from the mid-grey noise.
const SHARED_COLOR: [f64; 3] = [0.05, 0.05, 0.05];

fn class_color(cfg: &SynthConfig, class: usize) -> [f64; 3] {
    if cfg.appearance_cue {
        PALETTE[class % PALETTE.len()]
    } else {
        SHARED_COLOR
    }
}

struct Instance {
    class: usize,
    start: usize,
    end: usize,
    origin: (usize, usize),
}

fn place_instances(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let count = rng.gen_range(cfg.min_activities..=cfg.max_activities);
    let mut durations: Vec<usize> = (0..count)
        .map(|_| rng.gen_range(cfg.min_duration..=cfg.max_duration))
        .collect();
    let mut starts = Vec::with_capacity(count);
    if cfg.overlapping {
        for &d in &durations {
            starts.push(rng.gen_range(0..=cfg.frames - d));
        }
    } else {
        // shrink durations until the instances fit, then scatter the slack
        while durations.iter().sum::<usize>() > cfg.frames {
            let longest = (0..count).max_by_key(|&i| (durations[i], usize::MAX - i)).unwrap();
            durations[longest] -= 1;
        }
        let slack = cfg.frames - durations.iter().sum::<usize>();
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (i, &d) in durations.iter().enumerate() {
            cursor += cuts[i] - prev_cut;
            prev_cut = cuts[i];
            starts.push(cursor);
            cursor += d;
        }
    }
    durations
        .iter()
        .zip(starts)
        .map(|(&d, start)| Instance {
            class: rng.gen_range(0..cfg.num_classes),
            start,
            end: start + d,
            origin: (rng.gen_range(0..cfg.size), rng.gen_range(0..cfg.size)),
        })
        .collect()
}

/// Renders video `index` of the corpus; identical for identical
/// `(cfg, index)`.
pub fn render_video(cfg: &SynthConfig, index: usize) -> VideoSample<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let (l, s) = (cfg.frames, cfg.size);
    let frame = s * s;
    let mut rgb = vec![0f32; 3 * l * frame];
    for v in rgb.iter_mut() {
        *v = (0.5 + cfg.noise * (2.0 * rng.gen::<f64>() - 1.0)) as f32;
    }
    let mut flow = vec![0f32; 2 * (l - 1) * frame];
    let instances = place_instances(cfg, &mut rng);
    for inst in &instances {
        let (vx, vy) = class_velocity(inst.class);
        let color = class_color(cfg, inst.class);
        for t in inst.start..inst.end {
            let step = (t - inst.start) as i64;
            let x0 = (inst.origin.0 as i64 + vx as i64 * step).rem_euclid(s as i64) as usize;
            let y0 = (inst.origin.1 as i64 + vy as i64 * step).rem_euclid(s as i64) as usize;
            let moving = t + 1 < inst.end;
            for by in 0..cfg.block {
                for bx in 0..cfg.block {
                    let (x, y) = ((x0 + bx) % s, (y0 + by) % s);
                    // 2-pixel checker texture so motion is visible inside the block
                    let shade = if (bx / 2 + by / 2) % 2 == 0 { 1.0 } else { 0.55 };
                    for c in 0..3 {
                        rgb[(c * l + t) * frame + y * s + x] = (color[c] * shade) as f32;
                    }
                    if moving {
                        flow[t * frame + y * s + x] = vx as f32;
                        flow[((l - 1) + t) * frame + y * s + x] = vy as f32;
                    }
                }
            }
        }
    }
    let annotations = instances
        .iter()
        .map(|inst| Annotation {
            label: inst.class,
            start: inst.start as f64 / cfg.fps,
            end: inst.end as f64 / cfg.fps,
        })
        .collect();
    VideoSample {
        id: format!("synth_{index:05}"),
        fps: cfg.fps,
        rgb: Tensor::new([3, l, s, s], rgb).expect("rgb shape"),
        flow: Tensor::new([2, l - 1, s, s], flow).expect("flow shape"),
        annotations,
    }
}

/// Renders videos `range` in parallel.
pub fn render_split(cfg: &SynthConfig, range: std::ops::Range<usize>) -> Dataset<f32> {
    let videos = range.into_par_iter().map(|i| render_video(cfg, i)).collect();
    Dataset {
        classes: cfg.class_names(),
        videos,
    }
}

/// Paths written by [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Writes `train.json`, `test.json` and their tensor files under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = render_split(cfg, 0..cfg.num_videos);
    let test = render_split(cfg, cfg.num_videos..cfg.num_videos + cfg.num_test_videos);
    let train_manifest = out_dir.join("train.json");
    let test_manifest = out_dir.join("test.json");
    save_dataset(&train_manifest, &train)?;
    save_dataset(&test_manifest, &test)?;
    let cfg_path = out_dir.join("synth.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
    })
}
