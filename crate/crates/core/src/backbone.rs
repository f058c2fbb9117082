//! C3D-shaped convolutional feature extractor, flow-stream initialization
//! and two-stream feature fusion.
//!
//! Layout: conv1a, pool1 (1,2,2), conv2a, pool2 (2,2,2), conv3a, conv3b,
//! pool3 (2,2,2), conv4a, conv4b, pool4 (2,2,2), conv5a, conv5b. Every conv
//! is 3×3×3 with padding 1 and a ReLU; there is no pool5, so the output
//! grid is the input downsampled ×8 in time and ×16 in space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const SPATIAL_STRIDE: usize = 16;

/// Conv layer names with their stage index into the width table.
pub const LAYERS: [(&str, usize); 8] = [
    ("conv1a", 0),
    ("conv2a", 1),
    ("conv3a", 2),
    ("conv3b", 2),
    ("conv4a", 3),
    ("conv4b", 3),
    ("conv5a", 4),
    ("conv5b", 4),
];

/// Pool applied after each layer of [`LAYERS`].
const POOLS: [Option<[usize; 3]>; 8] = [
    Some([1, 2, 2]),
    Some([2, 2, 2]),
    None,
    Some([2, 2, 2]),
    None,
    Some([2, 2, 2]),
    None,
    None,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel widths of the five conv stages.
    pub widths: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            widths: [8, 16, 32, 32, 32],
        }
    }

    /// Full C3D widths.
    pub fn full_scale() -> Self {
        Self {
            widths: [64, 128, 256, 512, 512],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.widths[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }

    /// Output shape for an input of `[C, L, H, W]` (RGB) after the
    /// divisibility checks the forward pass performs.
    pub fn output_shape(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 4]> {
        check_divisible(frames, height, width)?;
        Ok([
            self.out_channels(),
            frames / 8,
            height / SPATIAL_STRIDE,
            width / SPATIAL_STRIDE,
        ])
    }

    pub fn init<S: Scalar, R: Rng>(
        &self,
        store: &mut ParamStore<S>,
        prefix: &str,
        in_channels: usize,
        rng: &mut R,
    ) {
        let mut c_in = in_channels;
        for (name, stage) in LAYERS {
            let c_out = self.widths[stage];
            store.insert(
                format!("{prefix}.{name}.weight"),
                fan_in_uniform([c_out, c_in, 3, 3, 3], c_in * 27, rng),
            );
            store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros([c_out]));
            c_in = c_out;
        }
    }
}

fn check_divisible(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames == 0 || !frames.is_multiple_of(8) {
        return Err(Error::dim("backbone", "time", format!("{frames} frames not divisible by 8")));
    }
    if height == 0 || !height.is_multiple_of(SPATIAL_STRIDE) {
        return Err(Error::dim("backbone", "height", format!("{height} not divisible by 16")));
    }
    if width == 0 || !width.is_multiple_of(SPATIAL_STRIDE) {
        return Err(Error::dim("backbone", "width", format!("{width} not divisible by 16")));
    }
    Ok(())
}

/// The two input modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Stream::Rgb => 3,
            Stream::Flow => 2,
        }
    }
}

/// Runs one stream. `frozen_layers` leading conv layers enter the graph as
/// constants.
///
/// The flow input `[2, L-1, H, W]` is padded with one zero frame at the end
/// so both streams share the same temporal grid.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamStore<S>,
    stream: Stream,
    input: Var,
    frozen_layers: usize,
) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 4 || shape[0] != stream.in_channels() {
        return Err(Error::dim(
            "backbone",
            "channel",
            format!("{:?} stream expects [{},L,H,W], got {:?}", stream, stream.in_channels(), shape),
        ));
    }
    let prefix = stream.prefix();
    let mut x = input;
    if stream == Stream::Flow {
        let pad = g.constant(Tensor::zeros([shape[0], 1, shape[2], shape[3]]));
        x = g.concat(x, pad, 1)?;
    }
    let s = g.shape(x).to_vec();
    check_divisible(s[1], s[2], s[3])?;
    for (i, (name, _)) in LAYERS.iter().enumerate() {
        let (wn, bn) = (format!("{prefix}.{name}.weight"), format!("{prefix}.{name}.bias"));
        let (w, b) = if i < frozen_layers {
            (params.frozen(g, &wn)?, params.frozen(g, &bn)?)
        } else {
            (params.var(g, &wn)?, params.var(g, &bn)?)
        };
        x = g.conv3d(x, w, b, [1, 1, 1], [1, 1, 1])?;
        x = g.relu(x)?;
        if let Some(k) = POOLS[i] {
            x = g.maxpool3d(x, k, k)?;
        }
    }
    Ok(x)
}

/// Copies an RGB stream to a 2-channel flow stream. The first layer's
/// kernels are averaged over the three colour channels and replicated on
/// both flow channels; deeper layers are copied unchanged.
pub fn init_flow_from_rgb<S: Scalar>(
    params: &mut ParamStore<S>,
    rgb_prefix: &str,
    flow_prefix: &str,
) -> Result<()> {
    let first = format!("{rgb_prefix}.{}.weight", LAYERS[0].0);
    let w = params.get(&first)?.clone();
    let ws = w.shape().to_vec();
    if ws.len() != 5 || ws[1] != 3 {
        return Err(Error::dim(
            "init_flow_from_rgb",
            "channel",
            format!("first RGB layer must have 3 input channels, got {:?}", ws),
        ));
    }
    let kernel: usize = ws[2..].iter().product();
    let three = S::from_f64_lossy(3.0);
    let mut flow_w = Vec::with_capacity(ws[0] * 2 * kernel);
    for co in 0..ws[0] {
        let base = co * 3 * kernel;
        let avg: Vec<S> = (0..kernel)
            .map(|k| {
                let d = w.data();
                (d[base + k] + d[base + kernel + k] + d[base + 2 * kernel + k]) / three
            })
            .collect();
        flow_w.extend_from_slice(&avg);
        flow_w.extend_from_slice(&avg);
    }
    let copies: Vec<(String, Tensor<S>)> = params
        .iter()
        .filter_map(|(name, t)| {
            name.strip_prefix(&format!("{rgb_prefix}."))
                .map(|rest| (format!("{flow_prefix}.{rest}"), t.clone()))
        })
        .collect();
    for (name, t) in copies {
        params.insert(name, t);
    }
    params.insert(
        format!("{flow_prefix}.{}.weight", LAYERS[0].0),
        Tensor::new([ws[0], 2, ws[2], ws[3], ws[4]], flow_w)?,
    );
    Ok(())
}

/// How the two streams are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Sum,
    Concat,
}

/// Element-wise sum, or concatenation along the channel axis.
pub fn fuse<S: Scalar>(g: &mut Graph<S>, rgb: Var, flow: Var, mode: Fusion) -> Result<Var> {
    match mode {
        Fusion::Sum => g.add(rgb, flow),
        Fusion::Concat => g.concat_channels(rgb, flow),
    }
}
