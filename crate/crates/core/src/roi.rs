//! 3D region-of-interest max pooling of temporal proposals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Segment, TEMPORAL_STRIDE};
use crate::scalar::Scalar;
use crate::tensor::kernels::scatter_argmax;
use crate::tensor::{Graph, Tensor, Var};

/// Output bins `(time, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiGrid {
    pub time: usize,
    pub height: usize,
    pub width: usize,
}

impl RoiGrid {
    pub fn new(time: usize, height: usize, width: usize) -> Result<Self> {
        let grid = Self {
            time,
            height,
            width,
        };
        if time == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("roi grid bins must be >= 1, got {:?}", grid)));
        }
        Ok(grid)
    }

    pub fn full() -> Self {
        Self {
            time: 1,
            height: 4,
            width: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            time: 1,
            height: 2,
            width: 2,
        }
    }

    pub fn bins(&self) -> usize {
        self.time * self.height * self.width
    }
}

/// Feature cells `[start, end)` covered by a proposal in frame units: ends
/// are divided by the temporal stride, rounded outward and clamped to
/// `[0, steps)`.
pub fn proposal_cells(proposal: &Segment, steps: usize) -> Result<(usize, usize)> {
    let stride = TEMPORAL_STRIDE as f64;
    let lo = (proposal.start() / stride).floor().max(0.0);
    let hi = (proposal.end() / stride).ceil().min(steps as f64);
    if !(hi > lo) || !proposal.is_valid() {
        return Err(Error::Domain(format!(
            "proposal [{}, {}) lies outside the {}-step feature map",
            proposal.start(),
            proposal.end(),
            steps
        )));
    }
    Ok((lo as usize, hi as usize))
}

/// Splits `span` cells into `n` contiguous bins with boundaries
/// `round(k·span/n)`. An empty bin takes the cell under its center.
pub fn bin_ranges(span: usize, n: usize) -> Vec<(usize, usize)> {
    let edge = |k: usize| ((k * span) as f64 / n as f64).round() as usize;
    (0..n)
        .map(|k| {
            let (a, b) = (edge(k), edge(k + 1));
            if b > a {
                (a, b)
            } else {
                let c = (((k as f64 + 0.5) * span as f64 / n as f64).floor() as usize).min(span - 1);
                (c, c + 1)
            }
        })
        .collect()
}

/// Pools one proposal from `feat` (`[C, T, H, W]`) into `[C, l, h, w]`,
/// returning values and flat argmax indices into `feat`.
pub fn roi_pool_forward<S: Scalar>(
    feat: &Tensor<S>,
    proposal: &Segment,
    grid: RoiGrid,
) -> Result<(Vec<S>, Vec<usize>)> {
    let s = feat.shape();
    if s.len() != 4 {
        return Err(Error::dim("roi_pool_3d", "rank", format!("expected [C,T,H,W], got {:?}", s)));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (t0, t1) = proposal_cells(proposal, t)?;
    let tb: Vec<_> = bin_ranges(t1 - t0, grid.time)
        .into_iter()
        .map(|(a, b)| (a + t0, b + t0))
        .collect();
    let hb = bin_ranges(h, grid.height);
    let wb = bin_ranges(w, grid.width);
    let data = feat.data();
    let n = c * grid.bins();
    let mut values = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for ch in 0..c {
        for &(ta, tz) in &tb {
            for &(ha, hz) in &hb {
                for &(wa, wz) in &wb {
                    let mut best = usize::MAX;
                    let mut best_v = S::neg_infinity();
                    for ti in ta..tz {
                        for hi in ha..hz {
                            let row = ((ch * t + ti) * h + hi) * w;
                            for wi in wa..wz {
                                let v = data[row + wi];
                                if best == usize::MAX || v > best_v {
                                    best = row + wi;
                                    best_v = v;
                                }
                            }
                        }
                    }
                    values.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((values, argmax))
}

/// Pools a single proposal to `[C, l, h, w]` on the graph.
pub fn roi_pool_3d<S: Scalar>(
    g: &mut Graph<S>,
    feat: Var,
    proposal: &Segment,
    grid: RoiGrid,
) -> Result<Var> {
    let out = roi_pool_batch(g, feat, std::slice::from_ref(proposal), grid)?;
    let c = g.shape(feat)[0];
    g.reshape(out, &[c, grid.time, grid.height, grid.width])
}

/// Pools every proposal and flattens: `[N, C·l·h·w]`.
pub fn roi_pool_batch<S: Scalar>(
    g: &mut Graph<S>,
    feat: Var,
    proposals: &[Segment],
    grid: RoiGrid,
) -> Result<Var> {
    let fv = g.value(feat);
    let width = fv.dim(0) * grid.bins();
    let input_len = fv.len();
    let mut values = Vec::with_capacity(proposals.len() * width);
    let mut argmax = Vec::with_capacity(proposals.len() * width);
    for p in proposals {
        let (v, a) = roi_pool_forward(fv, p, grid)?;
        values.extend(v);
        argmax.extend(a);
    }
    let value = Tensor::new([proposals.len(), width], values)?;
    g.record("roi_pool_3d", value, &[feat], move || {
        Box::new(move |grad| vec![Some(scatter_argmax(input_len, &argmax, grad))])
    })
}
