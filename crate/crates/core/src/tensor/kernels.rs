//! Tape-free compute kernels.
//!
//! Every differentiable graph op is a thin wrapper over a forward/backward
//! pair defined here, so inference paths can call the kernels directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a 3D convolution over a `[C, T, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

const AXES: [&str; 3] = ["time", "height", "width"];

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::dim(
                "conv3d",
                "rank",
                format!("input must be [C,T,H,W], got {:?}", input_shape),
            ));
        }
        if weight_shape.len() != 5 {
            return Err(Error::dim(
                "conv3d",
                "rank",
                format!("weight must be [Co,Ci,kt,kh,kw], got {:?}", weight_shape),
            ));
        }
        if weight_shape[1] != input_shape[0] {
            return Err(Error::dim(
                "conv3d",
                "channel",
                format!(
                    "weight expects {} input channels, input has {}",
                    weight_shape[1], input_shape[0]
                ),
            ));
        }
        let mut output = [0; 3];
        let mut kernel = [0; 3];
        for a in 0..3 {
            let extent = input_shape[a + 1];
            let k = weight_shape[a + 2];
            if stride[a] == 0 {
                return Err(Error::dim("conv3d", AXES[a], "stride must be >= 1"));
            }
            if k == 0 || k > extent + 2 * pad[a] {
                return Err(Error::dim(
                    "conv3d",
                    AXES[a],
                    format!("kernel {} does not fit padded extent {}", k, extent + 2 * pad[a]),
                ));
            }
            kernel[a] = k;
            output[a] = (extent + 2 * pad[a] - k) / stride[a] + 1;
        }
        Ok(Self {
            in_channels: input_shape[0],
            out_channels: weight_shape[0],
            input: [input_shape[1], input_shape[2], input_shape[3]],
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn frames_per_chunk(&self) -> usize {
        // keep each column buffer around 2^20 elements
        let per_frame = self.patch_len() * self.plane();
        (1 << 20).max(per_frame) / per_frame.max(1)
    }

    /// Unfolds output frames `[t0, t1)` into a `[patch_len, (t1-t0)·plane]` matrix.
    fn im2col<S: Scalar>(&self, input: &[S], t0: usize, t1: usize, col: &mut Vec<S>) {
        let [_, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let [_, oh, ow] = self.output;
        let n = (t1 - t0) * oh * ow;
        col.clear();
        col.resize(self.patch_len() * n, S::zero());
        let frame = ih * iw;
        let vol = self.input[0] * frame;
        let mut row = 0;
        for c in 0..self.in_channels {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let dst = &mut col[row * n..(row + 1) * n];
                        let mut j = 0;
                        for t in t0..t1 {
                            let it = (t * st + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= self.input[0] {
                                j += oh * ow;
                                continue;
                            }
                            let base = c * vol + it as usize * frame;
                            for y in 0..oh {
                                let iy = (y * sh + dh) as isize - ph as isize;
                                if iy < 0 || iy as usize >= ih {
                                    j += ow;
                                    continue;
                                }
                                let src = &input[base + iy as usize * iw..base + (iy as usize + 1) * iw];
                                for x in 0..ow {
                                    let ix = (x * sw + dw) as isize - pw as isize;
                                    if ix >= 0 && (ix as usize) < iw {
                                        dst[j] = src[ix as usize];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into `grad_input`.
    fn col2im<S: Scalar>(&self, col: &[S], t0: usize, t1: usize, grad_input: &mut [S]) {
        let [_, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let [_, oh, ow] = self.output;
        let n = (t1 - t0) * oh * ow;
        let frame = ih * iw;
        let vol = self.input[0] * frame;
        let mut row = 0;
        for c in 0..self.in_channels {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let src = &col[row * n..(row + 1) * n];
                        let mut j = 0;
                        for t in t0..t1 {
                            let it = (t * st + dt) as isize - pt as isize;
                            if it < 0 || it as usize >= self.input[0] {
                                j += oh * ow;
                                continue;
                            }
                            let base = c * vol + it as usize * frame;
                            for y in 0..oh {
                                let iy = (y * sh + dh) as isize - ph as isize;
                                if iy < 0 || iy as usize >= ih {
                                    j += ow;
                                    continue;
                                }
                                let off = base + iy as usize * iw;
                                for x in 0..ow {
                                    let ix = (x * sw + dw) as isize - pw as isize;
                                    if ix >= 0 && (ix as usize) < iw {
                                        grad_input[off + ix as usize] += src[j];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<S: Scalar>(
    geo: &Conv3dGeometry,
    input: &[S],
    weight: &[S],
    bias: &[S],
) -> Vec<S> {
    let k = geo.patch_len();
    let plane = geo.plane();
    let frames = geo.output[0];
    let total = frames * plane;
    let mut out = vec![S::zero(); geo.out_channels * total];
    let chunk = geo.frames_per_chunk();
    let mut col = Vec::new();
    let mut t0 = 0;
    while t0 < frames {
        let t1 = (t0 + chunk).min(frames);
        let n = (t1 - t0) * plane;
        geo.im2col(input, t0, t1, &mut col);
        S::gemm(
            geo.out_channels,
            k,
            n,
            S::one(),
            weight,
            (k as isize, 1),
            &col,
            (n as isize, 1),
            S::zero(),
            &mut out[t0 * plane..],
            (total as isize, 1),
        );
        t0 = t1;
    }
    for (co, row) in out.chunks_mut(total.max(1)).enumerate() {
        let b = bias[co];
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is skipped
/// when `need_input` is false.
pub fn conv3d_backward<S: Scalar>(
    geo: &Conv3dGeometry,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    need_input: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let k = geo.patch_len();
    let plane = geo.plane();
    let frames = geo.output[0];
    let total = frames * plane;
    let co = geo.out_channels;
    let mut grad_w = vec![S::zero(); co * k];
    let grad_b: Vec<S> = grad_out
        .chunks(total.max(1))
        .map(|row| row.iter().copied().sum())
        .take(co)
        .collect();
    let mut grad_in = need_input.then(|| vec![S::zero(); input.len()]);
    let chunk = geo.frames_per_chunk();
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let mut t0 = 0;
    while t0 < frames {
        let t1 = (t0 + chunk).min(frames);
        let n = (t1 - t0) * plane;
        geo.im2col(input, t0, t1, &mut col);
        let dy = &grad_out[t0 * plane..];
        S::gemm(
            co,
            n,
            k,
            S::one(),
            dy,
            (total as isize, 1),
            &col,
            (1, n as isize),
            S::one(),
            &mut grad_w,
            (k as isize, 1),
        );
        if let Some(gi) = grad_in.as_mut() {
            dcol.clear();
            dcol.resize(k * n, S::zero());
            S::gemm(
                k,
                co,
                n,
                S::one(),
                weight,
                (1, k as isize),
                dy,
                (total as isize, 1),
                S::zero(),
                &mut dcol,
                (n as isize, 1),
            );
            geo.col2im(&dcol, t0, t1, gi);
        }
        t0 = t1;
    }
    (grad_in, grad_w, grad_b)
}

/// Geometry of an unpadded 3D max pooling over `[C, T, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool3dGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl Pool3dGeometry {
    pub fn new(input_shape: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::dim(
                "maxpool3d",
                "rank",
                format!("input must be [C,T,H,W], got {:?}", input_shape),
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let extent = input_shape[a + 1];
            if stride[a] == 0 {
                return Err(Error::dim("maxpool3d", AXES[a], "stride must be >= 1"));
            }
            if kernel[a] == 0 || kernel[a] > extent {
                return Err(Error::dim(
                    "maxpool3d",
                    AXES[a],
                    format!("kernel {} larger than input extent {}", kernel[a], extent),
                ));
            }
            output[a] = (extent - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            channels: input_shape[0],
            input: [input_shape[1], input_shape[2], input_shape[3]],
            kernel,
            stride,
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.channels, self.output[0], self.output[1], self.output[2]]
    }
}

/// Max pooling; returns values and the flat input index of each window's
/// maximum (lowest flat index on ties).
pub fn maxpool3d_forward<S: Scalar>(geo: &Pool3dGeometry, input: &[S]) -> (Vec<S>, Vec<usize>) {
    let [it, ih, iw] = geo.input;
    let [ot, oh, ow] = geo.output;
    let [kt, kh, kw] = geo.kernel;
    let [st, sh, sw] = geo.stride;
    let n = geo.channels * ot * oh * ow;
    let mut values = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for c in 0..geo.channels {
        let base = c * it * ih * iw;
        for t in 0..ot {
            for y in 0..oh {
                for x in 0..ow {
                    // window cells are visited in increasing flat order, so a
                    // strict comparison keeps the lowest index on ties
                    let mut best = usize::MAX;
                    let mut best_v = S::neg_infinity();
                    for dt in 0..kt {
                        for dy in 0..kh {
                            let row = base + ((t * st + dt) * ih + y * sh + dy) * iw + x * sw;
                            for dx in 0..kw {
                                let v = input[row + dx];
                                if best == usize::MAX || v > best_v {
                                    best = row + dx;
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
    (values, argmax)
}

/// Scatters `grad_out` onto the recorded argmax positions.
pub fn scatter_argmax<S: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[S]) -> Vec<S> {
    let mut grad = vec![S::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad[idx] += g;
    }
    grad
}

/// `[N, D] · [D, M] + bias[M]`.
pub fn linear_forward<S: Scalar>(
    input: &[S],
    weight: &[S],
    bias: &[S],
    n: usize,
    d: usize,
    m: usize,
) -> Vec<S> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    S::gemm(
        n,
        d,
        m,
        S::one(),
        input,
        (d as isize, 1),
        weight,
        (m as isize, 1),
        S::one(),
        &mut out,
        (m as isize, 1),
    );
    out
}

pub fn linear_backward<S: Scalar>(
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    n: usize,
    d: usize,
    m: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gi = vec![S::zero(); n * d];
    S::gemm(
        n,
        m,
        d,
        S::one(),
        grad_out,
        (m as isize, 1),
        weight,
        (1, m as isize),
        S::zero(),
        &mut gi,
        (d as isize, 1),
    );
    let mut gw = vec![S::zero(); d * m];
    S::gemm(
        d,
        n,
        m,
        S::one(),
        input,
        (1, d as isize),
        grad_out,
        (m as isize, 1),
        S::zero(),
        &mut gw,
        (m as isize, 1),
    );
    let mut gb = vec![S::zero(); m];
    for row in grad_out.chunks(m.max(1)) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    (gi, gw, gb)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(logits: &[S], classes: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes.max(1)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        let mut total = S::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|p| *p /= total);
    }
    out
}

/// Per-row cross-entropy `logsumexp(row) - row[label]`.
pub fn cross_entropy_rows<S: Scalar>(
    logits: &[S],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<S>> {
    if logits.len() != labels.len() * classes {
        return Err(Error::dim(
            "softmax_cross_entropy",
            "rows",
            format!("{} logits for {} labels x {} classes", logits.len(), labels.len(), classes),
        ));
    }
    logits
        .chunks(classes.max(1))
        .zip(labels)
        .map(|(row, &label)| {
            if label >= classes {
                return Err(Error::Label {
                    op: "softmax_cross_entropy",
                    label,
                    classes,
                });
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            Ok(lse - row[label])
        })
        .collect()
}

/// Smooth L1 with transition at 1.
pub fn smooth_l1<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    if x.abs() < S::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// Derivative of [`smooth_l1`], clamped to ±1.
pub fn smooth_l1_grad<S: Scalar>(x: S) -> S {
    if x.abs() < S::one() {
        x
    } else {
        x.signum()
    }
}
