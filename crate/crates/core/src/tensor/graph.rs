//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so reverse insertion order is a
//! valid reverse topological order and `backward` visits every recorded op
//! exactly once.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, Conv3dGeometry, Pool3dGeometry};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maps the upstream gradient of a node to gradients for each of its inputs.
pub type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>> + Send + Sync>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, usize)>,
    by_name: HashMap<String, usize>,
    recording: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S: Scalar> {
    grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn from_map(grads: BTreeMap<String, Tensor<S>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<S>> {
        self.grads
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// A graph that records backward closures for every op.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            by_name: HashMap::new(),
            recording: true,
        }
    }

    /// A forward-only graph: parameters are treated as constants and no
    /// backward state is kept.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable tensor. Registering a name twice returns the
    /// original handle.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Var {
        if let Some(&id) = self.by_name.get(name) {
            return Var(id);
        }
        let recording = self.recording;
        let var = self.leaf(value, recording);
        self.by_name.insert(name.to_string(), var.0);
        self.params.push((name.to_string(), var.0));
        var
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. `make_backward` is only invoked when some input needs a
    /// gradient; its closure receives the upstream gradient and returns one
    /// optional gradient per input.
    pub fn record<F>(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        inputs: &[Var],
        make_backward: F,
    ) -> Result<Var>
    where
        F: FnOnce() -> BackwardFn<S>,
    {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then(make_backward);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Every registered parameter appears in the result; parameters not
    /// reachable from `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let input_grads = backward(&upstream);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &g)| *a += g),
                    None => grads[input] = Some(grad),
                }
            }
            // parameters keep their gradient; intermediates are dropped above
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.nodes[*id].value.shape().to_vec();
            let grad = match grads.get_mut(*id).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), grad);
        }
        Ok(Gradients { grads: out })
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let w = self.value(weight).clone();
        let b = self.value(bias).clone();
        let geo = Conv3dGeometry::new(x.shape(), w.shape(), stride, pad)?;
        if b.shape() != [geo.out_channels] {
            return Err(Error::dim(
                "conv3d",
                "bias",
                format!("expected [{}], got {:?}", geo.out_channels, b.shape()),
            ));
        }
        let out = kernels::conv3d_forward(&geo, x.data(), w.data(), b.data());
        let value = Tensor::new(geo.output_shape(), out)?;
        let need_input = self.requires_grad(input);
        self.record("conv3d", value, &[input, weight, bias], move || {
            Box::new(move |g| {
                let (gi, gw, gb) =
                    kernels::conv3d_backward(&geo, x.data(), w.data(), g, need_input);
                vec![gi, Some(gw), Some(gb)]
            })
        })
    }

    pub fn maxpool3d(&mut self, input: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let x = self.value(input);
        let geo = Pool3dGeometry::new(x.shape(), kernel, stride)?;
        let (vals, argmax) = kernels::maxpool3d_forward(&geo, x.data());
        let input_len = x.len();
        let value = Tensor::new(geo.output_shape(), vals)?;
        self.record("maxpool3d", value, &[input], move || {
            Box::new(move |g| vec![Some(kernels::scatter_argmax(input_len, &argmax, g))])
        })
    }

    /// `[N, D] · [D, M] + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let w = self.value(weight).clone();
        let b = self.value(bias);
        if x.rank() != 2 || w.rank() != 2 {
            return Err(Error::dim(
                "linear",
                "rank",
                format!("expected [N,D]·[D,M], got {:?}·{:?}", x.shape(), w.shape()),
            ));
        }
        let (n, d, m) = (x.dim(0), x.dim(1), w.dim(1));
        if w.dim(0) != d {
            return Err(Error::dim(
                "linear",
                "inner",
                format!("input width {} vs weight rows {}", d, w.dim(0)),
            ));
        }
        if b.shape() != [m] {
            return Err(Error::dim("linear", "bias", format!("expected [{}], got {:?}", m, b.shape())));
        }
        let out = kernels::linear_forward(x.data(), w.data(), b.data(), n, d, m);
        let value = Tensor::new([n, m], out)?;
        self.record("linear", value, &[input, weight, bias], move || {
            Box::new(move |g| {
                let (gi, gw, gb) = kernels::linear_backward(x.data(), w.data(), g, n, d, m);
                vec![Some(gi), Some(gw), Some(gb)]
            })
        })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = x.map(|v| v.max(S::zero()));
        let mask: Vec<bool> = x.data().iter().map(|&v| v > S::zero()).collect();
        self.record("relu", value, &[input], move || {
            Box::new(move |g| {
                let gi = g
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { g } else { S::zero() })
                    .collect();
                vec![Some(gi)]
            })
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa
                .iter()
                .zip(sb)
                .position(|(x, y)| x != y)
                .map_or_else(|| "rank".to_string(), |i| i.to_string());
            return Err(Error::dim(op, axis, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    /// Element-wise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_sum", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.record("elementwise_sum", value, &[a, b], || {
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.record("mul", value, &[a, b], move || {
            Box::new(move |g| {
                let ga = g.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            })
        })
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        self.record("scale", value, &[input], move || {
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * factor).collect())])
        })
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.len();
        let value = Tensor::scalar(x.sum());
        self.record("sum", value, &[input], move || Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::dim(
                "concat",
                "rank",
                format!("{:?} vs {:?} along axis {}", sa, sb, axis),
            ));
        }
        for i in 0..sa.len() {
            if i != axis && sa[i] != sb[i] {
                return Err(Error::dim("concat", i, format!("{:?} vs {:?}", sa, sb)));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&vb[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        self.record("concat", value, &[a, b], move || {
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(outer * ca);
                let mut gb = Vec::with_capacity(outer * cb);
                for o in 0..outer {
                    let row = &g[o * (ca + cb)..(o + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![Some(ga), Some(gb)]
            })
        })
    }

    /// Concatenates along the channel axis: axis 0 of `[C,T,H,W]` maps,
    /// axis 1 of `[N,D]` feature rows.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let axis = if self.shape(a).len() == 2 { 1 } else { 0 };
        self.concat(a, b, axis)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        self.record("reshape", value, &[input], || Box::new(|g| vec![Some(g.to_vec())]))
    }

    /// Builds a tensor of `shape` whose i-th element is `input[indices[i]]`.
    ///
    /// Covers row selection, transposition and per-class slicing; the
    /// backward pass scatter-adds.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::dim(
                "gather",
                "*",
                format!("{} indices for shape {:?}", indices.len(), shape),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::dim("gather", "index", format!("{} >= {}", bad, x.len())));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let input_len = x.len();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.record("gather", value, &[input], move || {
            Box::new(move |g| vec![Some(kernels::scatter_argmax(input_len, &indices, g))])
        })
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class indices.
    /// An empty batch yields 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.dim(0) != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                "rows",
                format!("logits {:?} for {} labels", x.shape(), labels.len()),
            ));
        }
        let classes = x.dim(1);
        let n = labels.len();
        let losses = kernels::cross_entropy_rows(x.data(), labels, classes)?;
        let mean = if n == 0 {
            S::zero()
        } else {
            losses.iter().copied().sum::<S>() / S::from_usize(n).unwrap()
        };
        let probs = kernels::softmax_rows(x.data(), classes);
        let labels = labels.to_vec();
        self.record("softmax_cross_entropy", Tensor::scalar(mean), &[logits], move || {
            Box::new(move |g| {
                let scale = g[0] / S::from_usize(n.max(1)).unwrap();
                let mut gi: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gi[r * classes + l] -= scale;
                }
                vec![Some(gi)]
            })
        })
    }

    /// `Σ_r weight_r · Σ_d smooth_l1(pred[r,d] − target[r,d]) / normalizer`.
    ///
    /// Rows with weight 0 contribute neither loss nor gradient. A zero
    /// normalizer yields a zero loss.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: &Tensor<S>,
        row_weights: &[S],
        normalizer: S,
    ) -> Result<Var> {
        let p = self.value(pred).clone();
        if p.shape() != target.shape() {
            return Err(Error::dim(
                "smooth_l1",
                "*",
                format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let rows = row_weights.len();
        if rows == 0 && !p.is_empty() || rows > 0 && !p.len().is_multiple_of(rows) {
            return Err(Error::dim(
                "smooth_l1",
                "rows",
                format!("{} row weights for shape {:?}", rows, p.shape()),
            ));
        }
        let width = if rows == 0 { 0 } else { p.len() / rows };
        let diffs: Vec<S> = p.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let mut total = S::zero();
        if normalizer != S::zero() {
            for (r, &w) in row_weights.iter().enumerate() {
                if w != S::zero() {
                    let row: S = diffs[r * width..(r + 1) * width]
                        .iter()
                        .map(|&d| kernels::smooth_l1(d))
                        .sum();
                    total += w * row;
                }
            }
            total /= normalizer;
        }
        let weights = row_weights.to_vec();
        self.record("smooth_l1", Tensor::scalar(total), &[pred], move || {
            Box::new(move |g| {
                let mut gi = vec![S::zero(); diffs.len()];
                if normalizer != S::zero() {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        for d in r * width..(r + 1) * width {
                            gi[d] = g[0] * w * kernels::smooth_l1_grad(diffs[d]) / normalizer;
                        }
                    }
                }
                vec![Some(gi)]
            })
        })
    }
}
