//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! only visits nodes that depend on a leaf requiring gradients, so frozen
//! sub-networks cost nothing on the way back.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat {
        a: Var,
        b: Var,
    },
    Softmax(Var),
    MaskCells {
        x: Var,
        keep: Vec<bool>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Maximum(Var, Var),
    Mean(Var),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<i32>,
        divisor: f64,
    },
    SigmoidBce {
        x: Var,
        targets: Vec<f32>,
        divisor: f64,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f32>,
        weights: Vec<bool>,
        divisor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Unrounded value of scalar reductions and losses.
    wide: Option<f64>,
}

/// Pixel target meaning "not counted" in [`Graph::softmax_cross_entropy`].
pub const IGNORE: i32 = -1;

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f32>>>,
    params: Vec<(String, Vec<f32>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it required one.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a named parameter.
    pub fn param(&self, name: &str) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds every parameter gradient into the store, in sorted name order.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.params {
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if t.requires_grad() {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            wide: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, needs_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(value as f32), op, needs_grad);
        self.nodes[v.0].wide = Some(value);
        v
    }

    /// Which side of its kink every ReLU and max element is on, in
    /// recording order. Two evaluations with equal patterns lie on the same
    /// smooth piece of the graph's function.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|&v| v > 0.0)),
                Op::Maximum(a, b) => {
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    out.extend(av.iter().zip(bv).map(|(x, y)| x >= y));
                }
                _ => {}
            }
        }
        out
    }

    /// Value of a one-element node in f64. Reductions and losses keep their
    /// 64-bit accumulation here, as do sums and scalings of such nodes.
    pub fn scalar_f64(&self, v: Var) -> Option<f64> {
        let n = &self.nodes[v.0];
        if n.value.numel() != 1 {
            return None;
        }
        Some(n.wide.unwrap_or(n.value.data()[0] as f64))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant or input tensor. Gradients are tracked when the
    /// tensor has `requires_grad` set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a named parameter from the store; repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// 2-D convolution of an `N×C×H×W` input with an `O×C×K×K` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, c, h, wd] = xv.dims4()?;
        let [o, ci, k, k2] = wv.dims4()?;
        if ci != c || k != k2 {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        let geom = ConvGeom::forward(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", xv.shape(), wv.shape()))?;
        let y = kernels::conv_forward(xv.data(), n, &geom, wv.data(), o);
        let t = Tensor::new(vec![n, o, geom.oh, geom.ow], y)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                geom,
                batch: n,
            },
            ng,
        ))
    }

    /// Transposed convolution with an `Cin×Cout×K×K` kernel; output spatial
    /// size is `(H − 1)·stride − 2·pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, c, h, wd] = xv.dims4()?;
        let [ci, co, k, k2] = wv.dims4()?;
        if ci != c || k != k2 || stride == 0 {
            return Err(Error::shape("conv_transpose2d", xv.shape(), wv.shape()));
        }
        let geom = ConvGeom::transposed(co, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", xv.shape(), wv.shape()))?;
        let y = kernels::conv_backward_input(xv.data(), n, &geom, wv.data(), ci);
        let t = Tensor::new(vec![n, co, geom.h, geom.w], y)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            t,
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                batch: n,
            },
            ng,
        ))
    }

    /// Adds a per-channel bias of shape `[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let [n, c, h, w] = xv.dims4()?;
        if bv.shape() != [c] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let plane = h * w;
        let mut out = xv.data().to_vec();
        for bi in 0..n {
            for (ch, &bias) in bv.data().iter().enumerate() {
                let s = (bi * c + ch) * plane;
                out[s..s + plane].iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias { x, b }, ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let wide = self.nodes[x.0].wide.map(|w| w * s as f64);
        let v = self.map(x, |v| v * s, Op::Scale(x, s));
        self.nodes[v.0].wide = wide;
        v
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let wide = match (self.nodes[a.0].wide, self.nodes[b.0].wide) {
            (None, None) => None,
            _ => self
                .scalar_f64(a)
                .zip(self.scalar_f64(b))
                .map(|(x, y)| x + y),
        };
        let v = self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))?;
        self.nodes[v.0].wide = wide;
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "maximum", f32::max, Op::Maximum(a, b))
    }

    /// Concatenates two `N×C×H×W` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.dims4()?;
        let [nb, cb, hb, wb] = bv.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", av.shape(), bv.shape()));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for bi in 0..n {
            out.extend_from_slice(&av.data()[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&bv.data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let t = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Concat { a, b }, ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_channels(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceChannels { x, start }, ng))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4()?;
        let mut out = vec![0.0f32; xv.numel()];
        let plane = h * w;
        for bi in 0..n {
            let base = bi * c * plane;
            for p in 0..plane {
                let at = |ch: usize| base + ch * plane + p;
                let m = (0..c)
                    .map(|ch| xv.data()[at(ch)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for ch in 0..c {
                    let e = (xv.data()[at(ch)] - m).exp();
                    out[at(ch)] = e;
                    z += e as f64;
                }
                for ch in 0..c {
                    out[at(ch)] = (out[at(ch)] as f64 / z) as f32;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Zeroes every spatial cell whose `keep` flag is false, across all
    /// channels. `keep` has one entry per `H×W` cell.
    pub fn mask_cells(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4()?;
        if keep.len() != h * w {
            return Err(Error::shape("mask_cells", xv.shape(), &[keep.len()]));
        }
        let mut out = xv.data().to_vec();
        crate::attention::apply_cell_mask(&mut out, n * c, &keep);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaskCells { x, keep }, ng))
    }

    /// Gathers `x.data[index[i]]` into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} values",
                xv.numel()
            )));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Gather { x, index }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push_scalar(s, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.numel() as f64;
        let ng = self.ng(x);
        self.push_scalar(s, Op::Mean(x), ng)
    }

    /// Summed pixelwise softmax cross-entropy over the channel axis, divided
    /// by `divisor`. `targets` holds one class per `(n, y, x)`; pixels set to
    /// [`IGNORE`] contribute neither loss nor gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<i32>,
        divisor: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let [n, c, h, w] = lv.dims4()?;
        if targets.len() != n * h * w {
            return Err(Error::shape(
                "softmax_cross_entropy",
                lv.shape(),
                &[targets.len()],
            ));
        }
        if targets
            .iter()
            .any(|&t| t != IGNORE && (t < 0 || t as usize >= c))
        {
            return Err(Error::InvalidArgument(
                "cross-entropy target out of range".into(),
            ));
        }
        if divisor <= 0.0 {
            return Err(Error::InvalidArgument(
                "cross-entropy divisor must be positive".into(),
            ));
        }
        let plane = h * w;
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let (bi, p) = (i / plane, i % plane);
            let at = |ch: usize| lv.data()[(bi * c + ch) * plane + p] as f64;
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (at(ch) - m).exp()).sum::<f64>().ln();
            total += lse - at(t as usize);
        }
        let ng = self.ng(logits);
        Ok(self.push_scalar(
            total / divisor,
            Op::SoftmaxCe {
                logits,
                targets,
                divisor,
            },
            ng,
        ))
    }

    /// Summed sigmoid cross-entropy with logits, divided by `divisor`.
    pub fn sigmoid_bce(&mut self, x: Var, targets: Vec<f32>, divisor: f64) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.numel() {
            return Err(Error::shape("sigmoid_bce", xv.shape(), &[targets.len()]));
        }
        if divisor <= 0.0 {
            return Err(Error::InvalidArgument(
                "bce divisor must be positive".into(),
            ));
        }
        let logits: Vec<f64> = match self.scalar_f64(x) {
            Some(z) => vec![z],
            None => xv.data().iter().map(|&z| z as f64).collect(),
        };
        let total: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(x);
        Ok(self.push_scalar(
            total / divisor,
            Op::SigmoidBce {
                x,
                targets,
                divisor,
            },
            ng,
        ))
    }

    /// Summed smooth-L1 (transition at 1) over elements whose weight is set,
    /// divided by `divisor`.
    pub fn smooth_l1(
        &mut self,
        x: Var,
        targets: Vec<f32>,
        weights: Vec<bool>,
        divisor: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.numel() || weights.len() != xv.numel() {
            return Err(Error::shape("smooth_l1", xv.shape(), &[targets.len()]));
        }
        if divisor <= 0.0 {
            return Err(Error::InvalidArgument(
                "smooth-l1 divisor must be positive".into(),
            ));
        }
        let total: f64 = xv
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .filter(|(_, &on)| on)
            .map(|((&z, &t), _)| {
                let d = (z - t).abs() as f64;
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        let ng = self.ng(x);
        Ok(self.push_scalar(
            total / divisor,
            Op::SmoothL1 {
                x,
                targets,
                weights,
                divisor,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut leaves: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
        }
        let params = self
            .params
            .iter()
            .filter_map(|(name, v)| leaves[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let mut send = |v: Var, g: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom, batch } => {
                let o = self.value(*w).shape()[0];
                if self.ng(*x) {
                    send(
                        *x,
                        kernels::conv_backward_input(dy, *batch, geom, val(*w), o),
                    );
                }
                if self.ng(*w) {
                    send(
                        *w,
                        kernels::conv_backward_weight(val(*x), dy, *batch, geom, o),
                    );
                }
            }
            Op::ConvTranspose2d { x, w, geom, batch } => {
                let ci = self.value(*w).shape()[0];
                if self.ng(*x) {
                    send(*x, kernels::conv_forward(dy, *batch, geom, val(*w), ci));
                }
                if self.ng(*w) {
                    send(
                        *w,
                        kernels::conv_backward_weight(dy, val(*x), *batch, geom, ci),
                    );
                }
            }
            Op::AddBias { x, b } => {
                if self.ng(*b) {
                    let [n, c, h, w] = node.value.dims4()?;
                    let plane = h * w;
                    let mut db = vec![0.0f32; c];
                    for bi in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            let s = (bi * c + ch) * plane;
                            *acc += dy[s..s + plane].iter().map(|&v| v as f64).sum::<f64>() as f32;
                        }
                    }
                    send(*b, db);
                }
                send(*x, dy.to_vec());
            }
            Op::Relu(x) => {
                let g = val(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                send(*x, g);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(
                    *x,
                    y.iter().zip(dy).map(|(&s, &d)| d * s * (1.0 - s)).collect(),
                );
            }
            Op::Add(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, dy.iter().zip(bv).map(|(d, v)| d * v).collect());
                send(*b, dy.iter().zip(av).map(|(d, v)| d * v).collect());
            }
            Op::Scale(x, s) => send(*x, dy.iter().map(|d| d * s).collect()),
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for bi in 0..n {
                    let s = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&dy[s..s + ca * plane]);
                    gb.extend_from_slice(&dy[s + ca * plane..s + (ca + cb) * plane]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut g = vec![0.0; n * c * plane];
                for bi in 0..n {
                    let dst = (bi * c + start) * plane;
                    let src = bi * len * plane;
                    g[dst..dst + len * plane].copy_from_slice(&dy[src..src + len * plane]);
                }
                send(*x, g);
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = node.value.dims4()?;
                let y = node.value.data();
                let plane = h * w;
                let mut g = vec![0.0; y.len()];
                for bi in 0..n {
                    for p in 0..plane {
                        let at = |ch: usize| (bi * c + ch) * plane + p;
                        let dot: f64 = (0..c).map(|ch| (y[at(ch)] * dy[at(ch)]) as f64).sum();
                        for ch in 0..c {
                            g[at(ch)] = y[at(ch)] * (dy[at(ch)] - dot as f32);
                        }
                    }
                }
                send(*x, g);
            }
            Op::MaskCells { x, keep } => {
                let [n, c, _, _] = node.value.dims4()?;
                send(*x, crate::attention::attend_backward_raw(dy, n * c, keep));
            }
            Op::Gather { x, index } => {
                let mut g = vec![0.0; self.value(*x).numel()];
                for (&i, &d) in index.iter().zip(dy) {
                    g[i] += d;
                }
                send(*x, g);
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; dy.len()];
                let mut gb = vec![0.0; dy.len()];
                for i in 0..dy.len() {
                    if av[i] >= bv[i] {
                        ga[i] = dy[i];
                    } else {
                        gb[i] = dy[i];
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![dy[0] / n as f32; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![dy[0]; n]);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                divisor,
            } => {
                let lv = self.value(*logits);
                let [_, c, h, w] = lv.dims4()?;
                let plane = h * w;
                let scale = dy[0] as f64 / divisor;
                let mut g = vec![0.0; lv.numel()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == IGNORE {
                        continue;
                    }
                    let (bi, p) = (i / plane, i % plane);
                    let at = |ch: usize| (bi * c + ch) * plane + p;
                    let m = (0..c)
                        .map(|ch| lv.data()[at(ch)] as f64)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..c).map(|ch| (lv.data()[at(ch)] as f64 - m).exp()).sum();
                    for ch in 0..c {
                        let pch = (lv.data()[at(ch)] as f64 - m).exp() / z;
                        let onehot = if ch == t as usize { 1.0 } else { 0.0 };
                        g[at(ch)] = ((pch - onehot) * scale) as f32;
                    }
                }
                send(*logits, g);
            }
            Op::SigmoidBce {
                x,
                targets,
                divisor,
            } => {
                let scale = dy[0] as f64 / divisor;
                let g = val(*x)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| ((sigmoid(z) - t) as f64 * scale) as f32)
                    .collect();
                send(*x, g);
            }
            Op::SmoothL1 {
                x,
                targets,
                weights,
                divisor,
            } => {
                let scale = dy[0] as f64 / divisor;
                let g = val(*x)
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &on)| {
                        if !on {
                            return 0.0;
                        }
                        let d = (z - t) as f64;
                        let dd = if d.abs() < 1.0 { d } else { d.signum() };
                        (dd * scale) as f32
                    })
                    .collect();
                send(*x, g);
            }
        }
        Ok(())
    }
}
