//! Reverse-mode automatic differentiation over the layer vocabulary the
//! restoration networks use.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node holding
//! its output value and whatever context its backward rule needs; parents
//! always precede children, so the tape order is already a topological
//! order and [`Graph::backward`] simply walks it in reverse.
//!
//! ```
//! use med::autodiff::Graph;
//! use med::tensor::{Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_vec(Shape::image(1, 1, 2), vec![1.0, -3.0]).unwrap());
//! let zero = g.constant(Tensor::zeros(Shape::image(1, 1, 2)));
//! let loss = g.mse(x, zero).unwrap(); // (1 + 9) / 2
//! g.backward(loss).unwrap();
//! assert_eq!(g.value(loss).item(), 5.0);
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, -3.0]);
//! ```

mod kernels;

use std::fmt;

use thiserror::Error;

use crate::tensor::{Element, Shape, Tensor};
use kernels::{ConvGeom, NormContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("tensor extents must all be >= 1, got {shape}")]
    EmptyExtent { shape: Shape },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: OpKind, detail: String },
    #[error("conv2d: kernel {kh}x{kw} must have odd extents")]
    EvenKernel { kh: usize, kw: usize },
    #[error("{op}: extent {height}x{width} not divisible by {factor}")]
    Indivisible {
        op: OpKind,
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("{op}: invalid argument, {detail}")]
    InvalidArgument { op: OpKind, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("backward root must be a scalar, got {shape}")]
    NonScalarRoot { shape: Shape },
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("node {child} references node {parent}, which does not precede it")]
    Cycle { child: usize, parent: usize },
    #[error("node id {0} does not belong to this graph")]
    UnknownNode(usize),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    LeakyRelu,
    Sigmoid,
    UpsampleBilinear,
    DownsampleArea,
    ConcatChannels,
    Mse,
    MaskedMse,
    Scale,
    Add,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 11] = [
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::UpsampleBilinear,
        OpKind::DownsampleArea,
        OpKind::ConcatChannels,
        OpKind::Mse,
        OpKind::MaskedMse,
        OpKind::Scale,
        OpKind::Add,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::DownsampleArea => "downsample_area",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Mse => "mse",
            OpKind::MaskedMse => "masked_mse",
            OpKind::Scale => "scale",
            OpKind::Add => "add",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .into_iter()
            .chain([OpKind::Leaf])
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        ctx: NormContext<T>,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Sigmoid {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
    },
    Downsample {
        x: NodeId,
        factor: usize,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    MaskedMse {
        a: NodeId,
        b: NodeId,
        mask: Vec<T>,
    },
    Scale {
        x: NodeId,
        alpha: T,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Upsample { .. } => OpKind::UpsampleBilinear,
            Op::Downsample { .. } => OpKind::DownsampleArea,
            Op::Concat { .. } => OpKind::ConcatChannels,
            Op::Mse { .. } => OpKind::Mse,
            Op::MaskedMse { .. } => OpKind::MaskedMse,
            Op::Scale { .. } => OpKind::Scale,
            Op::Add { .. } => OpKind::Add,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Upsample { x }
            | Op::Downsample { x, .. }
            | Op::Scale { x, .. } => vec![*x],
            Op::Concat { parts } => parts.clone(),
            Op::Mse { a, b } | Op::MaskedMse { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    /// True when some `requires_grad` leaf is upstream of this node.
    tracks: bool,
}

/// Computation tape. One graph per forward/backward pass.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Makes the backward rule of `op` deliberately wrong (gradients
    /// scaled by 1.5). Negative control for the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: OpKind) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            tracks: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Number of nodes of the given kind on the tape.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Nodes of the given kind in tape order.
    pub fn nodes_of(&self, kind: OpKind) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.kind() == kind)
            .map(NodeId)
            .collect()
    }

    /// Gradient of the last backward root with respect to `id`.
    ///
    /// `None` before backward has run or for nodes that do not track
    /// gradients. Leaves with `requires_grad` that the root does not depend
    /// on get an all-zero gradient.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so backward may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: kind });
        }
        let tracks = op.parents().iter().any(|p| self.nodes[p.0].tracks);
        self.nodes.push(Node {
            op,
            value,
            requires_grad: false,
            tracks,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: OpKind, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{sa} vs {sb}"),
            });
        }
        Ok(())
    }

    /// 2-D convolution with zero "same" padding `(k-1)/2`.
    ///
    /// `w` has shape `(out_ch, in_ch, kh, kw)`, `b` holds `out_ch` values.
    /// Stride 2 yields `ceil(H/2) x ceil(W/2)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let op = OpKind::Conv2d;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let [out_ch, in_ch, kh, kw] = ws.0;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::EvenKernel { kh, kw });
        }
        if !(stride == 1 || stride == 2) {
            return Err(AutodiffError::InvalidArgument {
                op,
                detail: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        if xs.channels() != in_ch {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!(
                    "input has {} channels, kernel expects {in_ch}",
                    xs.channels()
                ),
            });
        }
        if bs.numel() != out_ch {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!(
                    "bias has {} values, kernel has {out_ch} outputs",
                    bs.numel()
                ),
            });
        }
        let geom = ConvGeom::new(xs.0, ws.0, stride);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let shape = Shape::new(xs.batch(), out_ch, geom.out_h, geom.out_w);
        self.push(Op::Conv2d { x, w, b, geom }, Tensor::from_vec(shape, out)?)
    }

    /// Per-channel normalization using the statistics of this input
    /// (no running averages).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        for id in [x, gamma, beta] {
            self.check(id)?;
        }
        let op = OpKind::BatchNorm;
        let xs = self.shape(x);
        let c = xs.channels();
        if self.shape(gamma).numel() != c || self.shape(beta).numel() != c {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!(
                    "input has {c} channels, gamma {} and beta {}",
                    self.shape(gamma).numel(),
                    self.shape(beta).numel()
                ),
            });
        }
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op,
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let (out, ctx) = kernels::batch_norm_forward(
            self.value(x).data(),
            xs.0,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ctx,
            },
            Tensor::from_vec(xs, out)?,
        )
    }

    /// `max(x, slope*x)`; the subgradient at zero is `slope`.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.check(x)?;
        if !(0.0..1.0).contains(&slope) {
            return Err(AutodiffError::InvalidArgument {
                op: OpKind::LeakyRelu,
                detail: format!("slope must lie in [0, 1), got {slope}"),
            });
        }
        let slope = T::of(slope);
        let v = self.value(x);
        let out: Vec<T> = v
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { slope * a })
            .collect();
        let shape = v.shape();
        self.push(Op::LeakyRelu { x, slope }, Tensor::from_vec(shape, out)?)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let out: Vec<T> = v
            .data()
            .iter()
            .map(|&a| T::one() / (T::one() + (-a).exp()))
            .collect();
        let shape = v.shape();
        self.push(Op::Sigmoid { x }, Tensor::from_vec(shape, out)?)
    }

    /// Bilinear ×2 upsampling, half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.check(x)?;
        if factor != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: OpKind::UpsampleBilinear,
                detail: format!("only factor 2 is supported, got {factor}"),
            });
        }
        let xs = self.shape(x);
        let out = kernels::upsample2_forward(self.value(x).data(), xs.0);
        let shape = xs.with_spatial(2 * xs.height(), 2 * xs.width());
        self.push(Op::Upsample { x }, Tensor::from_vec(shape, out)?)
    }

    /// Block-average downsampling by 2 or 4.
    pub fn downsample_area(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.check(x)?;
        let op = OpKind::DownsampleArea;
        if !(factor == 2 || factor == 4) {
            return Err(AutodiffError::InvalidArgument {
                op,
                detail: format!("factor must be 2 or 4, got {factor}"),
            });
        }
        let xs = self.shape(x);
        if !xs.height().is_multiple_of(factor) || !xs.width().is_multiple_of(factor) {
            return Err(AutodiffError::Indivisible {
                op,
                height: xs.height(),
                width: xs.width(),
                factor,
            });
        }
        let out = kernels::downsample_forward(self.value(x).data(), xs.0, factor);
        let shape = xs.with_spatial(xs.height() / factor, xs.width() / factor);
        self.push(Op::Downsample { x, factor }, Tensor::from_vec(shape, out)?)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.concat_all(&[a, b])
    }

    /// Channel concatenation of any number of same-size tensors. A single
    /// part is returned as is.
    pub fn concat_all(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let op = OpKind::ConcatChannels;
        let (&first, rest) = parts.split_first().ok_or(AutodiffError::InvalidArgument {
            op,
            detail: "nothing to concatenate".into(),
        })?;
        for &p in parts {
            self.check(p)?;
        }
        if rest.is_empty() {
            return Ok(first);
        }
        let s0 = self.shape(first);
        for &p in rest {
            let s = self.shape(p);
            if s.batch() != s0.batch() || s.height() != s0.height() || s.width() != s0.width() {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    detail: format!("{s0} vs {s}"),
                });
            }
        }
        let channels: usize = parts.iter().map(|&p| self.shape(p).channels()).sum();
        let plane = s0.plane();
        let mut out = Vec::with_capacity(s0.batch() * channels * plane);
        for n in 0..s0.batch() {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape().channels();
                out.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let shape = s0.with_channels(channels);
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Tensor::from_vec(shape, out)?,
        )
    }

    /// Mean of squared differences, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(OpKind::Mse, a, b)?;
        let s = squared_mean(self.value(a).data(), self.value(b).data(), None);
        self.push(Op::Mse { a, b }, Tensor::scalar(s))
    }

    /// `mean(((a - b) * mask)^2)` over all elements; zero-mask entries
    /// contribute exactly nothing.
    pub fn masked_mse(&mut self, a: NodeId, b: NodeId, mask: &Tensor<T>) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let op = OpKind::MaskedMse;
        self.same_shape(op, a, b)?;
        if mask.shape() != self.shape(a) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("mask {} vs input {}", mask.shape(), self.shape(a)),
            });
        }
        let m = mask.data().to_vec();
        let s = squared_mean(self.value(a).data(), self.value(b).data(), Some(&m));
        self.push(Op::MaskedMse { a, b, mask: m }, Tensor::scalar(s))
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.check(x)?;
        let alpha = T::of(alpha);
        let v = self.value(x);
        let out = v.data().iter().map(|&a| alpha * a).collect();
        let shape = v.shape();
        self.push(Op::Scale { x, alpha }, Tensor::from_vec(shape, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(OpKind::Add, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a);
        self.push(Op::Add { a, b }, Tensor::from_vec(shape, out)?)
    }

    /// `Σ wᵢ·termᵢ` over scalar nodes, skipping zero weights. Returns
    /// `None` when every weight is zero.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<Option<NodeId>> {
        let mut acc: Option<NodeId> = None;
        for &(w, t) in terms {
            if w == 0.0 {
                continue;
            }
            let scaled = if w == 1.0 { t } else { self.scale(t, w)? };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        Ok(acc)
    }

    /// Propagates `d root / d node` to every gradient-tracking node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.shape(root);
        if !shape.is_scalar() {
            return Err(AutodiffError::NonScalarRoot { shape });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].tracks {
            grads[root.0] = Some(vec![T::one()]);
        }
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(gout);
                continue;
            }
            let gout = match self.fault {
                Some(k) if k == node.op.kind() => gout.iter().map(|&g| g * T::of(1.5)).collect(),
                _ => gout,
            };
            for p in node.op.parents() {
                if p.0 >= id {
                    return Err(AutodiffError::Cycle {
                        child: id,
                        parent: p.0,
                    });
                }
            }
            let kind = node.op.kind();
            for (parent, g) in self.local_grads(id, &gout) {
                if !self.nodes[parent.0].tracks {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: kind });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Intermediate gradients are not retained.
            grads[id] = None;
        }

        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape();
                Some(match g {
                    Some(g) => Tensor::from_vec(shape, g).expect("gradient matches value shape"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each tracking parent.
    fn local_grads(&self, id: usize, gout: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[id];
        let tracks = |p: NodeId| self.nodes[p.0].tracks;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout,
                    geom,
                    tracks(*x),
                    tracks(*w),
                    tracks(*b),
                );
                [(*x, gx), (*w, gw), (*b, gb)]
                    .into_iter()
                    .filter_map(|(p, g)| g.map(|g| (p, g)))
                    .collect()
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ctx,
            } => {
                let (gx, gg, gb) = kernels::batch_norm_backward(
                    gout,
                    self.shape(*x).0,
                    self.value(*gamma).data(),
                    ctx,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::LeakyRelu { x, slope } => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&a, &g)| if a > T::zero() { g } else { *slope * g })
                    .collect();
                vec![(*x, g)]
            }
            Op::Sigmoid { x: p } => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                vec![(*p, g)]
            }
            Op::Upsample { x } => {
                vec![(*x, kernels::upsample2_backward(gout, self.shape(*x).0))]
            }
            Op::Downsample { x, factor } => {
                vec![(
                    *x,
                    kernels::downsample_backward(gout, self.shape(*x).0, *factor),
                )]
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let plane = s.plane();
                let total = s.channels();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.shape(p).channels();
                    let mut g = Vec::with_capacity(s.batch() * c * plane);
                    for n in 0..s.batch() {
                        let start = (n * total + offset) * plane;
                        g.extend_from_slice(&gout[start..start + c * plane]);
                    }
                    offset += c;
                    out.push((p, g));
                }
                out
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = T::of(2.0) * gout[0] / T::of(va.len() as f64);
                let ga: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect();
                let gb = ga.iter().map(|&g| -g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::MaskedMse { a, b, mask } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = T::of(2.0) * gout[0] / T::of(va.len() as f64);
                let ga: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .zip(mask)
                    .map(|((&x, &y), &m)| k * (x - y) * m * m)
                    .collect();
                let gb = ga.iter().map(|&g| -g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { x, alpha } => vec![(*x, gout.iter().map(|&g| *alpha * g).collect())],
            Op::Add { a, b } => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
        }
    }
}

/// Mean of `((a-b)*m)^2`, accumulated in f64.
fn squared_mean<T: Element>(a: &[T], b: &[T], mask: Option<&[T]>) -> T {
    let mut s = 0.0;
    for i in 0..a.len() {
        let mut d = a[i] - b[i];
        if let Some(m) = mask {
            d *= m[i];
        }
        let d = d.as_f64();
        s += d * d;
    }
    T::of(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let data = vec![0.5, -1.0, 2.0, 3.5];
        let n = data.len() as f64;
        let x = g.param(t(Shape::image(1, 2, 2), data.clone()));
        let zero = g.constant(Tensor::zeros(Shape::image(1, 2, 2)));
        let m = g.mse(x, zero).unwrap();
        let loss = g.scale(m, n).unwrap();
        g.backward(loss).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(Shape::image(1, 2, 2), 1.0));
        let unused = g.param(Tensor::full(Shape::image(2, 1, 1), 3.0));
        let zero = g.constant(Tensor::zeros(Shape::image(1, 2, 2)));
        let loss = g.mse(x, zero).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(unused).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(zero).is_none());
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(Shape::image(1, 1, 1), 2.0));
        let zero = g.constant(Tensor::zeros(Shape::image(1, 1, 1)));
        let loss = g.mse(x, zero).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(AutodiffError::BackwardTwice));
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(Shape::image(1, 2, 2), 1.0));
        let y = g.sigmoid(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(AutodiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(Shape::image(1, 1, 3), vec![1.0, -2.0, 0.0]).cast());
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -0.4, 0.0]);
        let z = g.leaky_relu(x, 0.0).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 0.0, 0.0]);
        assert!(g.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(Shape::image(1, 1, 1), vec![0.0]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        let target = g.constant(t(Shape::image(1, 1, 1), vec![-1.0]));
        let loss = g.mse(y, target).unwrap();
        g.backward(loss).unwrap();
        // d/dy (y+1)^2 = 2 at y = 0, times slope
        assert!((g.grad(x).unwrap().data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(Shape::image(1, 1, 1), f32::MAX));
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: OpKind::Scale });
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::image(2, 4, 4)));
        let w_even = g.param(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let b = g.param(Tensor::zeros(Shape::image(1, 1, 1)));
        assert!(matches!(
            g.conv2d(x, w_even, b, 1),
            Err(AutodiffError::EvenKernel { .. })
        ));
        let w_bad = g.param(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        assert!(matches!(
            g.conv2d(x, w_bad, b, 1),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batch_norm_rejects_bad_eps_and_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::image(2, 2, 2)));
        let gamma = g.param(Tensor::full(Shape::image(2, 1, 1), 1.0));
        let beta = g.param(Tensor::zeros(Shape::image(2, 1, 1)));
        assert!(g.batch_norm(x, gamma, beta, 0.0).is_err());
        let gamma3 = g.param(Tensor::full(Shape::image(3, 1, 1), 1.0));
        assert!(g.batch_norm(x, gamma3, beta, 1e-5).is_err());
    }

    #[test]
    fn downsample_rejects_indivisible_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::image(1, 6, 6)));
        assert!(g.downsample_area(x, 2).is_ok());
        assert!(matches!(
            g.downsample_area(x, 4),
            Err(AutodiffError::Indivisible { .. })
        ));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(Shape::image(1, 4, 4)));
        let b = g.constant(Tensor::zeros(Shape::image(1, 2, 4)));
        assert!(g.concat_channels(a, b).is_err());
        assert_eq!(g.concat_all(&[a]).unwrap(), a);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
