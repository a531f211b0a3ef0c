//! Reverse-mode autodiff over a recorded op tape.
//!
//! A [`Graph`] borrows a [`ParamSet`] read-only, records ops eagerly (each op
//! computes its forward value when recorded), and [`Graph::backward`] walks
//! the tape in reverse, producing a [`GradStore`] of per-parameter gradients.
//! The store is applied to the owning [`ParamSet`] afterwards; keeping the
//! two steps separate lets several graphs over the same parameters run
//! concurrently and reduce deterministically.

use std::collections::HashMap;

use thiserror::Error;

use crate::ops;
use crate::tensor::{ShapeError, Tensor3};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward root must be a scalar node")]
    NonScalarRoot,
}

/// Flat value buffer with an explicit shape; parameters can be 1-D (biases,
/// norm affines), 2-D (pointwise/linear/attention maps) or 3-D (temporal
/// kernels, tensor-shaped inputs under gradient checking).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(n >= 1, "parameter shape must be non-empty");
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        ParamTensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// A learnable tensor: value, gradient accumulator and Adam moments, all the
/// same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: ParamTensor,
    pub grad: ParamTensor,
    pub adam_m: ParamTensor,
    pub adam_v: ParamTensor,
}

/// Opaque handle to one parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered, name-unique collection of parameters. Insertion order is the
/// canonical order for initialization, checkpoints and gradient stores.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    grads_ready: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let value = ParamTensor::from_vec(shape, data);
        let zero = ParamTensor::zeros(shape);
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: zero.clone(),
            adam_m: zero.clone(),
            adam_v: zero,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// All parameter ids, in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value.data
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.fill(0.0);
        }
        self.grads_ready = false;
    }

    /// Adds `scale * store` into each `Parameter.grad`.
    pub fn accumulate_grads(&mut self, store: &GradStore, scale: f64) {
        assert_eq!(store.grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(&store.grads) {
            for (acc, v) in p.grad.data.iter_mut().zip(g) {
                *acc += scale * v;
            }
        }
        self.grads_ready = true;
    }

    /// True once gradients have been populated since the last zeroing.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamSet`], produced by
/// [`Graph::backward`]. Parameters not reached by the graph hold zeros.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    fn zeros_like(params: &ParamSet) -> Self {
        GradStore {
            grads: params.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Adds `scale * other` elementwise; used to reduce per-item gradients in
    /// a fixed order.
    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g {
                *v *= s;
            }
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Floor under the per-row variance below which a Pearson row is defined as 0.
pub const PEARSON_VAR_FLOOR: f64 = 1e-12;
/// Epsilon inside the Pearson denominator square root.
pub const PEARSON_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct PearsonRow {
    sxy: f64,
    sxx: f64,
    syy: f64,
    xbar: f64,
    ybar: f64,
    degenerate: bool,
}

#[derive(Debug)]
enum Op {
    Const,
    ParamInput {
        pid: ParamId,
    },
    PointwiseConv {
        x: VarId,
        w: ParamId,
        b: ParamId,
    },
    DepthwiseConv {
        x: VarId,
        w: ParamId,
        b: ParamId,
        kernel: usize,
    },
    TemporalConv {
        x: VarId,
        w: ParamId,
        b: ParamId,
        kernel: usize,
    },
    LayerNorm {
        x: VarId,
        gamma: ParamId,
        beta: ParamId,
        saved: ops::LayerNormSaved,
    },
    LeakyRelu {
        x: VarId,
        slope: f64,
    },
    CausalPad {
        x: VarId,
        amount: usize,
    },
    Concat {
        xs: Vec<VarId>,
        widths: Vec<usize>,
    },
    Attention {
        x: VarId,
        w: ParamId,
        b: ParamId,
        saved: ops::AttentionSaved,
    },
    SumAll {
        x: VarId,
    },
    PearsonLoss {
        pred: VarId,
        target: Tensor3,
        rows: Vec<PearsonRow>,
    },
}

struct Node {
    value: Tensor3,
    op: Op,
}

/// Eager op tape over a read-only parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: VarId) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor3, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Records a constant (non-differentiated) input.
    pub fn constant(&mut self, t: Tensor3) -> VarId {
        self.push(t, Op::Const)
    }

    /// Records a 3-D parameter as a differentiable input tensor.
    pub fn param_input(&mut self, pid: ParamId) -> VarId {
        let p = self.params.get(pid);
        assert_eq!(p.value.shape.len(), 3, "param_input requires a 3-D parameter");
        let t = Tensor3::from_vec(
            p.value.shape[0],
            p.value.shape[1],
            p.value.shape[2],
            p.value.data.clone(),
        );
        self.push(t, Op::ParamInput { pid })
    }

    pub fn pointwise_conv(&mut self, x: VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        let out = ops::pointwise_conv(&self.nodes[x.0].value, self.params.values(w), self.params.values(b))?;
        Ok(self.push(out, Op::PointwiseConv { x, w, b }))
    }

    pub fn linear_per_timestep(&mut self, x: VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        // same kernel as pointwise_conv, same backward
        let out = ops::linear_per_timestep(&self.nodes[x.0].value, self.params.values(w), self.params.values(b))?;
        Ok(self.push(out, Op::PointwiseConv { x, w, b }))
    }

    pub fn depthwise_conv(&mut self, x: VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        let kernel = {
            let wp = self.params.get(w);
            *wp.value.shape.last().unwrap()
        };
        let out = ops::depthwise_temporal_conv(
            &self.nodes[x.0].value,
            self.params.values(w),
            self.params.values(b),
            kernel,
        )?;
        Ok(self.push(out, Op::DepthwiseConv { x, w, b, kernel }))
    }

    pub fn temporal_conv(&mut self, x: VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        let (c_in, kernel) = {
            let shape = &self.params.get(w).value.shape;
            assert_eq!(shape.len(), 3, "temporal kernel must be [c_out][c_in][k]");
            (shape[1], shape[2])
        };
        let out = ops::temporal_conv(
            &self.nodes[x.0].value,
            self.params.values(w),
            self.params.values(b),
            c_in,
            kernel,
        )?;
        Ok(self.push(out, Op::TemporalConv { x, w, b, kernel }))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: ParamId, beta: ParamId) -> Result<VarId, GraphError> {
        let (out, saved) = ops::layer_norm(
            &self.nodes[x.0].value,
            self.params.values(gamma),
            self.params.values(beta),
        )?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, saved }))
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let out = ops::leaky_relu(&self.nodes[x.0].value, slope);
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn causal_pad(&mut self, x: VarId, amount: usize) -> VarId {
        let out = ops::causal_pad(&self.nodes[x.0].value, amount);
        self.push(out, Op::CausalPad { x, amount })
    }

    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId, GraphError> {
        let tensors: Vec<&Tensor3> = xs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = ops::concat_channels(&tensors)?;
        let widths = tensors.iter().map(|t| t.channels()).collect();
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
        ))
    }

    pub fn spatial_attention(&mut self, x: VarId, w: ParamId, b: ParamId) -> Result<VarId, GraphError> {
        let (out, saved) = ops::spatial_attention(
            &self.nodes[x.0].value,
            self.params.values(w),
            self.params.values(b),
        )?;
        Ok(self.push(out, Op::Attention { x, w, b, saved }))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let out = Tensor3::from_vec(1, 1, 1, vec![s]);
        self.push(out, Op::SumAll { x })
    }

    /// Negated mean Pearson correlation between `pred` and `target` rows,
    /// taken over every (batch, channel) row; the training objective.
    ///
    /// Rows of either side whose population variance falls below
    /// [`PEARSON_VAR_FLOOR`] contribute correlation 0 (and zero gradient).
    pub fn pearson_loss(&mut self, pred: VarId, target: &Tensor3) -> Result<VarId, GraphError> {
        let p = &self.nodes[pred.0].value;
        if p.dims() != target.dims() {
            return Err(GraphError::Shape(ShapeError::BatchTimeMismatch {
                expected: (target.batch(), target.time()),
                got: (p.batch(), p.time()),
            }));
        }
        if p.time() < 2 {
            return Err(GraphError::Shape(ShapeError::TimeTooShort {
                need: 2,
                got: p.time(),
            }));
        }
        let (b_n, c_n, t_n) = p.dims();
        let inv_t = 1.0 / t_n as f64;
        let mut rows = Vec::with_capacity(b_n * c_n);
        let mut acc = 0.0;
        for b in 0..b_n {
            for c in 0..c_n {
                let xr = p.row(b, c);
                let yr = target.row(b, c);
                let xbar = xr.iter().sum::<f64>() * inv_t;
                let ybar = yr.iter().sum::<f64>() * inv_t;
                let mut sxy = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                for (xv, yv) in xr.iter().zip(yr) {
                    let cx = xv - xbar;
                    let cy = yv - ybar;
                    sxy += cx * cy;
                    sxx += cx * cx;
                    syy += cy * cy;
                }
                let degenerate = sxx * inv_t < PEARSON_VAR_FLOOR || syy * inv_t < PEARSON_VAR_FLOOR;
                if !degenerate {
                    acc += sxy / (sxx * syy + PEARSON_EPS).sqrt();
                }
                rows.push(PearsonRow {
                    sxy,
                    sxx,
                    syy,
                    xbar,
                    ybar,
                    degenerate,
                });
            }
        }
        let loss = -acc / (b_n * c_n) as f64;
        let out = Tensor3::from_vec(1, 1, 1, vec![loss]);
        Ok(self.push(
            out,
            Op::PearsonLoss {
                pred,
                target: target.clone(),
                rows,
            },
        ))
    }

    /// Reverse accumulation from a scalar root. Returns gradients for every
    /// parameter; parameters the root does not depend on get zeros.
    pub fn backward(&self, root: VarId) -> Result<GradStore, GraphError> {
        if self.nodes[root.0].value.dims() != (1, 1, 1) {
            return Err(GraphError::NonScalarRoot);
        }
        let mut store = GradStore::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor3>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor3::from_vec(1, 1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::ParamInput { pid } => {
                    let dst = &mut store.grads[pid.0];
                    for (a, v) in dst.iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                Op::PointwiseConv { x, w, b } => {
                    let c_out = self.params.get(*b).value.numel();
                    let (dx, dw, db) = ops::pointwise_conv_backward(
                        &self.nodes[x.0].value,
                        self.params.values(*w),
                        c_out,
                        &g,
                    );
                    accumulate(&mut grads[x.0], dx);
                    add_into(&mut store.grads[w.0], &dw);
                    add_into(&mut store.grads[b.0], &db);
                }
                Op::DepthwiseConv { x, w, b, kernel } => {
                    let (dx, dw, db) = ops::depthwise_temporal_conv_backward(
                        &self.nodes[x.0].value,
                        self.params.values(*w),
                        *kernel,
                        &g,
                    );
                    accumulate(&mut grads[x.0], dx);
                    add_into(&mut store.grads[w.0], &dw);
                    add_into(&mut store.grads[b.0], &db);
                }
                Op::TemporalConv { x, w, b, kernel } => {
                    let c_out = self.params.get(*b).value.numel();
                    let (dx, dw, db) = ops::temporal_conv_backward(
                        &self.nodes[x.0].value,
                        self.params.values(*w),
                        c_out,
                        *kernel,
                        &g,
                    );
                    accumulate(&mut grads[x.0], dx);
                    add_into(&mut store.grads[w.0], &dw);
                    add_into(&mut store.grads[b.0], &db);
                }
                Op::LayerNorm { x, gamma, beta, saved } => {
                    let (dx, dgamma, dbeta) = ops::layer_norm_backward(
                        &self.nodes[x.0].value,
                        self.params.values(*gamma),
                        saved,
                        &g,
                    );
                    accumulate(&mut grads[x.0], dx);
                    add_into(&mut store.grads[gamma.0], &dgamma);
                    add_into(&mut store.grads[beta.0], &dbeta);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = ops::leaky_relu_backward(&self.nodes[x.0].value, *slope, &g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::CausalPad { x, amount } => {
                    let dx = ops::causal_pad_backward(*amount, &g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat { xs, widths } => {
                    let parts = ops::concat_channels_backward(widths, &g);
                    for (v, dg) in xs.iter().zip(parts) {
                        accumulate(&mut grads[v.0], dg);
                    }
                }
                Op::Attention { x, w, b, saved } => {
                    let (dx, dw, db) = ops::spatial_attention_backward(
                        &self.nodes[x.0].value,
                        self.params.values(*w),
                        saved,
                        &g,
                    );
                    accumulate(&mut grads[x.0], dx);
                    add_into(&mut store.grads[w.0], &dw);
                    add_into(&mut store.grads[b.0], &db);
                }
                Op::SumAll { x } => {
                    let gv = g.data()[0];
                    let src = &self.nodes[x.0].value;
                    let mut dx = Tensor3::zeros(src.batch(), src.channels(), src.time());
                    dx.data_mut().fill(gv);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::PearsonLoss { pred, target, rows } => {
                    let gv = g.data()[0];
                    let p = &self.nodes[pred.0].value;
                    let (b_n, c_n, t_n) = p.dims();
                    let scale = -gv / (b_n * c_n) as f64;
                    let mut dx = Tensor3::zeros(b_n, c_n, t_n);
                    for b in 0..b_n {
                        for c in 0..c_n {
                            let row = &rows[b * c_n + c];
                            if row.degenerate {
                                continue;
                            }
                            let d = row.sxx * row.syy + PEARSON_EPS;
                            let dsqrt = d.sqrt();
                            let coef_cy = scale / dsqrt;
                            let coef_cx = -scale * row.sxy * row.syy / (d * dsqrt);
                            let xr = p.row(b, c);
                            let yr = target.row(b, c);
                            let dr = dx.row_mut(b, c);
                            for ((dv, xv), yv) in dr.iter_mut().zip(xr).zip(yr) {
                                *dv = coef_cy * (yv - row.ybar) + coef_cx * (xv - row.xbar);
                            }
                        }
                    }
                    accumulate(&mut grads[pred.0], dx);
                }
            }
        }
        Ok(store)
    }
}

fn accumulate(slot: &mut Option<Tensor3>, add: Tensor3) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            debug_assert_eq!(t.dims(), add.dims());
            for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input_param(params: &mut ParamSet, name: &str, dims: (usize, usize, usize), data: Vec<f64>) -> ParamId {
        params.add(name, &[dims.0, dims.1, dims.2], data)
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (2, 3, 4), (0..24).map(|v| v as f64 * 0.3 - 2.0).collect());
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let root = g.sum_all(xv);
        let store = g.backward(root).unwrap();
        assert!(store.grad(x).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn leaky_relu_negative_branch_gradient() {
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (1, 1, 1), vec![-1.0]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let a = g.leaky_relu(xv, 0.01);
        let root = g.sum_all(a);
        let store = g.backward(root).unwrap();
        assert_eq!(store.grad(x), &[0.01]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (1, 1, 3), vec![1., 2., 3.]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        assert!(matches!(g.backward(xv), Err(GraphError::NonScalarRoot)));
    }

    #[test]
    fn unreached_parameters_get_zero_grad() {
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (1, 1, 2), vec![1., 2.]);
        let unused = params.add("unused", &[3], vec![1., 2., 3.]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let root = g.sum_all(xv);
        let store = g.backward(root).unwrap();
        assert!(store.grad(unused).iter().all(|&v| v == 0.0));
        assert_eq!(store.grad(x), &[1.0, 1.0]);
    }

    #[test]
    fn pearson_loss_perfect_and_anti() {
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (1, 2, 3), vec![1., 2., 3., 0., 1., 5.]);
        let target = Tensor3::from_vec(1, 2, 3, vec![1., 2., 3., 0., 1., 5.]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let loss = g.pearson_loss(xv, &target).unwrap();
        assert!((g.value(loss).scalar().unwrap() + 1.0).abs() < 1e-6);

        let anti = Tensor3::from_vec(1, 2, 3, vec![-1., -2., -3., 0., -1., -5.]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let loss = g.pearson_loss(xv, &anti).unwrap();
        assert!((g.value(loss).scalar().unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_loss_constant_row_contributes_zero() {
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (1, 2, 3), vec![4., 4., 4., 1., 2., 3.]);
        let target = Tensor3::from_vec(1, 2, 3, vec![1., 2., 3., 1., 2., 3.]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let loss = g.pearson_loss(xv, &target).unwrap();
        // row 0 degenerate -> 0, row 1 perfect -> 1; mean 0.5, negated
        assert!((g.value(loss).scalar().unwrap() + 0.5).abs() < 1e-6);
        let store = g.backward(loss).unwrap();
        // degenerate row gets zero gradient
        assert!(store.grad(x)[..3].iter().all(|&v| v == 0.0));
        assert!(store.grad(x)[3..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        // x used twice through concat: gradient doubles
        let mut params = ParamSet::new();
        let x = input_param(&mut params, "x", (1, 1, 2), vec![1., 2.]);
        let mut g = Graph::new(&params);
        let xv = g.param_input(x);
        let cat = g.concat_channels(&[xv, xv]).unwrap();
        let root = g.sum_all(cat);
        let store = g.backward(root).unwrap();
        assert_eq!(store.grad(x), &[2.0, 2.0]);
    }
}
