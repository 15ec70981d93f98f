use crate::error::{Error, Result};

use super::kernels;
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    SqrtEps(Var),
    Sum(Var),
    Mean(Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: [usize; 3],
    },
    Concat(Vec<Var>),
    CropCenter(Var, [usize; 3], [usize; 3]),
    AvgPool2(Var),
    NormalizeChannels(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order;
/// [`Graph::backward`] walks it in reverse and visits each reachable node
/// once. Gradients are only computed for nodes that lead to a leaf created
/// with `requires_grad`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sign pattern (`input > 0`) of every ReLU in the graph, in creation
    /// order. Used by the gradient checker to detect kink crossings.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                sig.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        sig
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else if tb.is_scalar() {
            ta.shape().to_vec()
        } else {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product();
        let (sa, sb) = (ta.numel() == 1, tb.numel() == 1);
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = da[if sa { 0 } else { i }];
                let y = db[if sb { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), needs))
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary op keeps shape");
        let needs = self.needs(a);
        self.push(out, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// ReLU; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `sqrt(a + eps)`, `eps > 0`.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Validation(format!("sqrt_eps needs eps > 0, got {eps}")));
        }
        Ok(self.unary(a, Op::SqrtEps(a), |x| (x + eps).sqrt()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), needs)
    }

    /// Stride-1 3D cross-correlation with per-axis zero padding.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, pad: [usize; 3]) -> Result<Var> {
        let out = kernels::conv3d_forward(self.value(input), self.value(weight), self.value(bias), pad)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                pad,
            },
            needs,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels_forward(&tensors)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    /// Centered spatial crop of a 5-rank tensor.
    pub fn crop_center(&mut self, a: Var, target: [usize; 3]) -> Result<Var> {
        let t = self.value(a);
        let [n, c, ..] = t.dims5()?;
        let off = kernels::crop_center_offsets(t.shape(), target)?;
        let mut out = vec![0.0; n * c * target.iter().product::<usize>()];
        let shape = t.shape().to_vec();
        let mut full = t.data().to_vec();
        kernels::crop_transfer(&shape, target, off, &mut full, &mut out, true);
        let out = Tensor::new(vec![n, c, target[0], target[1], target[2]], out)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::CropCenter(a, target, off), needs))
    }

    /// Adds the network input back onto a predicted residual.
    pub fn global_skip_add(&mut self, input: Var, residual: Var) -> Result<Var> {
        if self.shape(input) != self.shape(residual) {
            return Err(shape_err(
                "global_skip_add",
                self.shape(input),
                self.shape(residual),
            ));
        }
        self.add(input, residual)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let out = kernels::avg_pool2_forward(self.value(a))?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::AvgPool2(a), needs))
    }

    pub fn normalize_channels(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = kernels::normalize_channels_forward(self.value(a), eps)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::NormalizeChannels(a, eps), needs))
    }

    /// Back-propagates from a one-element `loss`, replacing any gradients of
    /// a previous call. Leaf gradients stay readable through
    /// [`Graph::grad`]; intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Validation(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        self.grads = vec![None; self.nodes.len()];
        let mut reachable = vec![false; n];
        reachable[loss.0] = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if !reachable[id] || !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            let contribs = self.local_backward(id, &gout)?;
            for (parent, g) in contribs {
                reachable[parent.0] = true;
                accumulate(&mut self.grads[parent.0], g);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to its parents (only parents that
    /// need a gradient).
    fn local_backward(&self, id: usize, gout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.numel() == 1, tb.numel() == 1);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for (i, &g) in gout.iter().enumerate() {
                    let (ia, ib) = (if sa { 0 } else { i }, if sb { 0 } else { i });
                    let (x, y) = (da[ia], db[ib]);
                    let (dx, dy) = match kind {
                        Binary::Add => (g, g),
                        Binary::Sub => (g, -g),
                        Binary::Mul => (g * y, g * x),
                        Binary::Div => (g / y, -g * x / (y * y)),
                    };
                    ga[ia] += dx;
                    gb[ib] += dy;
                }
                if want(*a) {
                    out.push((*a, ga));
                }
                if want(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, c) => out.push((*a, gout.iter().map(|g| g * c).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                out.push((
                    *a,
                    gout.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                out.push((*a, gout.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect()));
            }
            Op::SqrtEps(a) => {
                let y = node.value.data();
                out.push((*a, gout.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect()));
            }
            Op::Sum(a) => out.push((*a, vec![gout[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![gout[0] / n as f64; n]));
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                pad,
            } => {
                let grads = kernels::conv3d_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    *pad,
                    gout,
                    [want(*input), want(*weight), want(*bias)],
                )?;
                if let Some(g) = grads.input {
                    out.push((*input, g));
                }
                if let Some(g) = grads.weight {
                    out.push((*weight, g));
                }
                if let Some(g) = grads.bias {
                    out.push((*bias, g));
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (n, total, sv) = (s[0], s[1], s[2] * s[3] * s[4]);
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if want(*p) {
                        let mut g = Vec::with_capacity(n * c * sv);
                        for b in 0..n {
                            let start = (b * total + offset) * sv;
                            g.extend_from_slice(&gout[start..start + c * sv]);
                        }
                        out.push((*p, g));
                    }
                    offset += c;
                }
            }
            Op::CropCenter(a, target, off) => {
                let shape = self.shape(*a).to_vec();
                let mut full = vec![0.0; self.value(*a).numel()];
                let mut crop = gout.to_vec();
                kernels::crop_transfer(&shape, *target, *off, &mut full, &mut crop, false);
                out.push((*a, full));
            }
            Op::AvgPool2(a) => {
                out.push((*a, kernels::avg_pool2_backward(self.shape(*a), gout)));
            }
            Op::NormalizeChannels(a, eps) => {
                out.push((
                    *a,
                    kernels::normalize_channels_backward(self.value(*a), *eps, gout),
                ));
            }
        }
        out.retain(|(v, _)| want(*v));
        Ok(out)
    }
}
