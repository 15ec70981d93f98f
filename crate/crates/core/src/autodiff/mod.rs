//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! [`Graph`] records operations for training. [`Eager`] evaluates the same
//! kernels without a tape, for inference on full volumes. Model and loss code
//! is written once against [`Backend`] and runs on either.

mod graph;
pub mod kernels;
mod tensor;

use std::rc::Rc;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Operations shared by the taped and the eager evaluator.
pub trait Backend {
    type Value: Clone;

    fn input(&mut self, t: Tensor) -> Self::Value;
    /// A trainable parameter; eager evaluation treats it as a constant.
    fn param(&mut self, t: Tensor) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, a: &Self::Value) -> Self::Value;
    fn conv3d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        pad: [usize; 3],
    ) -> Result<Self::Value>;
    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn global_skip_add(&mut self, input: &Self::Value, residual: &Self::Value)
        -> Result<Self::Value>;
}

impl Backend for Graph {
    type Value = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.constant(t)
    }

    fn param(&mut self, t: Tensor) -> Var {
        Graph::param(self, t)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value(*v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }

    fn relu(&mut self, a: &Var) -> Var {
        Graph::relu(self, *a)
    }

    fn conv3d(&mut self, x: &Var, w: &Var, b: &Var, pad: [usize; 3]) -> Result<Var> {
        Graph::conv3d(self, *x, *w, *b, pad)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        Graph::concat_channels(self, parts)
    }

    fn global_skip_add(&mut self, input: &Var, residual: &Var) -> Result<Var> {
        Graph::global_skip_add(self, *input, *residual)
    }
}

/// Tape-free evaluator. Intermediate values are dropped as soon as the
/// caller releases them.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Value = Rc<Tensor>;

    fn input(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn param(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn tensor<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        let (big, small) = if a.numel() >= b.numel() { (a, b) } else { (b, a) };
        let mut t = (**big).clone();
        if small.shape() == big.shape() {
            for (x, y) in t.data_mut().iter_mut().zip(small.data()) {
                *x += y;
            }
        } else if small.is_scalar() {
            let y = small.item();
            for x in t.data_mut() {
                *x += y;
            }
        } else {
            return Err(crate::Error::Shape(format!(
                "add: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Rc::new(t))
    }

    fn relu(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        let mut t = (**a).clone();
        for x in t.data_mut() {
            if !(*x > 0.0) {
                *x = 0.0;
            }
        }
        Rc::new(t)
    }

    fn conv3d(
        &mut self,
        x: &Rc<Tensor>,
        w: &Rc<Tensor>,
        b: &Rc<Tensor>,
        pad: [usize; 3],
    ) -> Result<Rc<Tensor>> {
        kernels::conv3d_forward(x, w, b, pad).map(Rc::new)
    }

    fn concat_channels(&mut self, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::concat_channels_forward(&refs).map(Rc::new)
    }

    fn global_skip_add(&mut self, input: &Rc<Tensor>, residual: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        if input.shape() != residual.shape() {
            return Err(crate::Error::Shape(format!(
                "global_skip_add: incompatible shapes {:?} and {:?}",
                input.shape(),
                residual.shape()
            )));
        }
        self.add(input, residual)
    }
}

/// Default finite-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

fn eval<F>(f: &F, point: &Tensor) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    Ok((g.value(y).item(), g.relu_signature()))
}

/// Largest relative disagreement between the analytic gradient of `f` at
/// `point` and central differences, over all coordinates.
///
/// The per-coordinate error is `|a - n| / max(1e-8, |a| + |n|)`. When a
/// difference step moves some ReLU input across zero the step is shrunk
/// tenfold (up to four times); coordinates that still straddle a kink are
/// skipped.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let base_sig = g.relu_signature();

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let x0 = point.data()[i];
        let mut h = eps;
        let mut numeric = None;
        for _ in 0..5 {
            probe.data_mut()[i] = x0 + h;
            let (fp, sp) = eval(&f, &probe)?;
            probe.data_mut()[i] = x0 - h;
            let (fm, sm) = eval(&f, &probe)?;
            if sp == base_sig && sm == base_sig {
                numeric = Some((fp - fm) / (2.0 * h));
                break;
            }
            h /= 10.0;
        }
        probe.data_mut()[i] = x0;
        if let Some(n) = numeric {
            worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
