use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape and per-operand strides (zero on broadcast axes).
struct Broadcast {
    shape: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dim(op, format!("rank mismatch {a:?} vs {b:?}")));
        }
        let mut shape = Vec::with_capacity(a.len());
        for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
            if x != y && x != 1 && y != 1 {
                return Err(Error::dim(op, format!("axis {axis}: {x} vs {y} in {a:?} and {b:?}")));
            }
            shape.push(x.max(y));
        }
        let (sa, sb) = (strides(a), strides(b));
        let stride_a = a.iter().zip(sa).map(|(&n, s)| if n == 1 { 0 } else { s }).collect();
        let stride_b = b.iter().zip(sb).map(|(&n, s)| if n == 1 { 0 } else { s }).collect();
        Ok(Self {
            shape,
            stride_a,
            stride_b,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` over the output in order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.shape.len();
        let n: usize = self.shape.iter().product();
        let inner = self.shape[r - 1];
        let (ia_step, ib_step) = (self.stride_a[r - 1], self.stride_b[r - 1]);
        let mut idx = vec![0usize; r];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut o = 0;
        while o < n {
            for k in 0..inner {
                f(o + k, ia + k * ia_step, ib + k * ib_step);
            }
            o += inner;
            let mut ax = r - 1;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                ia += self.stride_a[ax];
                ib += self.stride_b[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                ia -= self.stride_a[ax] * self.shape[ax];
                ib -= self.stride_b[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
    }
}

struct AddOp;

impl Backward for AddOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct MulOp;

impl Backward for MulOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let bc = Broadcast::new("mul", a.shape(), b.shape()).expect("checked in forward");
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
        let (ad, bd, gd) = (a.data(), b.data(), grad.data());
        match (&mut ga, &mut gb) {
            (Some(ga), Some(gb)) => {
                let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                bc.for_each(|o, i, j| {
                    gad[i] += gd[o] * bd[j];
                    gbd[j] += gd[o] * ad[i];
                });
            }
            (Some(ga), None) => {
                let gad = ga.data_mut();
                bc.for_each(|o, i, j| gad[i] += gd[o] * bd[j]);
            }
            (None, Some(gb)) => {
                let gbd = gb.data_mut();
                bc.for_each(|o, i, j| gbd[j] += gd[o] * ad[i]);
            }
            (None, None) => {}
        }
        vec![ga, gb]
    }
}

struct AffineOp {
    scale: f32,
}

impl Backward for AffineOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.scale))]
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(inputs[0].zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 }))]
    }
}

struct SigmoidOp;

impl Backward for SigmoidOp {
    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(out.zip_map(grad, |y, g| g * y * (1.0 - y)))]
    }
}

struct SumOp {
    mean: bool,
}

impl Backward for SumOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let n = inputs[0].numel();
        let g = if self.mean { grad.data()[0] / n as f32 } else { grad.data()[0] };
        vec![Some(Tensor::full(inputs[0].shape(), g))]
    }
}

impl Graph {
    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.zip_map(tb, |x, y| x + y);
        Ok(self.push("add", out, &[a, b], AddOp))
    }

    /// Elementwise product; axes of length 1 broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = Broadcast::new("mul", ta.shape(), tb.shape())?;
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0f32; bc.shape.iter().product()];
        bc.for_each(|o, i, j| out[o] = ad[i] * bd[j]);
        let out = Tensor::new(&bc.shape, out)?;
        Ok(self.push("mul", out, &[a, b], MulOp))
    }

    /// Multiplies `x` by a one-element tensor (e.g. a learnable scalar).
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale", format!("scalar expected, got {:?}", self.value(s).shape())));
        }
        let rank = self.value(x).rank();
        let s = self.reshape(s, &vec![1; rank])?;
        self.mul(x, s)
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f32, b: f32) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        self.push("affine", out, &[x], AffineOp { scale: a })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, &[x], ReluOp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_f32);
        self.push("sigmoid", out, &[x], SigmoidOp)
    }

    /// Sum of all elements as a one-element tensor (f64 accumulation).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push("sum_all", Tensor::scalar(s), &[x], SumOp { mean: false })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = (t.sum() / t.numel() as f64) as f32;
        self.push("mean_all", Tensor::scalar(s), &[x], SumOp { mean: true })
    }
}
