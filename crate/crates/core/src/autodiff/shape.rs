use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshaped(inputs[0].shape()).expect("same numel"))]
    }
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let inner = out_shape[r - 1];
    let inner_stride = src_strides[r - 1];
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|k| src[base + k * inner_stride]));
        }
        let mut ax = r - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves numel")
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl Backward for PermuteOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(permute_tensor(grad, &self.inverse))]
    }
}

struct ConcatOp {
    splits: Vec<usize>,
}

impl Backward for ConcatOp {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let shape = out.shape();
        let batch = shape[0];
        let total = shape[1];
        let plane: usize = shape[2..].iter().product();
        let g = grad.data();
        let mut offset = 0;
        let mut result = Vec::with_capacity(inputs.len());
        for (i, (&c, x)) in self.splits.iter().zip(inputs).enumerate() {
            if needs[i] {
                let mut d = Vec::with_capacity(x.numel());
                for b in 0..batch {
                    let start = (b * total + offset) * plane;
                    d.extend_from_slice(&g[start..start + c * plane]);
                }
                result.push(Some(Tensor::new(x.shape(), d).expect("split shape")));
            } else {
                result.push(None);
            }
            offset += c;
        }
        result
    }
}

struct SumAxisOp {
    axis: usize,
}

impl Backward for SumAxisOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let outer: usize = shape[..self.axis].iter().product();
        let n = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let g = grad.data();
        let mut d = Vec::with_capacity(inputs[0].numel());
        for o in 0..outer {
            for _ in 0..n {
                d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(Tensor::new(shape, d).expect("sum_axis shape"))]
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push("reshape", out, &[x], ReshapeOp))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let r = self.value(x).rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {r}")));
        }
        let mut inverse = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = permute_tensor(self.value(x), perm);
        Ok(self.push("permute", out, &[x], PermuteOp { inverse }))
    }

    /// Stacks tensors along axis 1; every other axis must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::dim("concat", "rank must be at least 2"));
        }
        let mut splits = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::dim("concat", format!("{s:?} does not stack with {first:?} along channels")));
            }
            splits.push(s[1]);
        }
        let total: usize = splits.iter().sum();
        let plane: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(first[0] * total * plane);
        for b in 0..first[0] {
            for (&v, &c) in xs.iter().zip(&splits) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push("concat", out, xs, ConcatOp { splits }))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let out = Tensor::new(&new_shape, out)?;
        Ok(self.push("sum_axis", out, &[x], SumAxisOp { axis }))
    }
}
