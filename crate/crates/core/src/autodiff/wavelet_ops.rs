use super::{Backward, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::wavelet::{self, FilterPair};

struct DwtOp {
    filters: FilterPair,
}

impl Backward for DwtOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(wavelet::dwt3_adjoint(grad, &self.filters).expect("subband grad shape"))]
    }
}

struct IwtOp {
    filters: FilterPair,
}

impl Backward for IwtOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(wavelet::iwt3_adjoint(grad, &self.filters).expect("volume grad shape"))]
    }
}

impl Graph {
    /// Recorded [`wavelet::dwt3`].
    pub fn dwt3(&mut self, x: Var, filters: &FilterPair) -> Result<Var> {
        let out = wavelet::dwt3(self.value(x), filters)?;
        Ok(self.push("dwt3", out, &[x], DwtOp { filters: *filters }))
    }

    /// Recorded [`wavelet::iwt3`].
    pub fn iwt3(&mut self, s: Var, filters: &FilterPair) -> Result<Var> {
        let out = wavelet::iwt3(self.value(s), filters)?;
        Ok(self.push("iwt3", out, &[s], IwtOp { filters: *filters }))
    }
}
