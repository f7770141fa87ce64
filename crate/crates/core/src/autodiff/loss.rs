use super::elementwise::sigmoid_f32;
use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct DiceOp {
    target: Tensor,
    eps: f64,
    inter: f64,
    denom: f64,
}

impl Backward for DiceOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        // loss = 1 - (2I + e) / (S + e), I = sum p t, S = sum p + sum t.
        let g = grad.data()[0] as f64;
        let num = 2.0 * self.inter + self.eps;
        let d = self.denom;
        let gx = inputs[0].zip_map(&self.target, |z, t| {
            let p = sigmoid_f32(z) as f64;
            let dl_dp = -(2.0 * t as f64 * d - num) / (d * d);
            (g * dl_dp * p * (1.0 - p)) as f32
        });
        vec![Some(gx)]
    }
}

struct BceOp {
    target: Tensor,
}

impl Backward for BceOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let scale = grad.data()[0] / inputs[0].numel() as f32;
        vec![Some(inputs[0].zip_map(&self.target, |z, t| scale * (sigmoid_f32(z) - t)))]
    }
}

fn check(op: &'static str, logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::dim(op, format!("logits {:?} vs target {:?}", logits.shape(), target.shape())));
    }
    Ok(())
}

impl Graph {
    /// Soft Dice loss on `sigmoid(logits)` summed over the whole tensor.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let z = self.value(logits);
        check("dice_loss", z, target)?;
        let (mut inter, mut sp, mut st) = (0.0f64, 0.0f64, 0.0f64);
        for (&zi, &ti) in z.data().iter().zip(target.data()) {
            let p = sigmoid_f32(zi) as f64;
            inter += p * ti as f64;
            sp += p;
            st += ti as f64;
        }
        let denom = sp + st + eps;
        let loss = 1.0 - (2.0 * inter + eps) / denom;
        let op = DiceOp {
            target: target.clone(),
            eps,
            inter,
            denom,
        };
        Ok(self.push("dice_loss", Tensor::scalar(loss as f32), &[logits], op))
    }

    /// Mean binary cross-entropy in the stable logit form
    /// `max(z, 0) - z t + ln(1 + e^{-|z|})`.
    pub fn bce_loss(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        check("bce_loss", z, target)?;
        let total: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let z = z as f64;
                z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = total / z.numel() as f64;
        let op = BceOp { target: target.clone() };
        Ok(self.push("bce_loss", Tensor::scalar(loss as f32), &[logits], op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    fn eval(f: impl FnOnce(&mut Graph, Var) -> Var, logits: Tensor) -> f32 {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(logits);
        let l = f(&mut g, x);
        g.value(l).data()[0]
    }

    #[test]
    fn bce_reference_values() {
        let t = Tensor::from_fn(&[1, 1, 1, 2, 2], |i| (i % 2) as f32);
        let v = eval(|g, x| g.bce_loss(x, &t).unwrap(), Tensor::zeros(&[1, 1, 1, 2, 2]));
        assert!((v - std::f32::consts::LN_2).abs() < 1e-6);
        let one = Tensor::ones(&[1, 1, 1, 1, 1]);
        let v = eval(|g, x| g.bce_loss(x, &one).unwrap(), Tensor::ones(&[1, 1, 1, 1, 1]));
        assert!((v - 0.313_261_7).abs() < 1e-6);
        let sat = t.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        let v = eval(|g, x| g.bce_loss(x, &t).unwrap(), sat);
        assert!(v <= 1e-4);
    }

    #[test]
    fn dice_reference_values() {
        let t = Tensor::new(&[1, 1, 1, 1, 6], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let perfect = t.map(|v| if v > 0.5 { 30.0 } else { -30.0 });
        assert!(eval(|g, x| g.dice_loss(x, &t, 1e-5).unwrap(), perfect) <= 1e-4);
        let none = Tensor::full(&[1, 1, 1, 1, 6], -30.0);
        assert!(eval(|g, x| g.dice_loss(x, &t, 1e-5).unwrap(), none) >= 0.999);
        // |P & T| = 2, |P| = 4, |T| = 4.
        let half = Tensor::new(&[1, 1, 1, 1, 6], vec![30.0, 30.0, -30.0, -30.0, 30.0, 30.0]).unwrap();
        let v = eval(|g, x| g.dice_loss(x, &t, 1e-5).unwrap(), half);
        assert!((v - 0.5).abs() < 1e-4);
    }
}
