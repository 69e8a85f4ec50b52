//! Dense layer with batch-ensemble rank-one factors.

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};

/// Shared weight `[out, in]` and bias with per-member factors `r_i` (out)
/// and `s_i` (in). Member `i` behaves like the weight `r_i s_i^T * W` and
/// the bias `r_i * b`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEnsembleLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub r: Vec<Tensor>,
    pub s: Vec<Tensor>,
}

impl BatchEnsembleLayer {
    pub fn new(weight: Tensor, bias: Tensor, r: Vec<Tensor>, s: Vec<Tensor>) -> Result<Self> {
        let (out, inp) = match *weight.shape() {
            [o, i] => (o, i),
            _ => return Err(Error::shape("batch_ensemble", format!("weight {:?} is not 2D", weight.shape()))),
        };
        let ok = bias.shape() == [out]
            && r.len() == s.len()
            && r.iter().all(|t| t.shape() == [out])
            && s.iter().all(|t| t.shape() == [inp]);
        if !ok {
            return Err(Error::shape("batch_ensemble", format!("factors do not match weight {:?}", weight.shape())));
        }
        Ok(BatchEnsembleLayer { weight, bias, r, s })
    }

    pub fn members(&self) -> usize {
        self.r.len()
    }

    fn check(&self, member: usize) -> Result<()> {
        if member >= self.members() {
            return Err(Error::IndexOutOfRange { what: "ensemble member", index: member, len: self.members() });
        }
        Ok(())
    }

    /// `r_i * (W (s_i * x) + b)` for a column `x` of length `in`, without
    /// forming the member weight.
    pub fn forward(&self, x: &Tensor, member: usize) -> Result<Tensor> {
        self.check(member)?;
        let inp = self.weight.shape()[1];
        let mut tape = Tape::new();
        let x = tape.constant(x.clone().reshape(vec![inp])?);
        let s = tape.constant(self.s[member].clone());
        let xs = tape.mul(x, s)?;
        let xs = tape.reshape(xs, &[inp, 1])?;
        let w = tape.constant(self.weight.clone());
        let y = tape.matmul(w, xs)?;
        let y = tape.reshape(y, &[self.weight.shape()[0]])?;
        let b = tape.constant(self.bias.clone());
        let y = tape.add(y, b)?;
        let r = tape.constant(self.r[member].clone());
        let y = tape.mul(y, r)?;
        Ok(tape.value(y).clone())
    }

    /// Explicit member weight `r_i s_i^T * W`.
    pub fn materialize(&self, member: usize) -> Result<Tensor> {
        self.check(member)?;
        let (out, inp) = (self.weight.shape()[0], self.weight.shape()[1]);
        let (r, s, w) = (self.r[member].data(), self.s[member].data(), self.weight.data());
        Ok(Tensor::from_fn(vec![out, inp], |k| r[k / inp] * w[k] * s[k % inp]))
    }
}
