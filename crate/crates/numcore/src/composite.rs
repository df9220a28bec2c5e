//! Operations built from the primitive set.

use crate::error::Result;
use crate::tape::{Reduce, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `c * x` for a constant scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(x, k)
    }

    /// `x + c` for a constant scalar.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `1 / x` for strictly positive `x`, as `exp(-log x)`.
    pub fn recip_pos(&mut self, x: Var) -> Result<Var> {
        let l = self.log(x)?;
        let n = self.neg(l)?;
        Ok(self.exp(n))
    }

    /// `a / b` for strictly positive `b`.
    pub fn div_pos(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.recip_pos(b)?;
        self.mul(a, r)
    }

    /// Elementwise `min(a, b) = a - relu(a - b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d);
        self.sub(a, r)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d)?;
        Ok(self.mean(s, Reduce::All))
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.l2norm(x);
        self.div_pos(x, n)
    }

    /// Row-wise `log Σ exp(x)`, shifted by the (constant) row maximum.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim().max(1);
        let maxes: Vec<f64> = t.data().chunks(c).map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut shape = t.shape().to_vec();
        if let Some(l) = shape.last_mut() {
            *l = 1;
        }
        let m = self.constant(Tensor::new(shape, maxes)?);
        let shifted = self.sub(x, m)?;
        let e = self.exp(shifted);
        let s = self.sum(e, Reduce::Last);
        let l = self.log(s)?;
        self.add(l, m)
    }
}
