use rand::Rng;

use super::{gaussian_init, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// `y = x W^T + b` for `x: (batch, in)`, `W: (out, in)`, `b: (out)`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 || weights.rank() != 2 || input.dim(1) != weights.dim(1) {
        return Err(Error::shape("dense", input.shape(), weights.shape()));
    }
    let (batch, inp, out) = (input.dim(0), input.dim(1), weights.dim(0));
    if bias.len() != out {
        return Err(Error::shape("dense", weights.shape(), bias.shape()));
    }
    let mut y = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        y.extend_from_slice(bias.data());
    }
    gemm(batch, inp, out, 1.0, input.data(), false, weights.data(), true, 1.0, &mut y);
    Tensor::new(vec![batch, out], y)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (batch, inp, out) = (input.dim(0), input.dim(1), weights.dim(0));
    if grad_out.shape() != [batch, out] {
        return Err(Error::shape("dense_backward", grad_out.shape(), &[batch, out]));
    }
    let mut dx = vec![0.0; batch * inp];
    gemm(batch, out, inp, 1.0, grad_out.data(), false, weights.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; out * inp];
    gemm(out, batch, inp, 1.0, grad_out.data(), true, input.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; out];
    for row in grad_out.data().chunks(out) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok((Tensor::new(vec![batch, inp], dx)?, Tensor::new(vec![out, inp], dw)?, db))
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(id: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let w = gaussian_init(&[outputs, inputs], (1.0 / inputs as f64).sqrt(), rng);
        Dense {
            weight: Parameter::new(format!("{id}.weight"), w),
            bias: Parameter::new(format!("{id}.bias"), Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        dense(x, &self.weight.value, &self.bias.value)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| Error::InvalidTensor("dense backward without forward".into()))?;
        let (dx, dw, db) = dense_backward(&x, &self.weight.value, grad)?;
        self.weight.accumulate(dw.data());
        self.bias.accumulate(&db);
        Ok(dx)
    }
}
