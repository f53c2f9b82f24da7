use crate::tensor::Tensor;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { id: id.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub(crate) fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}
