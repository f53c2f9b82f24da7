use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(x: &Tensor) -> Tensor {
        x.map(|v| v.max(0.0))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        Self::forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| Error::InvalidTensor("relu backward without forward".into()))?;
        if mask.len() != grad.len() {
            return Err(Error::shape("relu_backward", &[mask.len()], grad.shape()));
        }
        let mut g = grad.clone();
        for (v, keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(g)
    }
}

/// `(N, C, H, W) -> (N, C)` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("global_avg_pool", x.shape(), &[0, 0, 0, 0]));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let out = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    if input_shape.len() != 4 || grad.shape() != &input_shape[..2] {
        return Err(Error::shape("global_avg_pool_backward", input_shape, grad.shape()));
    }
    let plane = input_shape[2] * input_shape[3];
    let scale = 1.0 / plane as f64;
    let mut out = Vec::with_capacity(grad.len() * plane);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::new(input_shape.to_vec(), out)
}

#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        global_avg_pool(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape =
            self.input_shape.take().ok_or_else(|| Error::InvalidTensor("pool backward without forward".into()))?;
        global_avg_pool_backward(&shape, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd;

    #[test]
    fn relu_masks_gradient() {
        let x = Tensor::new(vec![4], vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let mut relu = Relu::default();
        assert_eq!(relu.forward_train(&x).data(), &[0.0, 2.0, 0.0, 3.0]);
        let g = relu.backward(&Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        for shape in [[2usize, 3, 2, 2], [1, 1, 3, 5], [3, 2, 1, 1]] {
            let n: usize = shape.iter().product();
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let r: Vec<f64> = (0..shape[0] * shape[1]).map(|i| (i as f64).cos()).collect();
            let rt = Tensor::new(vec![shape[0], shape[1]], r.clone()).unwrap();
            let analytic = global_avg_pool_backward(&shape, &rt).unwrap();
            let mut xd = x.clone();
            let numeric = fd::gradient(&mut xd, |d| {
                let y = global_avg_pool(&Tensor::new(shape.to_vec(), d.to_vec()).unwrap()).unwrap();
                y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
            });
            assert!(fd::max_rel_error(analytic.data(), &numeric) < 1e-4);
        }
    }
}
