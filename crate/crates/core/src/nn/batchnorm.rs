use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the previous running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Saved activations for the train-mode backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    shape: Vec<usize>,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Layout `(N, C, rest...)`: returns (batch, channels, elements per channel per sample).
fn layout(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::shape("batch_norm", input.shape(), gamma.shape()));
    }
    let c = input.dim(1);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batch_norm", input.shape(), gamma.shape()));
    }
    let n = input.dim(0);
    Ok((n, c, input.len() / (n * c)))
}

/// Normalises with batch statistics and folds them into `stats`.
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
) -> Result<(Tensor, BnCache)> {
    let (n, c, inner) = layout(input, gamma, beta)?;
    let count = (n * inner) as f64;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_stds = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            mean += x[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..n {
            var += x[(b * c + ch) * inner..][..inner].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= count;
        let inv_std = 1.0 / (var + BN_EPSILON).sqrt();
        inv_stds[ch] = inv_std;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let xh = (x[i] - mean) * inv_std;
                x_hat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        stats.mean[ch] = BN_MOMENTUM * stats.mean[ch] + (1.0 - BN_MOMENTUM) * mean;
        stats.var[ch] = BN_MOMENTUM * stats.var[ch] + (1.0 - BN_MOMENTUM) * unbiased;
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, BnCache { shape: input.shape().to_vec(), x_hat, inv_std: inv_stds }))
}

/// Per-channel affine map from the running statistics.
pub fn batch_norm_eval(input: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<Tensor> {
    let (n, c, inner) = layout(input, gamma, beta)?;
    let mut out = input.data().to_vec();
    for ch in 0..c {
        let scale = gamma.data()[ch] / (stats.var[ch] + BN_EPSILON).sqrt();
        let shift = beta.data()[ch] - stats.mean[ch] * scale;
        for b in 0..n {
            for v in &mut out[(b * c + ch) * inner..][..inner] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::shape("batch_norm_backward", grad_out.shape(), &cache.shape));
    }
    let (n, c) = (cache.shape[0], cache.shape[1]);
    let inner = grad_out.len() / (n * c);
    let count = (n * inner) as f64;
    let dy = grad_out.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * cache.x_hat[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = k * (count * dy[i] - sum_dy - cache.x_hat[i] * sum_dy_xh);
            }
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, dgamma, dbeta))
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RunningStats,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(id: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(format!("{id}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{id}.beta"), Tensor::zeros(&[channels])),
            stats: RunningStats::new(channels),
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        batch_norm_eval(x, &self.gamma.value, &self.beta.value, &self.stats)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, cache) = batch_norm_train(x, &self.gamma.value, &self.beta.value, &mut self.stats)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache =
            self.cache.take().ok_or_else(|| Error::InvalidTensor("batch norm backward without forward".into()))?;
        let (dx, dg, db) = batch_norm_backward(&cache, &self.gamma.value, grad)?;
        self.gamma.accumulate(&dg);
        self.beta.accumulate(&db);
        Ok(dx)
    }

    /// Running statistics as named tensors, for checkpoints.
    pub fn buffers(&self) -> [(String, Tensor); 2] {
        let id = self.gamma.id.trim_end_matches(".gamma");
        [
            (format!("{id}.running_mean"), Tensor::from_vec(self.stats.mean.clone()).expect("non-empty")),
            (format!("{id}.running_var"), Tensor::from_vec(self.stats.var.clone()).expect("non-empty")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64, offset: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = offset + scale * rng.random_range(-1.0..1.0));
        t
    }

    #[test]
    fn normalized_input_passes_through() {
        // two samples per channel at +-1: mean 0, biased variance 1
        let x = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let mut stats = RunningStats::new(2);
        let (y, _) = batch_norm_train(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &mut stats).unwrap();
        // exact up to the epsilon guard: y = x / sqrt(1 + eps)
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0 + BN_EPSILON).sqrt()).abs() < 1e-12);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 4, 4], &mut rng, 2.0, 1.0);
        let beta = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        let (y, _) = batch_norm_train(&x, &Tensor::zeros(&[2]), &beta, &mut RunningStats::new(2)).unwrap();
        for b in 0..3 {
            for c in 0..2 {
                for i in 0..16 {
                    assert_eq!(y.data()[(b * 2 + c) * 16 + i], beta.data()[c]);
                }
            }
        }
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 3, 5, 5], &mut rng, 3.0, 7.0);
        let (y, _) =
            batch_norm_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &mut RunningStats::new(3)).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + c) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_single_sample_stays_finite() {
        let x = Tensor::full(&[1, 2, 3, 3], 4.0);
        let (y, cache) =
            batch_norm_train(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), &mut RunningStats::new(2)).unwrap();
        assert!(y.is_finite());
        let (dx, _, _) =
            batch_norm_backward(&cache, &Tensor::full(&[2], 1.0), &Tensor::full(&[1, 2, 3, 3], 1.0)).unwrap();
        assert!(dx.is_finite());
    }

    #[test]
    fn running_stats_use_momentum() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut stats = RunningStats::new(1);
        batch_norm_train(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut stats).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_pure_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bn = BatchNorm::new("bn", 2);
        bn.stats.mean = vec![0.5, -1.0];
        bn.stats.var = vec![4.0, 0.25];
        bn.gamma.value = Tensor::new(vec![2], vec![2.0, 0.5]).unwrap();
        let before = bn.stats.clone();
        let x = random(&[2, 2, 3, 3], &mut rng, 1.0, 0.0);
        let y1 = bn.forward(&x).unwrap();
        let y2 = bn.forward(&x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(bn.stats, before);
        let expect = 2.0 * (x.data()[0] - 0.5) / (4.0 + BN_EPSILON).sqrt();
        assert!((y1.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for shape in [[3usize, 2, 3, 3], [2, 4, 2, 2], [5, 1, 1, 3]] {
            let x = random(&shape, &mut rng, 1.5, 0.3);
            let gamma = random(&[shape[1]], &mut rng, 1.0, 1.0);
            let beta = random(&[shape[1]], &mut rng, 1.0, 0.0);
            let r = random(&shape, &mut rng, 1.0, 0.0);
            let loss = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
                let (y, _) = batch_norm_train(x, g, b, &mut RunningStats::new(shape[1])).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = batch_norm_train(&x, &gamma, &beta, &mut RunningStats::new(shape[1])).unwrap();
            let (dx, dg, db) = batch_norm_backward(&cache, &gamma, &r).unwrap();
            let rebuild = |d: &[f64], like: &Tensor| Tensor::new(like.shape().to_vec(), d.to_vec()).unwrap();
            let mut xd = x.data().to_vec();
            let nx = fd::gradient(&mut xd, |d| loss(&rebuild(d, &x), &gamma, &beta));
            assert!(fd::max_rel_error(dx.data(), &nx) < 1e-4);
            let mut gd = gamma.data().to_vec();
            let ng = fd::gradient(&mut gd, |d| loss(&x, &rebuild(d, &gamma), &beta));
            assert!(fd::max_rel_error(&dg, &ng) < 1e-4);
            let mut bd = beta.data().to_vec();
            let nb = fd::gradient(&mut bd, |d| loss(&x, &gamma, &rebuild(d, &beta)));
            assert!(fd::max_rel_error(&db, &nb) < 1e-4);
        }
    }
}
