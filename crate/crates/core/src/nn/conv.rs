use rand::Rng;

use super::{gaussian_init, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        if input.rank() != 4 || weights.rank() != 4 || input.dim(1) != weights.dim(1) {
            return Err(Error::shape("conv2d", input.shape(), weights.shape()));
        }
        let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (oc, kh, kw) = (weights.dim(0), weights.dim(2), weights.dim(3));
        let oh = conv_output_size(h, kh, stride, pad);
        let ow = conv_output_size(w, kw, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Geometry { n, c, h, w, oc, kh, kw, stride, pad, oh, ow }),
            _ => Err(Error::shape("conv2d", input.shape(), weights.shape())),
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn columns(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox * stride + k - pad` is inside the image.
    fn valid_range(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if size + self.pad > k { ((size + self.pad - k - 1) / self.stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Gathers every receptive field into a `(c*kh*kw) x (n*oh*ow)` matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let cols = self.columns();
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.patch_len() * cols];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ky, self.oh, self.h);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kx, self.ow, self.w);
                    if x_lo == x_hi {
                        continue;
                    }
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst_row = &mut out[row * cols..(row + 1) * cols];
                    for b in 0..self.n {
                        let src = &input[(b * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        let dst = &mut dst_row[b * plane..(b + 1) * plane];
                        for oy in y_lo..y_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let src_row = &src[iy * self.w..][..self.w];
                            let dst = &mut dst[oy * self.ow..][..self.ow];
                            let ix0 = x_lo * self.stride + kx - self.pad;
                            if self.stride == 1 {
                                dst[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + x_hi - x_lo]);
                            } else {
                                for (d, s) in dst[x_lo..x_hi].iter_mut().zip(src_row[ix0..].iter().step_by(self.stride))
                                {
                                    *d = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Scatter-adds a column matrix back onto an input-shaped buffer.
    fn col2im(&self, cols_mat: &[f64]) -> Vec<f64> {
        let cols = self.columns();
        let plane = self.oh * self.ow;
        let mut out = vec![0.0; self.n * self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ky, self.oh, self.h);
                for kx in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kx, self.ow, self.w);
                    if x_lo == x_hi {
                        continue;
                    }
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src_row = &cols_mat[row * cols..(row + 1) * cols];
                    for b in 0..self.n {
                        let dst = &mut out[(b * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        let src = &src_row[b * plane..(b + 1) * plane];
                        for oy in y_lo..y_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let dst_row = &mut dst[iy * self.w..][..self.w];
                            let src = &src[oy * self.ow + x_lo..oy * self.ow + x_hi];
                            let ix0 = x_lo * self.stride + kx - self.pad;
                            for (d, s) in dst_row[ix0..].iter_mut().step_by(self.stride).zip(src) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Cross-correlation of an NCHW batch with `(out_ch, in_ch, kh, kw)` weights.
pub fn conv2d(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(input, weights, stride, pad)?;
    let cols = g.im2col(input.data());
    conv_from_cols(&g, weights, &cols)
}

fn conv_from_cols(g: &Geometry, weights: &Tensor, cols: &[f64]) -> Result<Tensor> {
    let mut mat = vec![0.0; g.oc * g.columns()];
    gemm(g.oc, g.patch_len(), g.columns(), 1.0, weights.data(), false, cols, false, 0.0, &mut mat);
    // (oc, n, plane) -> (n, oc, plane)
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; mat.len()];
    for o in 0..g.oc {
        for b in 0..g.n {
            out[(b * g.oc + o) * plane..][..plane].copy_from_slice(&mat[o * g.columns() + b * plane..][..plane]);
        }
    }
    Tensor::new(vec![g.n, g.oc, g.oh, g.ow], out)
}

/// Returns `(grad_input, grad_weights)` for the given output gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = Geometry::new(input, weights, stride, pad)?;
    let cols = g.im2col(input.data());
    let (dx, dw) = backward_from_cols(&g, weights, grad_out, cols, true)?;
    Ok((dx.expect("input gradient requested"), dw))
}

fn backward_from_cols(
    g: &Geometry,
    weights: &Tensor,
    grad_out: &Tensor,
    cols: Vec<f64>,
    input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    if grad_out.shape() != [g.n, g.oc, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &[g.n, g.oc, g.oh, g.ow]));
    }
    let plane = g.oh * g.ow;
    let mut dy = vec![0.0; grad_out.len()];
    for b in 0..g.n {
        for o in 0..g.oc {
            dy[o * g.columns() + b * plane..][..plane]
                .copy_from_slice(&grad_out.data()[(b * g.oc + o) * plane..][..plane]);
        }
    }
    let mut dw = vec![0.0; weights.len()];
    gemm(g.oc, g.columns(), g.patch_len(), 1.0, &dy, false, &cols, true, 0.0, &mut dw);
    let dw = Tensor::new(weights.shape().to_vec(), dw)?;
    if !input_grad {
        return Ok((None, dw));
    }
    let mut dcols = cols;
    gemm(g.patch_len(), g.oc, g.columns(), 1.0, weights.data(), true, &dy, false, 0.0, &mut dcols);
    let dx = Tensor::new(vec![g.n, g.c, g.h, g.w], g.col2im(&dcols))?;
    Ok((Some(dx), dw))
}

/// Bias-free convolution layer (every conv in the network is followed by batch norm).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Geometry, Vec<f64>)>,
}

impl Conv2d {
    /// He-initialised `kernel x kernel` convolution.
    pub fn new(
        id: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = gaussian_init(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Conv2d { weight: Parameter::new(format!("{id}.weight"), w), stride, pad, cache: None }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight.value, self.stride, self.pad)
    }

    /// Forward pass that keeps the column matrix for `backward`.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let g = Geometry::new(x, &self.weight.value, self.stride, self.pad)?;
        let cols = g.im2col(x.data());
        let y = conv_from_cols(&g, &self.weight.value, &cols)?;
        self.cache = Some((g, cols));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(grad, true)?.expect("input gradient requested"))
    }

    /// Accumulates the weight gradient only (first layer of a network).
    pub fn backward_weights(&mut self, grad: &Tensor) -> Result<()> {
        self.backward_impl(grad, false).map(|_| ())
    }

    fn backward_impl(&mut self, grad: &Tensor, input_grad: bool) -> Result<Option<Tensor>> {
        let (g, cols) =
            self.cache.take().ok_or_else(|| Error::InvalidTensor("conv backward without forward".into()))?;
        let (dx, dw) = backward_from_cols(&g, &self.weight.value, grad, cols, input_grad)?;
        self.weight.accumulate(dw.data());
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_with_padding_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 5, 4], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &w, 1, 1).unwrap(), x);
    }

    #[test]
    fn output_size_and_shape_errors() {
        assert_eq!(conv_output_size(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 8, 8]") && err.contains("[4, 2, 3, 3]"), "{err}");
    }

    /// Direct loops: forward output plus the adjoint products for a given output gradient.
    fn direct(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let [oc, _, kh, kw] = w.shape().try_into().unwrap();
        let oh = conv_output_size(h, kh, stride, pad).unwrap();
        let ow = conv_output_size(wd, kw, stride, pad).unwrap();
        let mut y = vec![0.0; n * oc * oh * ow];
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let yi = ((b * oc + o) * oh + oy) * ow + ox;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((b * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((o * c + ci) * kh + ky) * kw + kx;
                                    y[yi] += x.data()[xi] * w.data()[wi];
                                    dx[xi] += dy.data()[yi] * w.data()[wi];
                                    dw[wi] += dy.data()[yi] * x.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (y, dx, dw)
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-10)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn im2col_path_matches_direct_loops(
            n in 1usize..3, c in 1usize..4, oc in 1usize..4,
            h in 1usize..9, wd in 1usize..9, k in 1usize..4,
            stride in 1usize..4, pad in 0usize..3, seed in 0u64..1000,
        ) {
            proptest::prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[n, c, h, wd], &mut rng);
            let w = random(&[oc, c, k, k], &mut rng);
            let y = conv2d(&x, &w, stride, pad).unwrap();
            let dy = random(y.shape(), &mut rng);
            let (ey, edx, edw) = direct(&x, &w, &dy, stride, pad);
            let (dx, dw) = conv2d_backward(&x, &w, &dy, stride, pad).unwrap();
            proptest::prop_assert!(close(y.data(), &ey));
            proptest::prop_assert!(close(dx.data(), &edx));
            proptest::prop_assert!(close(dw.data(), &edw));
        }
    }

    #[test]
    fn layer_backward_matches_free_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let mut layer = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let y = layer.forward_train(&x).unwrap();
        let dy = random(y.shape(), &mut rng);
        let dx = layer.backward(&dy).unwrap();
        let (ex, ew) = conv2d_backward(&x, &layer.weight.value, &dy, 2, 1).unwrap();
        assert_eq!(dx, ex);
        assert_eq!(layer.weight.grad, ew);
        assert!(layer.backward(&dy).is_err());
    }

    #[test]
    fn weight_and_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = random(&[2, 3, 5, 5], &mut rng);
            let w = random(&[4, 3, 3, 3], &mut rng);
            let y = conv2d(&x, &w, stride, pad).unwrap();
            let r = random(y.shape(), &mut rng);
            let loss = |x: &Tensor, w: &Tensor| -> f64 {
                let y = conv2d(x, w, stride, pad).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let (dx, dw) = conv2d_backward(&x, &w, &r, stride, pad).unwrap();
            let mut wd = w.data().to_vec();
            let num_w = fd::gradient(&mut wd, |d| loss(&x, &Tensor::new(w.shape().to_vec(), d.to_vec()).unwrap()));
            assert!(fd::max_rel_error(dw.data(), &num_w) < 1e-4);
            let mut xd = x.data().to_vec();
            let num_x = fd::gradient(&mut xd, |d| loss(&Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap(), &w));
            assert!(fd::max_rel_error(dx.data(), &num_x) < 1e-4);
        }
    }
}
