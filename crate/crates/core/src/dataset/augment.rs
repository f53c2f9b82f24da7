use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of the network input.
pub const INPUT_SIZE: usize = 32;

const BRIGHTNESS_RANGE: f64 = 32.0;
const SCALE_MIN: f64 = 0.8;
const SCALE_MAX: f64 = 1.25;

/// Bilinear resize of a `C x H x W` image (pixel-centre alignment, edge clamped).
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if image.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", image.shape(), &[out_h, out_w]));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Photometric jitter applied after resizing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Additive shift in `[-32, 32]`.
    pub brightness: f64,
    /// Scale about the image mean, in `[0.8, 1.25]`.
    pub contrast: f64,
    /// Scale about per-pixel luma, in `[0.8, 1.25]`.
    pub saturation: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { brightness: 0.0, contrast: 1.0, saturation: 1.0 }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            brightness: rng.random_range(-BRIGHTNESS_RANGE..=BRIGHTNESS_RANGE),
            contrast: rng.random_range(SCALE_MIN..=SCALE_MAX),
            saturation: rng.random_range(SCALE_MIN..=SCALE_MAX),
        }
    }
}

/// Resizes to `INPUT_SIZE` and applies the given jitter; output stays in `[0, 255]`.
pub fn augment_with(image: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::shape("augment", image.shape(), &[3, INPUT_SIZE, INPUT_SIZE]));
    }
    let mut out = resize_bilinear(image, INPUT_SIZE, INPUT_SIZE)?;
    if *params == AugmentParams::identity() {
        return Ok(out);
    }
    let plane = INPUT_SIZE * INPUT_SIZE;
    let data = out.data_mut();
    for v in data.iter_mut() {
        *v += params.brightness;
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    for v in data.iter_mut() {
        *v = (*v - mean) * params.contrast + mean;
    }
    for p in 0..plane {
        let (r, g, b) = (data[p], data[plane + p], data[2 * plane + p]);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        for ch in 0..3 {
            let v = &mut data[ch * plane + p];
            *v = luma + (*v - luma) * params.saturation;
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 255.0);
    }
    Ok(out)
}

pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    augment_with(image, &AugmentParams::sample(rng))
}

/// `p -> 2 (p / 255) - 1`
pub fn normalize(image: &Tensor) -> Tensor {
    image.map(|p| 2.0 * (p / 255.0) - 1.0)
}

pub fn denormalize(image: &Tensor) -> Tensor {
    image.map(|q| (q + 1.0) / 2.0 * 255.0)
}

/// Evaluation-time preprocessing: resize to the network input and normalise.
pub fn prepare_input(image: &Tensor) -> Result<Tensor> {
    Ok(normalize(&augment_with(image, &AugmentParams::identity())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let mut t = Tensor::zeros(&[3, h, w]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.0..=255.0));
        t
    }

    #[test]
    fn identity_params_only_resize() {
        let img = random_image(40, 24, 1);
        let out = augment_with(&img, &AugmentParams::identity()).unwrap();
        assert_eq!(out, resize_bilinear(&img, 32, 32).unwrap());
    }

    #[test]
    fn resize_preserves_constant_and_linear_ramp() {
        let flat = Tensor::full(&[3, 13, 9], 77.0);
        let out = resize_bilinear(&flat, 32, 32).unwrap();
        assert!(out.data().iter().all(|&v| (v - 77.0).abs() < 1e-12));
        // exact 2x downsample of a ramp averages neighbouring pixels
        let ramp = Tensor::new(vec![1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let half = resize_bilinear(&ramp, 1, 2).unwrap();
        assert_eq!(half.data(), &[1.0, 5.0]);
    }

    #[test]
    fn gray_image_stays_gray_under_saturation() {
        let gray = Tensor::full(&[3, 32, 32], 100.0);
        for s in [0.8, 1.0, 1.25] {
            let params = AugmentParams { brightness: 10.0, contrast: 1.1, saturation: s };
            let out = augment_with(&gray, &params).unwrap();
            let plane = 32 * 32;
            for p in 0..plane {
                let (r, g, b) = (out.data()[p], out.data()[plane + p], out.data()[2 * plane + p]);
                assert!((r - g).abs() < 1e-9 && (g - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_endpoints_and_inverse() {
        let t = Tensor::from_vec(vec![0.0, 127.5, 255.0]).unwrap();
        assert_eq!(normalize(&t).data(), &[-1.0, 0.0, 1.0]);
        let img = random_image(5, 5, 3);
        let back = denormalize(&normalize(&img));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn output_stays_in_pixel_range(seed in any::<u64>(), h in 4usize..48, w in 4usize..48) {
            let img = random_image(h, w, seed);
            let mut rng = seeded(seed ^ 0xabc);
            let out = augment(&img, &mut rng).unwrap();
            prop_assert_eq!(out.shape(), &[3, 32, 32]);
            prop_assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }
}
