//! Procedural stand-in for a labelled group-photo collection.
//!
//! Each face is rendered directly at the resolution of its bounding box, so
//! small background faces carry less visual evidence than large foreground
//! ones. Expression cues (mouth curvature and width, eye openness) move
//! monotonically with the happiness bin, blurred by per-face noise. The group
//! label is the rounded mean over the group's members; bystanders in the
//! background do not count.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, DatasetManifest, FaceSample, GroupSample, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_groups: usize,
    /// Inclusive range of faces per group.
    pub faces_per_group: (usize, usize),
    /// Side length in pixels of the largest (foreground) face crop.
    pub image_size: usize,
    pub seed: u64,
    /// Spread of the latent group mood used to cluster labels within a group.
    pub mood_noise: f64,
    /// Standard deviation of the expression cue around its bin value.
    pub expression_noise: f64,
    /// Per-pixel Gaussian noise (0-255 scale).
    pub pixel_noise: f64,
    /// Probability that a face after the first in a group of 3+ is a small,
    /// distant bystander. Bystanders show an unrelated expression and are
    /// left out of the group label.
    pub bystander_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_groups: 200,
            faces_per_group: (1, 6),
            image_size: 40,
            seed: 0,
            mood_noise: 1.2,
            expression_noise: 0.1,
            pixel_noise: 8.0,
            bystander_prob: 0.3,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.faces_per_group;
        if self.n_groups == 0 || lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "need n_groups >= 1 and 1 <= min <= max faces per group, got {} and {lo}..={hi}",
                self.n_groups
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }

    fn canvas(&self) -> (f64, f64) {
        ((self.image_size * 10) as f64, (self.image_size * 7) as f64)
    }
}

/// Generates `spec.n_groups` groups; the result is a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec, split: Split) -> Result<DatasetManifest> {
    spec.validate()?;
    let (lo, hi) = spec.faces_per_group;
    let mut rng = stream(spec.seed, 1);
    let sizes: Vec<usize> = (0..spec.n_groups).map(|_| rng.random_range(lo..=hi)).collect();
    let total: usize = sizes.iter().sum();

    // Exactly balanced label pool, clustered into groups by sorting on a noisy key.
    let mood = Normal::new(0.0, spec.mood_noise.max(1e-9)).expect("finite");
    let mut pool: Vec<(f64, usize)> = (0..total)
        .map(|k| {
            let label = k % NUM_CLASSES;
            (label as f64 + mood.sample(&mut rng), label)
        })
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut chunks = Vec::with_capacity(spec.n_groups);
    let mut start = 0;
    for &n in &sizes {
        let mut labels: Vec<usize> = pool[start..start + n].iter().map(|p| p.1).collect();
        labels.shuffle(&mut rng);
        chunks.push(labels);
        start += n;
    }
    chunks.shuffle(&mut rng);

    let mut groups = Vec::with_capacity(spec.n_groups);
    for (gi, labels) in chunks.into_iter().enumerate() {
        let group_id = format!("{split}_{gi:05}");
        let mut grng = stream(spec.seed, 1000 + gi as u64);
        let placed = layout_group(spec, labels.len(), &mut grng);
        let mut faces = Vec::with_capacity(labels.len());
        let (mut member_sum, mut members) = (0, 0);
        for (&pooled, (bbox, bystander)) in labels.iter().zip(placed) {
            let label = if bystander {
                grng.random_range(0..NUM_CLASSES)
            } else {
                member_sum += pooled;
                members += 1;
                pooled
            };
            let image = render_face(spec, label, bbox.w as usize, &mut grng);
            faces.push(FaceSample::new(image, label, group_id.clone(), bbox)?);
        }
        let mean = member_sum as f64 / members as f64;
        let group_label = (mean.round() as usize).min(NUM_CLASSES - 1);
        groups.push(GroupSample::new(group_id, faces, group_label)?);
    }
    Ok(DatasetManifest::new(split, groups))
}

/// Foreground faces sit in a loose row; bystanders are smaller and set apart.
/// Returns each box with its bystander flag; the first face is never a bystander.
fn layout_group(spec: &SynthSpec, n: usize, rng: &mut impl Rng) -> Vec<(BBox, bool)> {
    let (cw, ch) = spec.canvas();
    let big = spec.image_size as f64;
    let small_min = (big * 0.35).round().max(4.0);
    let small_max = (big * 0.6).round().max(small_min);
    let cx = cw * rng.random_range(0.35..0.65);
    let cy = ch * rng.random_range(0.4..0.6);
    let mut boxes = Vec::with_capacity(n);
    let mut row = 0usize;
    for k in 0..n {
        let bystander = k > 0 && n >= 3 && rng.random_bool(spec.bystander_prob);
        let (side, x, y) = if bystander {
            let side = rng.random_range(small_min..=small_max).round();
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = big * rng.random_range(2.5..4.0);
            (side, cx + dist * angle.cos(), cy + dist * angle.sin() * 0.6)
        } else {
            let side = rng.random_range((big * 0.7).round()..=big).round();
            let offset = (row as f64 - (n as f64 - 1.0) / 2.0) * big * 1.15;
            row += 1;
            (side, cx + offset, cy + rng.random_range(-0.25..0.25) * big)
        };
        let x = (x - side / 2.0).clamp(0.0, cw - side).round();
        let y = (y - side / 2.0).clamp(0.0, ch - side).round();
        boxes.push((BBox { x, y, w: side, h: side }, bystander));
    }
    boxes
}

fn smooth_coverage(signed_dist_px: f64) -> f64 {
    (0.5 - signed_dist_px).clamp(0.0, 1.0)
}

/// Renders a `3 x side x side` face crop with integer pixel values.
fn render_face(spec: &SynthSpec, label: usize, side: usize, rng: &mut impl Rng) -> Tensor {
    let s = side as f64;
    let l = label as f64;
    let expr = Normal::new(0.0, spec.expression_noise.max(1e-9)).expect("finite");
    let pix = Normal::new(0.0, spec.pixel_noise.max(1e-9)).expect("finite");

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..220.0));
    let tone = rng.random_range(0.45..0.95);
    let skin = [230.0 * tone + 20.0, 180.0 * tone + 15.0, 150.0 * tone + 10.0];
    let eye_col = [40.0, 30.0, 30.0];
    let mouth_col = [120.0, 20.0, 30.0];

    let fx = 0.5 + rng.random_range(-0.04..0.04);
    let fy = 0.52 + rng.random_range(-0.04..0.04);
    let (frx, fry) = (rng.random_range(0.36..0.42), rng.random_range(0.43..0.48));

    // Expression cue: a single latent per face drives all three parts.
    let cue = (l - 2.5) / 2.5 + expr.sample(rng);
    let eye_ry = (0.06 - 0.018 * cue).max(0.012);
    let eye_rx = 0.065;
    let eye_y = fy - 0.1;
    let mouth_y = fy + 0.17;
    let half_width = 0.15 + 0.03 * cue;
    let bend = 0.09 * cue;
    let thickness = 0.03 + 0.01 * cue.max(0.0);
    let light = rng.random_range(0.85..1.15);

    let ellipse = |u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64| -> f64 {
        let r = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
        (r - 1.0) * rx.min(ry) * s
    };

    let mut img = vec![0.0; 3 * side * side];
    for py in 0..side {
        for px in 0..side {
            let u = (px as f64 + 0.5) / s;
            let v = (py as f64 + 0.5) / s;
            let mut col = bg;
            let mut paint = |cov: f64, c: &[f64; 3]| {
                for k in 0..3 {
                    col[k] = col[k] * (1.0 - cov) + c[k] * cov;
                }
            };
            paint(smooth_coverage(ellipse(u, v, fx, fy, frx, fry)), &skin);
            for ex in [fx - 0.15, fx + 0.15] {
                paint(smooth_coverage(ellipse(u, v, ex, eye_y, eye_rx, eye_ry)), &eye_col);
            }
            let t = (u - fx) / half_width;
            if t.abs() <= 1.2 {
                // corners rise (smaller v) as the cue grows
                let curve_v = mouth_y - bend * (t * t - 0.5);
                let along = (t.abs() - 1.0).max(0.0) * half_width;
                let dist = ((v - curve_v).abs().hypot(along) - thickness / 2.0) * s;
                paint(smooth_coverage(dist), &mouth_col);
            }
            for k in 0..3 {
                let val = col[k] * light + pix.sample(rng);
                img[(k * side + py) * side + px] = val.round().clamp(0.0, 255.0);
            }
        }
    }
    Tensor::new(vec![3, side, side], img).expect("side > 0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::class_counts;

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = SynthSpec { n_groups: 12, seed: 9, ..Default::default() };
        let a = synth_generate(&spec, Split::Train).unwrap();
        let b = synth_generate(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec { seed: 10, ..spec }, Split::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_member_groups_share_the_face_label() {
        let spec = SynthSpec { n_groups: 30, faces_per_group: (1, 1), ..Default::default() };
        let m = synth_generate(&spec, Split::Validation).unwrap();
        for g in &m.groups {
            assert_eq!(g.faces.len(), 1);
            assert_eq!(g.group_label, g.faces[0].label);
        }
    }

    #[test]
    fn label_marginals_are_uniform() {
        let spec = SynthSpec { n_groups: 1714, faces_per_group: (3, 4), image_size: 8, ..Default::default() };
        let m = synth_generate(&spec, Split::Train).unwrap();
        let total = m.face_count() as f64;
        assert!(total >= 6000.0);
        for c in class_counts(m.faces()) {
            assert!((c as f64 / total - 1.0 / 6.0).abs() < 0.03);
        }
        m.validate().unwrap();
    }

    #[test]
    fn images_are_integer_valued_and_boxes_positive() {
        let m = synth_generate(&SynthSpec { n_groups: 20, ..Default::default() }, Split::Train).unwrap();
        for f in m.faces() {
            assert!(f.bbox_area_px() > 0.0);
            assert_eq!(f.image.dim(1) as f64, f.bbox.h);
            assert!(f.image.data().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn group_label_is_rounded_member_mean() {
        let spec = SynthSpec { n_groups: 60, ..Default::default() };
        let m = synth_generate(&spec, Split::Train).unwrap();
        let mut bystanders = 0;
        for g in &m.groups {
            // members are at least 0.7x the full face size, bystanders at most 0.6x
            let members: Vec<usize> =
                g.faces.iter().filter(|f| f.bbox.w >= 0.65 * spec.image_size as f64).map(|f| f.label).collect();
            bystanders += g.faces.len() - members.len();
            let mean = members.iter().sum::<usize>() as f64 / members.len() as f64;
            assert_eq!(g.group_label, mean.round() as usize);
        }
        assert!(bystanders > 0);
    }

    #[test]
    fn each_label_renders_differently() {
        // noiseless renders sharing an rng stream differ only in expression
        let spec = SynthSpec { expression_noise: 0.0, pixel_noise: 0.0, ..Default::default() };
        let renders: Vec<Tensor> =
            (0..NUM_CLASSES).map(|label| render_face(&spec, label, 40, &mut stream(3, 3))).collect();
        for pair in renders.windows(2) {
            let diff: f64 = pair[0].data().iter().zip(pair[1].data()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1000.0, "adjacent labels nearly identical: {diff}");
        }
    }
}
