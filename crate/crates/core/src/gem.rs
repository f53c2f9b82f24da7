//! Group emotion models: combine per-face estimates or features into one
//! group-level estimate or feature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One face as seen by the group models.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceRecord {
    /// Face-level happiness estimate.
    pub estimate: f64,
    /// Aggregated face feature.
    pub feature: Vec<f64>,
    /// Bounding-box area in pixels.
    pub bbox_area_px: f64,
    pub centroid: (f64, f64),
}

impl FaceRecord {
    pub fn new(estimate: f64, feature: Vec<f64>, bbox_area_px: f64, centroid: (f64, f64)) -> Result<Self> {
        if !(bbox_area_px > 0.0 && bbox_area_px.is_finite()) {
            return Err(Error::DegenerateGeometry(format!("bbox area must be positive, got {bbox_area_px}")));
        }
        if !centroid.0.is_finite() || !centroid.1.is_finite() {
            return Err(Error::NonFiniteInput("face centroid".into()));
        }
        Ok(FaceRecord { estimate, feature, bbox_area_px, centroid })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GemKind {
    MeanEstimation,
    MeanEncoding,
    WeightedMeanEstimation,
    WeightedMeanEncoding,
}

impl GemKind {
    pub const ALL: [GemKind; 4] = [
        GemKind::MeanEstimation,
        GemKind::MeanEncoding,
        GemKind::WeightedMeanEstimation,
        GemKind::WeightedMeanEncoding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GemKind::MeanEstimation => "mean_estimation",
            GemKind::MeanEncoding => "mean_encoding",
            GemKind::WeightedMeanEstimation => "weighted_mean_estimation",
            GemKind::WeightedMeanEncoding => "weighted_mean_encoding",
        }
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, GemKind::WeightedMeanEstimation | GemKind::WeightedMeanEncoding)
    }

    pub fn is_encoding(self) -> bool {
        matches!(self, GemKind::MeanEncoding | GemKind::WeightedMeanEncoding)
    }

    /// Group feature fed to the group-level regressor: a 1-vector for the
    /// estimation models, the pooled feature for the encoding models.
    pub fn group_input(self, faces: &[FaceRecord]) -> Result<Vec<f64>> {
        match self {
            GemKind::MeanEstimation => Ok(vec![mean_estimation(faces)?]),
            GemKind::MeanEncoding => mean_encoding(faces),
            GemKind::WeightedMeanEstimation => Ok(vec![weighted_mean_estimation(faces)?]),
            GemKind::WeightedMeanEncoding => weighted_mean_encoding(faces),
        }
    }
}

impl fmt::Display for GemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown group model `{s}`")))
    }
}

fn non_empty(faces: &[FaceRecord]) -> Result<()> {
    if faces.is_empty() {
        Err(Error::Empty("group faces"))
    } else {
        Ok(())
    }
}

pub fn mean_estimation(faces: &[FaceRecord]) -> Result<f64> {
    non_empty(faces)?;
    Ok(faces.iter().map(|f| f.estimate).sum::<f64>() / faces.len() as f64)
}

pub fn mean_encoding(faces: &[FaceRecord]) -> Result<Vec<f64>> {
    weighted_features(faces, &vec![1.0; faces.len()])
}

/// `s_i = area_i / sum_j |c_i - c_j|`; a lone face gets 1.
pub fn significance(faces: &[FaceRecord]) -> Result<Vec<f64>> {
    non_empty(faces)?;
    if faces.len() == 1 {
        return Ok(vec![1.0]);
    }
    faces
        .iter()
        .map(|fi| {
            let delta: f64 =
                faces.iter().map(|fj| (fi.centroid.0 - fj.centroid.0).hypot(fi.centroid.1 - fj.centroid.1)).sum();
            if delta > 0.0 {
                Ok(fi.bbox_area_px / delta)
            } else {
                Err(Error::DegenerateGeometry(format!(
                    "all {} face centroids coincide at ({}, {})",
                    faces.len(),
                    fi.centroid.0,
                    fi.centroid.1
                )))
            }
        })
        .collect()
}

pub fn weighted_mean_estimation(faces: &[FaceRecord]) -> Result<f64> {
    let s = significance(faces)?;
    let total: f64 = s.iter().sum();
    Ok(faces.iter().zip(&s).map(|(f, w)| w * f.estimate).sum::<f64>() / total)
}

pub fn weighted_mean_encoding(faces: &[FaceRecord]) -> Result<Vec<f64>> {
    let s = significance(faces)?;
    weighted_features(faces, &s)
}

fn weighted_features(faces: &[FaceRecord], weights: &[f64]) -> Result<Vec<f64>> {
    non_empty(faces)?;
    let dim = faces[0].feature.len();
    if let Some(f) = faces.iter().find(|f| f.feature.len() != dim) {
        return Err(Error::shape("mean_encoding", &[f.feature.len()], &[dim]));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; dim];
    for (f, w) in faces.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(&f.feature) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn face(estimate: f64, feature: Vec<f64>, area: f64, c: (f64, f64)) -> FaceRecord {
        FaceRecord::new(estimate, feature, area, c).unwrap()
    }

    fn est(fs: &[f64]) -> Vec<FaceRecord> {
        fs.iter().enumerate().map(|(i, &f)| face(f, vec![f], 1.0, (i as f64, 0.0))).collect()
    }

    #[test]
    fn mean_estimation_examples() {
        assert_eq!(mean_estimation(&est(&[2.0, 4.0])).unwrap(), 3.0);
        assert_eq!(mean_estimation(&est(&[1.7])).unwrap(), 1.7);
        assert_eq!(mean_estimation(&est(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap(), 2.5);
        assert!(mean_estimation(&[]).is_err());
    }

    #[test]
    fn mean_encoding_examples() {
        let same = vec![face(0.0, vec![1.0, -2.0], 1.0, (0.0, 0.0)), face(0.0, vec![1.0, -2.0], 1.0, (1.0, 0.0))];
        assert_eq!(mean_encoding(&same).unwrap(), vec![1.0, -2.0]);
        let opposite = vec![face(0.0, vec![1.0, 0.0], 1.0, (0.0, 0.0)), face(0.0, vec![-1.0, 0.0], 1.0, (1.0, 0.0))];
        assert_eq!(mean_encoding(&opposite).unwrap(), vec![0.0, 0.0]);
        let ragged = vec![face(0.0, vec![1.0], 1.0, (0.0, 0.0)), face(0.0, vec![1.0, 2.0], 1.0, (1.0, 0.0))];
        assert!(mean_encoding(&ragged).is_err());
    }

    #[test]
    fn significance_examples() {
        assert_eq!(significance(&[face(0.0, vec![], 77.0, (5.0, 5.0))]).unwrap(), vec![1.0]);
        let two = [face(2.0, vec![], 100.0, (0.0, 0.0)), face(5.0, vec![], 200.0, (3.0, 4.0))];
        assert_eq!(significance(&two).unwrap(), vec![20.0, 40.0]);
        assert_eq!(weighted_mean_estimation(&two).unwrap(), 4.0);
        let line: Vec<_> = (0..3).map(|x| face(0.0, vec![], 6.0, (x as f64, 0.0))).collect();
        assert_eq!(significance(&line).unwrap(), vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn coincident_centroids_are_rejected() {
        let faces = [face(0.0, vec![], 1.0, (2.0, 2.0)), face(0.0, vec![], 1.0, (2.0, 2.0))];
        assert!(matches!(significance(&faces), Err(Error::DegenerateGeometry(_))));
        assert!(FaceRecord::new(0.0, vec![], 0.0, (0.0, 0.0)).is_err());
    }

    #[test]
    fn weighted_encoding_examples() {
        // areas chosen so that s = (1, 3)
        let faces = [face(0.0, vec![0.0], 1.0, (0.0, 0.0)), face(0.0, vec![4.0], 3.0, (1.0, 0.0))];
        assert_eq!(significance(&faces).unwrap(), vec![1.0, 3.0]);
        assert_eq!(weighted_mean_encoding(&faces).unwrap(), vec![3.0]);
        let single = [face(2.5, vec![1.0, 2.0], 9.0, (0.0, 0.0))];
        assert_eq!(weighted_mean_encoding(&single).unwrap(), vec![1.0, 2.0]);
        assert_eq!(weighted_mean_estimation(&single).unwrap(), 2.5);
    }

    #[test]
    fn equal_weights_reduce_to_plain_means() {
        // equilateral triangle, equal areas
        let h = 3f64.sqrt() / 2.0;
        let faces = [
            face(1.0, vec![1.0, 0.0], 4.0, (0.0, 0.0)),
            face(2.0, vec![0.0, 1.0], 4.0, (1.0, 0.0)),
            face(4.0, vec![2.0, 2.0], 4.0, (0.5, h)),
        ];
        let s = significance(&faces).unwrap();
        assert!((s[0] - s[1]).abs() < 1e-12 && (s[1] - s[2]).abs() < 1e-12);
        assert!((weighted_mean_estimation(&faces).unwrap() - mean_estimation(&faces).unwrap()).abs() < 1e-12);
        let a = weighted_mean_encoding(&faces).unwrap();
        let b = mean_encoding(&faces).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn gem_names_round_trip() {
        for k in GemKind::ALL {
            assert_eq!(k.name().parse::<GemKind>().unwrap(), k);
        }
        assert_eq!(GemKind::MeanEncoding.group_input(&est(&[1.0, 3.0])).unwrap(), vec![2.0]);
    }

    fn group() -> impl Strategy<Value = Vec<FaceRecord>> {
        prop::collection::vec(
            (0.0..5.0f64, prop::collection::vec(-3.0..3.0f64, 4), 1.0..500.0f64, -50.0..50.0f64, -50.0..50.0f64),
            2..7,
        )
        .prop_map(|v| v.into_iter().map(|(e, x, a, cx, cy)| face(e, x, a, (cx, cy))).collect())
    }

    proptest! {
        #[test]
        fn weights_scale_with_area_and_outputs_do_not(faces in group(), k in 0.1..10.0f64) {
            let scaled: Vec<_> = faces.iter().map(|f| FaceRecord { bbox_area_px: f.bbox_area_px * k, ..f.clone() }).collect();
            let s = significance(&faces).unwrap();
            let t = significance(&scaled).unwrap();
            for (a, b) in s.iter().zip(&t) {
                prop_assert!(*a > 0.0);
                prop_assert!((b - k * a).abs() <= 1e-12 * b.abs().max(1.0));
            }
            prop_assert!((weighted_mean_estimation(&faces).unwrap() - weighted_mean_estimation(&scaled).unwrap()).abs() < 1e-12);
            for (a, b) in weighted_mean_encoding(&faces).unwrap().iter().zip(weighted_mean_encoding(&scaled).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn rigid_motion_keeps_significance(faces in group(), theta in 0.0..6.3f64, dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let (sn, cs) = theta.sin_cos();
            let moved: Vec<_> = faces.iter().map(|f| {
                let (x, y) = f.centroid;
                FaceRecord { centroid: (cs * x - sn * y + dx, sn * x + cs * y + dy), ..f.clone() }
            }).collect();
            for (a, b) in significance(&faces).unwrap().iter().zip(significance(&moved).unwrap()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
            }
        }

        #[test]
        fn permutation_invariance_and_convex_hull(faces in group(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut shuffled = faces.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            for kind in GemKind::ALL {
                let a = kind.group_input(&faces).unwrap();
                let b = kind.group_input(&shuffled).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
            let lo = faces.iter().map(|f| f.estimate).fold(f64::INFINITY, f64::min);
            let hi = faces.iter().map(|f| f.estimate).fold(f64::NEG_INFINITY, f64::max);
            for g in [mean_estimation(&faces).unwrap(), weighted_mean_estimation(&faces).unwrap()] {
                prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
            }
            let enc = weighted_mean_encoding(&faces).unwrap();
            for (d, v) in enc.iter().enumerate() {
                let lo = faces.iter().map(|f| f.feature[d]).fold(f64::INFINITY, f64::min);
                let hi = faces.iter().map(|f| f.feature[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn mean_encoding_matches_recomputation(xs in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 128), 3)) {
            let faces: Vec<_> = xs.iter().enumerate().map(|(i, x)| face(0.0, x.clone(), 1.0, (i as f64, 0.0))).collect();
            let got = mean_encoding(&faces).unwrap();
            for d in 0..128 {
                let want = (xs[0][d] + xs[1][d] + xs[2][d]) / 3.0;
                prop_assert!((got[d] - want).abs() < 1e-12);
            }
        }
    }
}
