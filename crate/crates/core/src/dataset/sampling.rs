use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{FaceSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::seeded;

fn indices_by_class(faces: &[FaceSample]) -> [Vec<usize>; NUM_CLASSES] {
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, f) in faces.iter().enumerate() {
        by_class[f.label].push(i);
    }
    by_class
}

/// Draws `per_class` faces of every label uniformly without replacement and
/// returns them in shuffled order.
pub fn balance_subset(faces: &[FaceSample], per_class: usize, seed: u64) -> Result<Vec<FaceSample>> {
    let by_class = indices_by_class(faces);
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        if idx.len() < per_class {
            return Err(Error::InsufficientClass { class, available: idx.len(), requested: per_class });
        }
    }
    let mut rng = seeded(seed);
    let mut chosen = Vec::with_capacity(per_class * NUM_CLASSES);
    for idx in &by_class {
        chosen.extend(idx.choose_multiple(&mut rng, per_class).copied());
    }
    chosen.shuffle(&mut rng);
    Ok(chosen.into_iter().map(|i| faces[i].clone()).collect())
}

/// Stratified bootstrap: every position is replaced by a uniform draw (with
/// replacement) from the faces sharing its label, so per-class counts and
/// positional class layout are preserved.
pub fn bootstrap_sample(balanced: &[FaceSample], seed: u64) -> Vec<FaceSample> {
    let by_class = indices_by_class(balanced);
    let mut rng = seeded(seed);
    balanced
        .iter()
        .map(|f| {
            let pool = &by_class[f.label];
            balanced[pool[rng.random_range(0..pool.len())]].clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_counts, BBox};
    use crate::tensor::Tensor;

    /// Faces whose first pixel encodes a unique id.
    fn faces(counts: [usize; NUM_CLASSES]) -> Vec<FaceSample> {
        let mut out = Vec::new();
        let mut id = 0.0;
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut img = Tensor::zeros(&[3, 2, 2]);
                img.data_mut()[0] = id;
                id += 1.0;
                out.push(FaceSample::new(img, label, "g", BBox { x: 0.0, y: 0.0, w: 2.0, h: 2.0 }).unwrap());
            }
        }
        out
    }

    fn ids(faces: &[FaceSample]) -> Vec<u64> {
        faces.iter().map(|f| f.image.data()[0] as u64).collect()
    }

    #[test]
    fn balance_is_exactly_uniform_and_reproducible() {
        let data = faces([10, 4, 7, 5, 9, 6]);
        let a = balance_subset(&data, 4, 11).unwrap();
        assert_eq!(a.len(), 24);
        assert_eq!(class_counts(&a), [4; 6]);
        let mut uniq = ids(&a);
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 24, "sampling must be without replacement");
        assert_eq!(ids(&a), ids(&balance_subset(&data, 4, 11).unwrap()));
    }

    #[test]
    fn forced_selection_returns_full_set_shuffled() {
        let data = faces([3; 6]);
        let out = balance_subset(&data, 3, 2).unwrap();
        let mut got = ids(&out);
        assert_ne!(got, ids(&data));
        got.sort();
        assert_eq!(got, ids(&data));
    }

    #[test]
    fn missing_class_is_reported() {
        let data = faces([2, 2, 0, 2, 2, 2]);
        assert!(matches!(balance_subset(&data, 1, 0), Err(Error::EmptyClass(2))));
        let data = faces([2, 2, 1, 2, 2, 2]);
        assert!(matches!(
            balance_subset(&data, 2, 0),
            Err(Error::InsufficientClass { class: 2, available: 1, requested: 2 })
        ));
    }

    #[test]
    fn paper_scale_balance_size() {
        let data = faces([400, 380, 1000, 2000, 900, 380]);
        assert_eq!(balance_subset(&data, 380, 0).unwrap().len(), 2280);
    }

    #[test]
    fn bootstrap_of_singletons_is_identity() {
        let data = faces([1; 6]);
        for seed in 0..5 {
            assert_eq!(bootstrap_sample(&data, seed), data);
        }
    }

    #[test]
    fn bootstrap_preserves_class_counts_and_varies_with_seed() {
        let data = balance_subset(&faces([400; 6]), 380, 1).unwrap();
        let a = bootstrap_sample(&data, 1);
        let b = bootstrap_sample(&data, 2);
        assert_eq!(class_counts(&a), [380; 6]);
        for (x, y) in a.iter().zip(&data) {
            assert_eq!(x.label, y.label);
        }
        let (mut ma, mut mb) = (ids(&a), ids(&b));
        ma.sort();
        mb.sort();
        assert_ne!(ma, mb);
    }

    #[test]
    fn bootstrap_distinct_fraction_matches_theory() {
        let n = 380;
        let data = faces([n; 6]);
        let expected = 1.0 - (1.0 - 1.0 / n as f64).powi(n as i32);
        let mut per_class = [0.0; NUM_CLASSES];
        for seed in 0..20 {
            let s = bootstrap_sample(&data, seed);
            for (class, acc) in per_class.iter_mut().enumerate() {
                let mut u: Vec<u64> = s.iter().filter(|f| f.label == class).map(|f| f.image.data()[0] as u64).collect();
                u.sort();
                u.dedup();
                *acc += u.len() as f64 / n as f64 / 20.0;
            }
        }
        for frac in per_class {
            assert!((frac - expected).abs() < 0.05, "{frac} vs {expected}");
        }
        let overall = per_class.iter().sum::<f64>() / NUM_CLASSES as f64;
        assert!((overall - expected).abs() < 0.01, "{overall} vs {expected}");
    }
}
