use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{batched_infer, train_extractor, ExtractorTrainConfig, TrainedExtractor};
use crate::dataset::{bootstrap_sample, FaceSample};
use crate::error::{Error, Result};
use crate::nn::{softmax, Checkpoint};
use crate::tensor::Tensor;

pub const ENSEMBLE_ORDER_FILE: &str = "ensemble_order.txt";
const ORDER_HEADER: &str = "rrde-ensemble v1";

/// Bagged extractors kept in training order; prefixes form the smaller ensembles.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<TrainedExtractor>,
    /// Member index `k` of each entry in `members`.
    pub fixed_order: Vec<usize>,
}

/// Trains `n` members; member `k` sees the bootstrap sample drawn with seed `base_seed + k`.
/// Members are independent, so the first `m` of an `n`-member ensemble equal an `m`-member one.
pub fn train_ensemble(
    balanced: &[FaceSample],
    n: usize,
    base_seed: u64,
    cfg: &ExtractorTrainConfig,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    let members = (0..n)
        .into_par_iter()
        .map(|k| {
            let seed = base_seed.wrapping_add(k as u64);
            let sample = bootstrap_sample(balanced, seed);
            train_extractor(&sample, cfg, seed).map_err(|e| Error::Member { index: k, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { members, fixed_order: (0..n).collect() })
}

/// Most frequent label; ties go to the larger summed confidence, then the smaller label.
pub fn majority_vote(predictions: &[usize], confidences: Option<&[f64]>) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let classes = predictions.iter().max().copied().unwrap_or(0) + 1;
    if let Some(c) = confidences {
        if c.len() < classes {
            return Err(Error::shape("majority_vote", &[c.len()], &[classes]));
        }
    }
    let mut counts = vec![0usize; classes];
    for &p in predictions {
        counts[p] += 1;
    }
    let mut best = 0;
    for label in 1..classes {
        let better = match counts[label].cmp(&counts[best]) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => confidences.is_some_and(|c| c[label] > c[best]),
        };
        if better {
            best = label;
        }
    }
    Ok(best)
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The first `n` members.
    pub fn prefix(&self, n: usize) -> Result<Ensemble> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!("cannot take {n} of {} members", self.len())));
        }
        Ok(Ensemble { members: self.members[..n].to_vec(), fixed_order: self.fixed_order[..n].to_vec() })
    }

    /// Logits per member, per face.
    pub fn member_logits(&self, faces: &[FaceSample]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.members.iter().map(|m| Ok(batched_infer(m, faces)?.0)).collect()
    }

    /// Majority-vote labels for each face.
    pub fn vote(&self, faces: &[FaceSample]) -> Result<Vec<usize>> {
        vote_from_logits(&self.member_logits(faces)?)
    }

    /// Writes `member_<k>.ckpt` files plus an order manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{ORDER_HEADER}\nmember,bootstrap_seed,file\n");
        for (m, &k) in self.members.iter().zip(&self.fixed_order) {
            let file = format!("member_{k}.ckpt");
            m.to_checkpoint().save(dir.join(&file))?;
            manifest.push_str(&format!("{k},{},{file}\n", m.bootstrap_seed));
        }
        let path = dir.join(ENSEMBLE_ORDER_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Ensemble> {
        let dir = dir.as_ref();
        let path = dir.join(ENSEMBLE_ORDER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(ORDER_HEADER) {
            return Err(Error::Format(format!("{}: bad ensemble header", path.display())));
        }
        lines.next();
        let mut members = Vec::new();
        let mut fixed_order = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let [k, _, file] = cols[..] else {
                return Err(Error::Format(format!("bad ensemble row `{line}`")));
            };
            let k: usize = k.parse().map_err(|_| Error::Format(format!("bad member index `{k}`")))?;
            members.push(TrainedExtractor::from_checkpoint(&Checkpoint::load(dir.join(file))?)?);
            fixed_order.push(k);
        }
        if members.is_empty() {
            return Err(Error::Empty("ensemble members"));
        }
        Ok(Ensemble { members, fixed_order })
    }
}

/// Votes from per-member logits (`[member][face][class]`).
pub fn vote_from_logits(logits: &[Vec<Vec<f64>>]) -> Result<Vec<usize>> {
    let Some(first) = logits.first() else {
        return Err(Error::Empty("ensemble members"));
    };
    (0..first.len())
        .map(|i| {
            let mut preds = Vec::with_capacity(logits.len());
            let mut conf = vec![0.0; first[i].len()];
            for member in logits {
                let row = &member[i];
                preds.push(super::argmax(row));
                let p = softmax(&Tensor::new(vec![1, row.len()], row.clone())?)?;
                conf.iter_mut().zip(p.data()).for_each(|(c, v)| *c += v);
            }
            majority_vote(&preds, Some(&conf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, Split, SynthSpec};
    use crate::extractor::ResidualNetConfig;
    use crate::nn::SgdConfig;

    fn cfg() -> ExtractorTrainConfig {
        ExtractorTrainConfig {
            net: ResidualNetConfig { depth: 8, widths: [2, 2, 4], num_classes: 6, feature_dim: 4 },
            sgd: SgdConfig { batch_size: 4, total_iters: 2, ..Default::default() },
            augment: false,
        }
    }

    fn faces() -> Vec<FaceSample> {
        let spec = SynthSpec { n_groups: 2, seed: 1, ..Default::default() };
        synth_generate(&spec, Split::Train).unwrap().faces().cloned().collect()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[2, 2, 5], None).unwrap(), 2);
        assert_eq!(majority_vote(&[1, 4], None).unwrap(), 1);
        let conf = [0.0, 0.2, 0.0, 0.0, 0.9, 0.0];
        assert_eq!(majority_vote(&[1, 4], Some(&conf)).unwrap(), 4);
        assert_eq!(majority_vote(&[3], None).unwrap(), 3);
        assert!(majority_vote(&[], None).is_err());
    }

    #[test]
    fn prefix_members_match_smaller_ensemble() {
        let data = faces();
        let big = train_ensemble(&data, 3, 40, &cfg()).unwrap();
        let small = train_ensemble(&data, 2, 40, &cfg()).unwrap();
        for k in 0..2 {
            assert_eq!(big.members[k].to_checkpoint(), small.members[k].to_checkpoint());
            assert_eq!(big.members[k].bootstrap_seed, 40 + k as u64);
        }
        assert_eq!(big.prefix(2).unwrap().vote(&data).unwrap(), small.vote(&data).unwrap());
        assert!(big.prefix(4).is_err());
    }

    #[test]
    fn member_failure_names_index() {
        let mut c = cfg();
        c.net.num_classes = 2;
        let data = faces();
        match train_ensemble(&data, 2, 0, &c) {
            Err(Error::Member { index, .. }) => assert!(index < 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let data = faces();
        let ens = train_ensemble(&data, 2, 5, &cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path()).unwrap();
        let back = Ensemble::load(dir.path()).unwrap();
        assert_eq!(back.fixed_order, vec![0, 1]);
        assert_eq!(back.vote(&data).unwrap(), ens.vote(&data).unwrap());
    }
}
