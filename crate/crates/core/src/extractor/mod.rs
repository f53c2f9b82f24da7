//! Per-face expression classifiers: residual network training, bagged
//! ensembles and majority voting.

mod ensemble;
mod resnet;

pub use ensemble::{majority_vote, train_ensemble, vote_from_logits, Ensemble, ENSEMBLE_ORDER_FILE};
pub use resnet::{ResNet, ResidualNetConfig};

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_with, normalize, prepare_input, resize_bilinear, AugmentParams, FaceSample, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, softmax_cross_entropy, Checkpoint, SgdConfig};
use crate::rng::stream;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// Faces per forward pass at inference time.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorTrainConfig {
    pub net: ResidualNetConfig,
    pub sgd: SgdConfig,
    pub augment: bool,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        ExtractorTrainConfig { net: ResidualNetConfig::default(), sgd: SgdConfig::default(), augment: true }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedExtractor {
    pub config: ResidualNetConfig,
    pub net: ResNet,
    pub bootstrap_seed: u64,
    /// Minibatch loss at every iteration.
    pub train_log: Vec<f64>,
}

impl TrainedExtractor {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.net.to_checkpoint();
        ckpt.meta.insert("bootstrap_seed".into(), self.bootstrap_seed.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = ResNet::from_checkpoint(ckpt)?;
        Ok(TrainedExtractor {
            config: net.config().clone(),
            net,
            bootstrap_seed: ckpt.meta_value("bootstrap_seed")?,
            train_log: Vec::new(),
        })
    }

    /// Logits and features for a batch of prepared `(N, 3, 32, 32)` inputs.
    pub fn infer(&self, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        self.net.forward(inputs)
    }

    /// Argmax predictions for raw face crops.
    pub fn predict(&self, faces: &[FaceSample]) -> Result<Vec<usize>> {
        let logits = batched_infer(self, faces)?.0;
        Ok(logits.iter().map(|row| argmax(row)).collect())
    }
}

/// Trains one network on `data` with plain SGD and cross-entropy.
/// All randomness (init, minibatch order, jitter) derives from `seed`.
pub fn train_extractor(data: &[FaceSample], cfg: &ExtractorTrainConfig, seed: u64) -> Result<TrainedExtractor> {
    cfg.sgd.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training faces"));
    }
    let mut net = ResNet::new(&cfg.net, derive(seed, INIT_STREAM))?;
    for f in data {
        if f.label >= cfg.net.num_classes {
            return Err(Error::LabelOutOfRange { label: f.label, classes: cfg.net.num_classes });
        }
    }
    let resized: Vec<Tensor> =
        data.iter().map(|f| resize_bilinear(&f.image, INPUT_SIZE, INPUT_SIZE)).collect::<Result<_>>()?;
    let mut shuffle_rng = stream(seed, SHUFFLE_STREAM);
    let mut augment_rng = stream(seed, AUGMENT_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.sgd.batch_size.min(data.len());
    let mut train_log = Vec::new();
    let sample_len = 3 * INPUT_SIZE * INPUT_SIZE;

    for iter in 0..cfg.sgd.total_iters {
        let mut x = Vec::with_capacity(batch * sample_len);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let img = if cfg.augment {
                augment_with(&resized[i], &AugmentParams::sample(&mut augment_rng))?
            } else {
                resized[i].clone()
            };
            x.extend_from_slice(normalize(&img).data());
            labels.push(data[i].label);
        }
        let x = Tensor::new(vec![batch, 3, INPUT_SIZE, INPUT_SIZE], x)?;
        net.zero_grad();
        let (logits, _) = net.forward_train(&x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() || !logits.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter, lr: cfg.sgd.learning_rate(iter) });
        }
        train_log.push(loss);
        net.backward(&grad)?;
        sgd_step(net.parameters_mut(), &cfg.sgd, iter);
    }
    if let Some(last) = cfg.sgd.total_iters.checked_sub(1) {
        if net.parameters().iter().any(|p| !p.value.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: last, lr: cfg.sgd.learning_rate(last) });
        }
    }
    Ok(TrainedExtractor { config: cfg.net.clone(), net, bootstrap_seed: seed, train_log })
}

/// Penultimate feature of one normalised `3 x 32 x 32` input.
pub fn extract_feature(model: &TrainedExtractor, image: &Tensor) -> Result<Vec<f64>> {
    if image.shape() != [3, INPUT_SIZE, INPUT_SIZE] {
        return Err(Error::shape("extract_feature", image.shape(), &[3, INPUT_SIZE, INPUT_SIZE]));
    }
    let x = image.clone().reshape(vec![1, 3, INPUT_SIZE, INPUT_SIZE])?;
    let (_, features) = model.infer(&x)?;
    Ok(features.into_data())
}

/// Rows of `(logits, features)` for every face, computed in fixed-size chunks.
pub fn batched_infer<F: Borrow<FaceSample>>(
    model: &TrainedExtractor,
    faces: &[F],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut logits = Vec::with_capacity(faces.len());
    let mut features = Vec::with_capacity(faces.len());
    for chunk in faces.chunks(EVAL_CHUNK) {
        let inputs: Vec<Tensor> = chunk.iter().map(|f| prepare_input(&f.borrow().image)).collect::<Result<_>>()?;
        let (l, f) = model.infer(&Tensor::stack(&inputs)?)?;
        logits.extend((0..chunk.len()).map(|i| l.row(i).to_vec()));
        features.extend((0..chunk.len()).map(|i| f.row(i).to_vec()));
    }
    Ok((logits, features))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn derive(seed: u64, s: u64) -> u64 {
    crate::rng::derive_seed(seed, s)
}
