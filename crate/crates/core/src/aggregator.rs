//! Stacked LSTM that fuses the per-member features of one face into a
//! single compact feature, trained through a throwaway scalar head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{extract_feature, Ensemble};
use crate::nn::{l2_loss, sgd_step, Checkpoint, Dense, Parameter, SgdConfig};
use crate::rng::stream;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Number of scan steps, one per ensemble member.
    pub sequence_len: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { input_dim: 64, hidden_dim: 128, num_layers: 2, sequence_len: 5 }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.sequence_len == 0 {
            return Err(Error::Config(format!("invalid LSTM config {self:?}")));
        }
        Ok(())
    }
}

/// One cell's parameters; gate blocks are ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    /// `(4H, in)`
    pub w_x: Parameter,
    /// `(4H, H)`
    pub w_h: Parameter,
    /// `(4H)`
    pub bias: Parameter,
}

impl LstmLayer {
    /// Uniform `+-1/sqrt(H)` weights, forget bias 1, other biases 0.
    pub fn new(id: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            t
        };
        let w_x = uniform(&[4 * hidden, input]);
        let w_h = uniform(&[4 * hidden, hidden]);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmLayer {
            w_x: Parameter::new(format!("{id}.w_x"), w_x),
            w_h: Parameter::new(format!("{id}.w_h"), w_h),
            bias: Parameter::new(format!("{id}.bias"), bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.value.dim(1)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.value.dim(1)
    }

    fn params(&self) -> [&Parameter; 3] {
        [&self.w_x, &self.w_h, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.bias]
    }
}

/// Per-layer hidden and cell vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        LstmState { h: vec![vec![0.0; hidden]; layers], c: vec![vec![0.0; hidden]; layers] }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Everything the backward pass of one batched cell step needs.
#[derive(Clone, Debug)]
pub struct StepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    /// Activated gates `(B, 4H)`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Batched cell step on `x: (B, in)`, `h, c: (B, H)`; returns `(h', c', cache)`.
pub fn lstm_cell_step(layer: &LstmLayer, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor, StepCache)> {
    let (inp, hid) = (layer.input_dim(), layer.hidden_dim());
    if x.rank() != 2 || x.dim(1) != inp {
        return Err(Error::shape("lstm_cell_step", x.shape(), &[x.shape()[0], inp]));
    }
    let b = x.dim(0);
    if h.shape() != [b, hid] || c.shape() != [b, hid] {
        return Err(Error::shape("lstm_cell_step", h.shape(), &[b, hid]));
    }
    let mut gates = Vec::with_capacity(b * 4 * hid);
    for _ in 0..b {
        gates.extend_from_slice(layer.bias.value.data());
    }
    gemm(b, inp, 4 * hid, 1.0, x.data(), false, layer.w_x.value.data(), true, 1.0, &mut gates);
    gemm(b, hid, 4 * hid, 1.0, h.data(), false, layer.w_h.value.data(), true, 1.0, &mut gates);
    let mut c_new = vec![0.0; b * hid];
    let mut h_new = vec![0.0; b * hid];
    let mut tanh_c = vec![0.0; b * hid];
    for r in 0..b {
        let g = &mut gates[r * 4 * hid..(r + 1) * 4 * hid];
        for (k, v) in g.iter_mut().enumerate() {
            *v = if (2 * hid..3 * hid).contains(&k) { v.tanh() } else { sigmoid(*v) };
        }
        for j in 0..hid {
            let (i, f, gg, o) = (g[j], g[hid + j], g[2 * hid + j], g[3 * hid + j]);
            let cn = f * c.data()[r * hid + j] + i * gg;
            let tc = cn.tanh();
            c_new[r * hid + j] = cn;
            tanh_c[r * hid + j] = tc;
            h_new[r * hid + j] = o * tc;
        }
    }
    let cache = StepCache { x: x.clone(), h_prev: h.clone(), c_prev: c.clone(), gates, tanh_c };
    Ok((Tensor::new(vec![b, hid], h_new)?, Tensor::new(vec![b, hid], c_new)?, cache))
}

/// Backward of one step given `dh'` and `dc'`; accumulates parameter
/// gradients and returns `(dx, dh, dc)`.
pub fn lstm_cell_backward(
    layer: &mut LstmLayer,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (inp, hid) = (layer.input_dim(), layer.hidden_dim());
    let b = cache.x.dim(0);
    if dh.len() != b * hid || dc.len() != b * hid {
        return Err(Error::shape("lstm_cell_backward", &[dh.len()], &[b * hid]));
    }
    let mut dgates = vec![0.0; b * 4 * hid];
    let mut dc_prev = vec![0.0; b * hid];
    for r in 0..b {
        let g = &cache.gates[r * 4 * hid..(r + 1) * 4 * hid];
        let dg = &mut dgates[r * 4 * hid..(r + 1) * 4 * hid];
        for j in 0..hid {
            let k = r * hid + j;
            let (i, f, gg, o) = (g[j], g[hid + j], g[2 * hid + j], g[3 * hid + j]);
            let tc = cache.tanh_c[k];
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dg[j] = dct * gg * i * (1.0 - i);
            dg[hid + j] = dct * cache.c_prev.data()[k] * f * (1.0 - f);
            dg[2 * hid + j] = dct * i * (1.0 - gg * gg);
            dg[3 * hid + j] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
    }
    let mut dwx = vec![0.0; 4 * hid * inp];
    gemm(4 * hid, b, inp, 1.0, &dgates, true, cache.x.data(), false, 0.0, &mut dwx);
    layer.w_x.accumulate(&dwx);
    let mut dwh = vec![0.0; 4 * hid * hid];
    gemm(4 * hid, b, hid, 1.0, &dgates, true, cache.h_prev.data(), false, 0.0, &mut dwh);
    layer.w_h.accumulate(&dwh);
    let mut db = vec![0.0; 4 * hid];
    for row in dgates.chunks(4 * hid) {
        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    layer.bias.accumulate(&db);
    let mut dx = vec![0.0; b * inp];
    gemm(b, 4 * hid, inp, 1.0, &dgates, false, layer.w_x.value.data(), false, 0.0, &mut dx);
    let mut dh_prev = vec![0.0; b * hid];
    gemm(b, 4 * hid, hid, 1.0, &dgates, false, layer.w_h.value.data(), false, 0.0, &mut dh_prev);
    Ok((Tensor::new(vec![b, inp], dx)?, Tensor::new(vec![b, hid], dh_prev)?, Tensor::new(vec![b, hid], dc_prev)?))
}

#[derive(Clone, Debug)]
pub struct Lstm {
    config: LstmConfig,
    pub layers: Vec<LstmLayer>,
    /// `[layer][step]` caches from the last `forward_train`.
    caches: Vec<Vec<StepCache>>,
}

impl Lstm {
    pub fn new(config: &LstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x157);
        let layers = (0..config.num_layers)
            .map(|l| {
                let inp = if l == 0 { config.input_dim } else { config.hidden_dim };
                LstmLayer::new(&format!("lstm.layer{l}"), inp, config.hidden_dim, &mut rng)
            })
            .collect();
        Ok(Lstm { config: config.clone(), layers, caches: Vec::new() })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    fn check_steps(&self, steps: &[Tensor]) -> Result<usize> {
        if steps.len() != self.config.sequence_len {
            return Err(Error::shape("lstm scan", &[steps.len()], &[self.config.sequence_len]));
        }
        let b = steps[0].shape()[0];
        for s in steps {
            if s.shape() != [b, self.config.input_dim] {
                return Err(Error::shape("lstm scan", s.shape(), &[b, self.config.input_dim]));
            }
        }
        Ok(b)
    }

    fn run(&self, steps: &[Tensor], mut keep: Option<&mut Vec<Vec<StepCache>>>) -> Result<Tensor> {
        let b = self.check_steps(steps)?;
        let hid = self.config.hidden_dim;
        let mut inputs = steps.to_vec();
        for layer in &self.layers {
            let mut h = Tensor::zeros(&[b, hid]);
            let mut c = Tensor::zeros(&[b, hid]);
            let mut layer_caches = Vec::with_capacity(inputs.len());
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let (hn, cn, cache) = lstm_cell_step(layer, x, &h, &c)?;
                if keep.is_some() {
                    layer_caches.push(cache);
                }
                outputs.push(hn.clone());
                h = hn;
                c = cn;
            }
            if let Some(k) = keep.as_deref_mut() {
                k.push(layer_caches);
            }
            inputs = outputs;
        }
        Ok(inputs.pop().expect("non-empty sequence"))
    }

    /// Batched scan over `steps[t]: (B, input_dim)` from zero state; returns the
    /// final top-layer `h`, `(B, hidden_dim)`.
    pub fn forward(&self, steps: &[Tensor]) -> Result<Tensor> {
        self.run(steps, None)
    }

    pub fn forward_train(&mut self, steps: &[Tensor]) -> Result<Tensor> {
        let mut caches = Vec::new();
        let out = self.run(steps, Some(&mut caches))?;
        self.caches = caches;
        Ok(out)
    }

    /// Back-propagation through time from a gradient on the final top `h`;
    /// returns the gradient for each input step.
    pub fn backward(&mut self, grad_h: &Tensor) -> Result<Vec<Tensor>> {
        let caches = std::mem::take(&mut self.caches);
        if caches.len() != self.layers.len() {
            return Err(Error::InvalidTensor("lstm backward without forward".into()));
        }
        let hid = self.config.hidden_dim;
        let steps = caches[0].len();
        let b = grad_h.shape()[0];
        if grad_h.shape() != [b, hid] {
            return Err(Error::shape("lstm backward", grad_h.shape(), &[b, hid]));
        }
        // gradient arriving at each step's output of the current layer
        let mut out_grads: Vec<Vec<f64>> = vec![vec![0.0; b * hid]; steps];
        out_grads[steps - 1].copy_from_slice(grad_h.data());
        let mut input_grads = Vec::new();
        for (layer, layer_caches) in self.layers.iter_mut().zip(&caches).rev() {
            let mut dh_next = vec![0.0; b * hid];
            let mut dc_next = vec![0.0; b * hid];
            let mut dxs = vec![Tensor::zeros(&[1]); steps];
            for t in (0..steps).rev() {
                let dh: Vec<f64> = out_grads[t].iter().zip(&dh_next).map(|(a, c)| a + c).collect();
                let (dx, dh_prev, dc_prev) = lstm_cell_backward(layer, &layer_caches[t], &dh, &dc_next)?;
                dh_next = dh_prev.into_data();
                dc_next = dc_prev.into_data();
                dxs[t] = dx;
            }
            out_grads = dxs.iter().map(|t| t.data().to_vec()).collect();
            input_grads = dxs;
        }
        Ok(input_grads)
    }

    /// Single-sequence scan: `features[t]` is member `t`'s vector.
    pub fn scan(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let steps: Vec<Tensor> =
            features.iter().map(|f| Tensor::new(vec![1, f.len()], f.clone())).collect::<Result<_>>()?;
        if steps.is_empty() {
            return Err(Error::Empty("scan sequence"));
        }
        Ok(self.forward(&steps)?.into_data())
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ckpt = Checkpoint::new()
            .with_meta("kind", "lstm")
            .with_meta("input_dim", c.input_dim)
            .with_meta("hidden_dim", c.hidden_dim)
            .with_meta("num_layers", c.num_layers)
            .with_meta("n", c.sequence_len);
        for p in self.parameters() {
            ckpt.push(p.id.clone(), p.value.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = LstmConfig {
            input_dim: ckpt.meta_value("input_dim")?,
            hidden_dim: ckpt.meta_value("hidden_dim")?,
            num_layers: ckpt.meta_value("num_layers")?,
            sequence_len: ckpt.meta_value("n")?,
        };
        let mut lstm = Lstm::new(&config, 0)?;
        for p in lstm.parameters_mut() {
            let t = ckpt.require(&p.id)?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint", t.shape(), p.value.shape()));
            }
            p.value = t.clone();
        }
        Ok(lstm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Lstm::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedAggregator {
    pub lstm: Lstm,
    /// Scalar regression head used only during training.
    pub head: Dense,
    pub train_log: Vec<f64>,
}

impl TrainedAggregator {
    /// Head prediction for each sequence (diagnostics only).
    pub fn predict(&self, sequences: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        let steps = to_steps(sequences, &(0..sequences.len()).collect::<Vec<_>>(), self.lstm.config())?;
        let h = self.lstm.forward(&steps)?;
        Ok(self.head.forward(&h)?.into_data())
    }
}

/// Gathers the chosen sequences into per-step `(B, dim)` tensors.
fn to_steps(sequences: &[Vec<Vec<f64>>], idx: &[usize], cfg: &LstmConfig) -> Result<Vec<Tensor>> {
    (0..cfg.sequence_len)
        .map(|t| {
            let mut data = Vec::with_capacity(idx.len() * cfg.input_dim);
            for &i in idx {
                let seq = &sequences[i];
                if seq.len() != cfg.sequence_len || seq[t].len() != cfg.input_dim {
                    return Err(Error::shape(
                        "aggregator input",
                        &[seq.len(), seq.get(t).map_or(0, Vec::len)],
                        &[cfg.sequence_len, cfg.input_dim],
                    ));
                }
                data.extend_from_slice(&seq[t]);
            }
            Tensor::new(vec![idx.len(), cfg.input_dim], data)
        })
        .collect()
}

/// Fits the LSTM plus a scalar head to `labels` with mean squared error.
/// `sequences[i][t]` is member `t`'s feature for face `i`.
pub fn train_aggregator(
    sequences: &[Vec<Vec<f64>>],
    labels: &[f64],
    config: &LstmConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<TrainedAggregator> {
    sgd.validate()?;
    if sequences.is_empty() {
        return Err(Error::Empty("aggregator training faces"));
    }
    if sequences.len() != labels.len() {
        return Err(Error::shape("train_aggregator", &[sequences.len()], &[labels.len()]));
    }
    if labels.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteInput("aggregator labels".into()));
    }
    let mut lstm = Lstm::new(config, seed)?;
    let mut head = Dense::new("head", config.hidden_dim, 1, &mut stream(seed, 0x4EAD));
    let mut rng = stream(seed, 0x5EC);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut cursor = order.len();
    let batch = sgd.batch_size.min(sequences.len());
    let mut train_log = Vec::with_capacity(sgd.total_iters);
    for iter in 0..sgd.total_iters {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let steps = to_steps(sequences, &idx, config)?;
        let target = Tensor::new(vec![batch, 1], idx.iter().map(|&i| labels[i]).collect())?;
        lstm.zero_grad();
        head.weight.zero_grad();
        head.bias.zero_grad();
        let h = lstm.forward_train(&steps)?;
        let pred = head.forward_train(&h)?;
        let (loss, grad) = l2_loss(&pred, &target)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter, lr: sgd.learning_rate(iter) });
        }
        train_log.push(loss);
        let dh = head.backward(&grad)?;
        lstm.backward(&dh)?;
        let mut params = lstm.parameters_mut();
        params.push(&mut head.weight);
        params.push(&mut head.bias);
        sgd_step(params, sgd, iter);
    }
    Ok(TrainedAggregator { lstm, head, train_log })
}

/// Features of one raw face crop through every member in `fixed_order`,
/// fused by the LSTM.
pub fn aggregate_face(ensemble: &Ensemble, lstm: &Lstm, image: &Tensor) -> Result<Vec<f64>> {
    let input = crate::dataset::prepare_input(image)?;
    let features = ensemble.members.iter().map(|m| extract_feature(m, &input)).collect::<Result<Vec<_>>>()?;
    lstm.scan(&features)
}
