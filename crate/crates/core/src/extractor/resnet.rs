//! CIFAR-style residual network: 3x3 stem, three stages of basic blocks,
//! global average pooling and a linear classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, BatchNorm, Checkpoint, Conv2d, Dense, GlobalAvgPool, Parameter, Relu};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualNetConfig {
    /// Total weighted layers, `6n + 2` for `n` blocks per stage.
    pub depth: usize,
    pub widths: [usize; 3],
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Default for ResidualNetConfig {
    fn default() -> Self {
        ResidualNetConfig { depth: 20, widths: [16, 32, 64], num_classes: 6, feature_dim: 64 }
    }
}

impl ResidualNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 8 || !(self.depth - 2).is_multiple_of(6) {
            return Err(Error::Config(format!("depth must be 6n+2 with n >= 1, got {}", self.depth)));
        }
        if self.widths.contains(&0) || self.num_classes < 2 {
            return Err(Error::Config("widths must be positive and num_classes >= 2".into()));
        }
        if self.feature_dim != self.widths[2] {
            return Err(Error::Config(format!(
                "feature_dim {} must equal the last stage width {}",
                self.feature_dim, self.widths[2]
            )));
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(id: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl rand::Rng) -> Self {
        ConvBn {
            conv: Conv2d::new(&format!("{id}.conv"), cin, cout, k, stride, k / 2, rng),
            bn: BatchNorm::new(&format!("{id}.bn"), cout),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward_train(x)?;
        self.bn.forward_train(&y)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.bn.backward(g)?;
        self.conv.backward(&g)
    }
}

/// conv-BN-ReLU-conv-BN plus shortcut, then ReLU.
#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvBn,
    relu_mid: Relu,
    second: ConvBn,
    /// 1x1 stride-2 projection where the shape changes.
    projection: Option<ConvBn>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(id: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl rand::Rng) -> Self {
        let projection =
            (stride != 1 || cin != cout).then(|| ConvBn::new(&format!("{id}.shortcut"), cin, cout, 1, stride, rng));
        BasicBlock {
            first: ConvBn::new(&format!("{id}.a"), cin, cout, 3, stride, rng),
            relu_mid: Relu::default(),
            second: ConvBn::new(&format!("{id}.b"), cout, cout, 3, 1, rng),
            projection,
            relu_out: Relu::default(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = Relu::forward(&self.first.forward(x)?);
        let mut out = self.second.forward(&h)?;
        match &self.projection {
            Some(p) => out.add_assign(&p.forward(x)?)?,
            None => out.add_assign(x)?,
        }
        Ok(Relu::forward(&out))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.first.forward_train(x)?;
        let h = self.relu_mid.forward_train(&h);
        let mut out = self.second.forward_train(&h)?;
        match &mut self.projection {
            Some(p) => out.add_assign(&p.forward_train(x)?)?,
            None => out.add_assign(x)?,
        }
        Ok(self.relu_out.forward_train(&out))
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(g)?;
        let mut dx = self.first.backward(&self.relu_mid.backward(&self.second.backward(&g)?)?)?;
        match &mut self.projection {
            Some(p) => dx.add_assign(&p.backward(&g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut v = vec![&self.first, &self.second];
        v.extend(self.projection.as_ref());
        v
    }

    fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut v = vec![&mut self.first, &mut self.second];
        v.extend(self.projection.as_mut());
        v
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    config: ResidualNetConfig,
    stem: ConvBn,
    stem_relu: Relu,
    blocks: Vec<BasicBlock>,
    pool: GlobalAvgPool,
    fc: Dense,
}

impl ResNet {
    /// Builds a freshly initialised network; weights depend only on `seed`.
    pub fn new(config: &ResidualNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x1417);
        let stem = ConvBn::new("stem", 3, config.widths[0], 3, 1, &mut rng);
        let mut blocks = Vec::new();
        let mut cin = config.widths[0];
        for (s, &w) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage() {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(&format!("stage{s}.block{b}"), cin, w, stride, &mut rng));
                cin = w;
            }
        }
        let fc = Dense::new("fc", config.feature_dim, config.num_classes, &mut rng);
        Ok(ResNet {
            config: config.clone(),
            stem,
            stem_relu: Relu::default(),
            blocks,
            pool: GlobalAvgPool::default(),
            fc,
        })
    }

    pub fn config(&self) -> &ResidualNetConfig {
        &self.config
    }

    /// Number of weighted layers actually instantiated (convs on the main path plus the classifier).
    pub fn weighted_layers(&self) -> usize {
        1 + 2 * self.blocks.len() + 1
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.dim(1) != 3 {
            return Err(Error::shape("resnet", x.shape(), &[0, 3, 32, 32]));
        }
        Ok(())
    }

    /// Evaluation-mode pass: `(logits (N, classes), features (N, feature_dim))`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut h = Relu::forward(&self.stem.forward(x)?);
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let features = global_avg_pool(&h)?;
        let logits = self.fc.forward(&features)?;
        Ok((logits, features))
    }

    /// Train-mode pass (batch statistics, caches kept for `backward`).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let h = self.stem.forward_train(x)?;
        let mut h = self.stem_relu.forward_train(&h);
        for b in &mut self.blocks {
            h = b.forward_train(&h)?;
        }
        let features = self.pool.forward_train(&h)?;
        let logits = self.fc.forward_train(&features)?;
        Ok((logits, features))
    }

    /// Back-propagates a logit gradient, accumulating parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let g = self.fc.backward(grad_logits)?;
        let mut g = self.pool.backward(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem.bn.backward(&g)?;
        self.stem.conv.backward_weights(&g)
    }

    fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut v = vec![&self.stem];
        for b in &self.blocks {
            v.extend(b.conv_bns());
        }
        v
    }

    fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        collect_conv_bns_mut(&mut self.stem, &mut self.blocks)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for cb in self.conv_bns() {
            v.extend([&cb.conv.weight, &cb.bn.gamma, &cb.bn.beta]);
        }
        v.extend([&self.fc.weight, &self.fc.bias]);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for cb in collect_conv_bns_mut(&mut self.stem, &mut self.blocks) {
            v.extend([&mut cb.conv.weight, &mut cb.bn.gamma, &mut cb.bn.beta]);
        }
        v.extend([&mut self.fc.weight, &mut self.fc.bias]);
        v
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Parameters followed by batch-norm running statistics, with config metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ckpt = Checkpoint::new()
            .with_meta("kind", "resnet")
            .with_meta("depth", c.depth)
            .with_meta("widths", format!("{},{},{}", c.widths[0], c.widths[1], c.widths[2]))
            .with_meta("num_classes", c.num_classes)
            .with_meta("feature_dim", c.feature_dim);
        for p in self.parameters() {
            ckpt.push(p.id.clone(), p.value.clone());
        }
        for cb in self.conv_bns() {
            for (id, t) in cb.bn.buffers() {
                ckpt.push(id, t);
            }
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let widths: Vec<usize> = ckpt
            .meta_value::<String>("widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| Error::Format(format!("bad width `{w}`"))))
            .collect::<Result<_>>()?;
        let widths: [usize; 3] = widths.try_into().map_err(|_| Error::Format("expected three stage widths".into()))?;
        let config = ResidualNetConfig {
            depth: ckpt.meta_value("depth")?,
            widths,
            num_classes: ckpt.meta_value("num_classes")?,
            feature_dim: ckpt.meta_value("feature_dim")?,
        };
        let mut net = ResNet::new(&config, 0)?;
        for p in net.parameters_mut() {
            let t = ckpt.require(&p.id)?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint", t.shape(), p.value.shape()));
            }
            p.value = t.clone();
        }
        for cb in net.conv_bns_mut() {
            let [(mean_id, _), (var_id, _)] = cb.bn.buffers();
            let mean = ckpt.require(&mean_id)?.data().to_vec();
            let var = ckpt.require(&var_id)?.data().to_vec();
            if mean.len() != cb.bn.stats.mean.len() || var.len() != cb.bn.stats.var.len() {
                return Err(Error::Format(format!("running stats `{mean_id}` have wrong length")));
            }
            cb.bn.stats.mean = mean;
            cb.bn.stats.var = var;
        }
        Ok(net)
    }
}

fn collect_conv_bns_mut<'a>(stem: &'a mut ConvBn, blocks: &'a mut [BasicBlock]) -> Vec<&'a mut ConvBn> {
    let mut v = vec![stem];
    for b in blocks {
        v.extend(b.conv_bns_mut());
    }
    v
}
