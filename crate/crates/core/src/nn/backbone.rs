//! DenseNet-style and ResNet-style backbones with a linear classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{DenseBlock, DenseBlockConfig, ResidualBlock, ResidualBlockConfig, Transition};
use super::layers::{BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Mode, Relu};
use super::param::{visit_children, Param, TensorKind, Visit};
use super::tensor::{Matrix, Tensor};
use super::NnError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pool after the stem conv.
    pub max_pool: bool,
}

impl StemConfig {
    /// 7×7/2 conv, 3×3/2 max pool.
    pub fn imagenet(out_channels: usize) -> Self {
        Self { out_channels, kernel: 7, stride: 2, max_pool: true }
    }

    /// 3×3/2 conv, no pooling; for small inputs.
    pub fn small(out_channels: usize) -> Self {
        Self { out_channels, kernel: 3, stride: 2, max_pool: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseNetConfig {
    pub stem: StemConfig,
    pub stage_sizes: Vec<usize>,
    pub growth_rate: usize,
    pub bn_size: usize,
    pub num_classes: usize,
}

impl DenseNetConfig {
    /// The 121-layer layout: blocks (6, 12, 24, 16), growth 32, 1024 features.
    pub fn densenet121(num_classes: usize) -> Self {
        Self {
            stem: StemConfig::imagenet(64),
            stage_sizes: vec![6, 12, 24, 16],
            growth_rate: 32,
            bn_size: 4,
            num_classes,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self { stem: StemConfig::small(8), stage_sizes: vec![1, 1], growth_rate: 8, bn_size: 2, num_classes }
    }

    /// Channel count after the stem and after each block / transition.
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut c = self.stem.out_channels;
        let mut trace = vec![c];
        for (i, &n) in self.stage_sizes.iter().enumerate() {
            c += n * self.growth_rate;
            trace.push(c);
            if i + 1 < self.stage_sizes.len() {
                c /= 2;
                trace.push(c);
            }
        }
        trace
    }

    pub fn feature_dim(&self) -> usize {
        *self.channel_trace().last().expect("trace is never empty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    pub stem: StemConfig,
    pub stage_sizes: Vec<usize>,
    /// Output channels of each stage.
    pub stage_channels: Vec<usize>,
    pub bottleneck: bool,
    pub num_classes: usize,
}

impl ResNetConfig {
    /// The 50-layer layout: bottleneck stages (3, 4, 6, 3), 2048 features.
    pub fn resnet50(num_classes: usize) -> Self {
        Self {
            stem: StemConfig::imagenet(64),
            stage_sizes: vec![3, 4, 6, 3],
            stage_channels: vec![256, 512, 1024, 2048],
            bottleneck: true,
            num_classes,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            stem: StemConfig::small(8),
            stage_sizes: vec![1, 1],
            stage_channels: vec![8, 16],
            bottleneck: false,
            num_classes,
        }
    }

    pub fn block_configs(&self) -> Vec<ResidualBlockConfig> {
        let mut cin = self.stem.out_channels;
        let mut out = Vec::new();
        for (stage, (&n, &cout)) in self.stage_sizes.iter().zip(&self.stage_channels).enumerate() {
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                out.push(ResidualBlockConfig { in_channels: cin, out_channels: cout, stride, bottleneck: self.bottleneck });
                cin = cout;
            }
        }
        out
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.stem.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    Densenet(DenseNetConfig),
    Resnet(ResNetConfig),
}

impl BackboneConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            BackboneConfig::Densenet(c) => c.num_classes,
            BackboneConfig::Resnet(c) => c.num_classes,
        }
    }

    /// Declared width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneConfig::Densenet(c) => c.feature_dim(),
            BackboneConfig::Resnet(c) => c.feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        let (stem, sizes) = match self {
            BackboneConfig::Densenet(c) => {
                if c.growth_rate == 0 || c.bn_size == 0 {
                    return bad("growth_rate and bn_size must be positive".into());
                }
                (&c.stem, &c.stage_sizes)
            }
            BackboneConfig::Resnet(c) => {
                if c.stage_channels.len() != c.stage_sizes.len() {
                    return bad("stage_channels and stage_sizes differ in length".into());
                }
                if c.bottleneck && c.stage_channels.iter().any(|ch| ch % 4 != 0) {
                    return bad("bottleneck stage channels must be divisible by 4".into());
                }
                (&c.stem, &c.stage_sizes)
            }
        };
        if sizes.is_empty() || sizes.contains(&0) {
            return bad(format!("stage sizes must be positive, got {sizes:?}"));
        }
        if stem.out_channels == 0 || stem.kernel == 0 || stem.stride == 0 {
            return bad("stem dimensions must be positive".into());
        }
        if self.num_classes() < 2 {
            return bad("need at least 2 classes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
    pool: Option<MaxPool2d>,
}
visit_children!(Stem { conv, bn });

impl Stem {
    fn new<R: Rng + ?Sized>(cfg: &StemConfig, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(3, cfg.out_channels, cfg.kernel, cfg.stride, cfg.kernel / 2, rng),
            bn: BatchNorm2d::new(cfg.out_channels),
            relu: Relu::default(),
            pool: cfg.max_pool.then(|| MaxPool2d::new(3, 2, 1)),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let h = self.conv.forward(x, mode)?;
        let h = self.bn.forward(&h, mode);
        let h = self.relu.forward(&h, mode);
        match &mut self.pool {
            Some(p) => p.forward(&h, mode),
            None => Ok(h),
        }
    }

    fn backward(&mut self, dy: &Tensor) {
        let g = match &mut self.pool {
            Some(p) => p.backward(dy),
            None => dy.clone(),
        };
        let g = self.relu.backward(&g);
        let g = self.bn.backward(&g);
        self.conv.backward(&g);
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    pub config: DenseNetConfig,
    stem: Stem,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    norm: BatchNorm2d,
    relu: Relu,
    pool: GlobalAvgPool,
    classifier: Linear,
}
visit_children!(DenseNet { stem, norm, classifier }, lists { blocks, transitions });

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(config: DenseNetConfig, rng: &mut R) -> Self {
        let stem = Stem::new(&config.stem, rng);
        let mut c = config.stem.out_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in config.stage_sizes.iter().enumerate() {
            let cfg = DenseBlockConfig { num_layers: n, growth_rate: config.growth_rate, in_channels: c, bn_size: config.bn_size };
            blocks.push(DenseBlock::new(cfg, rng));
            c = cfg.out_channels();
            if i + 1 < config.stage_sizes.len() {
                transitions.push(Transition::new(c, c / 2, rng));
                c /= 2;
            }
        }
        Self {
            stem,
            blocks,
            transitions,
            norm: BatchNorm2d::new(c),
            relu: Relu::default(),
            pool: GlobalAvgPool::default(),
            classifier: Linear::new(c, config.num_classes, rng),
            config,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Matrix, Matrix), NnError> {
        let mut h = self.stem.forward(x, mode)?;
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward(&h, mode)?;
            if let Some(t) = self.transitions.get_mut(i) {
                h = t.forward(&h, mode)?;
            }
        }
        let h = self.norm.forward(&h, mode);
        let h = self.relu.forward(&h, mode);
        let features = self.pool.forward(&h, mode);
        let logits = self.classifier.forward(&features, mode);
        Ok((logits, features))
    }

    fn backward(&mut self, dlogits: &Matrix) {
        let g = self.classifier.backward(dlogits);
        let g = self.pool.backward(&g);
        let g = self.relu.backward(&g);
        let mut g = self.norm.backward(&g);
        for i in (0..self.blocks.len()).rev() {
            if let Some(t) = self.transitions.get_mut(i) {
                g = t.backward(&g);
            }
            g = self.blocks[i].backward(&g);
        }
        self.stem.backward(&g);
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    pub config: ResNetConfig,
    stem: Stem,
    blocks: Vec<ResidualBlock>,
    pool: GlobalAvgPool,
    classifier: Linear,
}
visit_children!(ResNet { stem, classifier }, lists { blocks });

impl ResNet {
    pub fn new<R: Rng + ?Sized>(config: ResNetConfig, rng: &mut R) -> Self {
        let stem = Stem::new(&config.stem, rng);
        let blocks = config.block_configs().into_iter().map(|c| ResidualBlock::new(c, rng)).collect();
        let classifier = Linear::new(config.feature_dim(), config.num_classes, rng);
        Self { config, stem, blocks, pool: GlobalAvgPool::default(), classifier }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Matrix, Matrix), NnError> {
        let mut h = self.stem.forward(x, mode)?;
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        let features = self.pool.forward(&h, mode);
        let logits = self.classifier.forward(&features, mode);
        Ok((logits, features))
    }

    fn backward(&mut self, dlogits: &Matrix) {
        let g = self.classifier.backward(dlogits);
        let mut g = self.pool.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward(&g);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub logits: Matrix,
    pub features: Matrix,
}

#[derive(Debug, Clone)]
pub enum Backbone {
    DenseNet(DenseNet),
    ResNet(ResNet),
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        Ok(match config {
            BackboneConfig::Densenet(c) => Backbone::DenseNet(DenseNet::new(c, rng)),
            BackboneConfig::Resnet(c) => Backbone::ResNet(ResNet::new(c, rng)),
        })
    }

    pub fn config(&self) -> BackboneConfig {
        match self {
            Backbone::DenseNet(n) => BackboneConfig::Densenet(n.config.clone()),
            Backbone::ResNet(n) => BackboneConfig::Resnet(n.config.clone()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config().num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.config().feature_dim()
    }

    /// `x` is B×3×H×W. Features are the globally pooled final map.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<BackboneOutput, NnError> {
        if x.c != 3 {
            return Err(NnError::ShapeMismatch(format!("backbone expects 3 input channels, got {}", x.c)));
        }
        let (logits, features) = match self {
            Backbone::DenseNet(n) => n.forward(x, mode)?,
            Backbone::ResNet(n) => n.forward(x, mode)?,
        };
        Ok(BackboneOutput { logits, features })
    }

    /// Accumulates parameter gradients for `dL/dlogits`.
    pub fn backward(&mut self, dlogits: &Matrix) {
        match self {
            Backbone::DenseNet(n) => n.backward(dlogits),
            Backbone::ResNet(n) => n.backward(dlogits),
        }
    }

    /// Classifier head (weight, bias), for tests that pin the output layer.
    pub fn classifier_mut(&mut self) -> &mut Linear {
        match self {
            Backbone::DenseNet(n) => &mut n.classifier,
            Backbone::ResNet(n) => &mut n.classifier,
        }
    }

    /// Final batch norm of the DenseNet head; `None` for ResNets.
    pub fn final_norm_mut(&mut self) -> Option<&mut BatchNorm2d> {
        match self {
            Backbone::DenseNet(n) => Some(&mut n.norm),
            Backbone::ResNet(_) => None,
        }
    }
}

impl Visit for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[f64])) {
        match self {
            Backbone::DenseNet(n) => n.visit(prefix, f),
            Backbone::ResNet(n) => n.visit(prefix, f),
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Backbone::DenseNet(n) => n.visit_params_mut(prefix, f),
            Backbone::ResNet(n) => n.visit_params_mut(prefix, f),
        }
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        match self {
            Backbone::DenseNet(n) => n.visit_buffers_mut(prefix, f),
            Backbone::ResNet(n) => n.visit_buffers_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn densenet121_channel_trace() {
        let cfg = DenseNetConfig::densenet121(10);
        assert_eq!(cfg.channel_trace(), vec![64, 256, 128, 512, 256, 1024, 512, 1024]);
        assert_eq!(cfg.feature_dim(), 1024);
    }

    #[test]
    fn resnet50_blocks() {
        let cfg = ResNetConfig::resnet50(10);
        let blocks = cfg.block_configs();
        assert_eq!(blocks.len(), 16);
        assert_eq!(blocks.iter().filter(|b| b.has_projection()).count(), 4);
        assert_eq!(cfg.feature_dim(), 2048);
    }

    #[test]
    fn tiny_variants_are_small() {
        assert!(DenseNetConfig::tiny(10).feature_dim() <= 64);
        assert!(ResNetConfig::tiny(10).feature_dim() <= 64);
        assert_eq!(DenseNetConfig::tiny(10).stage_sizes, vec![1, 1]);
    }

    #[test]
    fn tiny_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(2, 3, 32, 32, (0..2 * 3 * 32 * 32).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect());
        for cfg in [BackboneConfig::Densenet(DenseNetConfig::tiny(5)), BackboneConfig::Resnet(ResNetConfig::tiny(5))] {
            let mut net = Backbone::new(cfg.clone(), &mut rng).unwrap();
            let out = net.forward(&x, Mode::Eval).unwrap();
            assert_eq!((out.logits.rows, out.logits.cols), (2, 5));
            assert_eq!((out.features.rows, out.features.cols), (2, cfg.feature_dim()));
        }
    }

    #[test]
    fn zero_final_map_gives_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Backbone::new(BackboneConfig::Densenet(DenseNetConfig::tiny(4)), &mut rng).unwrap();
        let norm = net.final_norm_mut().unwrap();
        norm.gamma.value.fill(0.0);
        norm.beta.value.fill(0.0);
        net.classifier_mut().bias.value = vec![0.1, -0.2, 0.3, 0.4];
        let x = Tensor::from_vec(2, 3, 16, 16, vec![0.7; 2 * 3 * 16 * 16]);
        let out = net.forward(&x, Mode::Eval).unwrap();
        assert!(out.features.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.logits.row(0), &[0.1, -0.2, 0.3, 0.4]);
        assert_eq!(out.logits.row(1), &[0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn rejects_wrong_input_channels_and_tiny_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Backbone::new(BackboneConfig::Resnet(ResNetConfig::tiny(3)), &mut rng).unwrap();
        assert!(net.forward(&Tensor::zeros(1, 1, 16, 16), Mode::Eval).is_err());
        let mut dn = Backbone::new(BackboneConfig::Densenet(DenseNetConfig::tiny(3)), &mut rng).unwrap();
        assert!(dn.forward(&Tensor::zeros(1, 3, 2, 2), Mode::Eval).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut c = ResNetConfig::tiny(3);
        c.stage_channels.pop();
        assert!(BackboneConfig::Resnet(c).validate().is_err());
        let mut d = DenseNetConfig::tiny(3);
        d.stage_sizes = vec![];
        assert!(BackboneConfig::Densenet(d).validate().is_err());
        assert!(BackboneConfig::Densenet(DenseNetConfig::tiny(1)).validate().is_err());
    }
}
