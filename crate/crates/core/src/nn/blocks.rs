//! Residual and dense blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AvgPool2d, BatchNorm2d, Conv2d, Mode, Relu};
use super::param::visit_children;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// 1×1 → 3×3 → 1×1 with a 4× expansion instead of two 3×3 convs.
    pub bottleneck: bool,
}

impl ResidualBlockConfig {
    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Debug, Clone)]
struct Projection {
    conv: Conv2d,
    bn: BatchNorm2d,
}
visit_children!(Projection { conv, bn });

/// `relu(F(x) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub config: ResidualBlockConfig,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
    relus: Vec<Relu>,
    shortcut: Option<Projection>,
    out_relu: Relu,
}
visit_children!(ResidualBlock { shortcut }, lists { convs, bns });

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(config: ResidualBlockConfig, rng: &mut R) -> Self {
        let ResidualBlockConfig { in_channels: cin, out_channels: cout, stride, bottleneck } = config;
        let convs = if bottleneck {
            assert!(cout % 4 == 0, "bottleneck output channels must be divisible by 4");
            let mid = cout / 4;
            vec![
                Conv2d::new(cin, mid, 1, 1, 0, rng),
                Conv2d::new(mid, mid, 3, stride, 1, rng),
                Conv2d::new(mid, cout, 1, 1, 0, rng),
            ]
        } else {
            vec![Conv2d::new(cin, cout, 3, stride, 1, rng), Conv2d::new(cout, cout, 3, 1, 1, rng)]
        };
        let bns = convs.iter().map(|c| BatchNorm2d::new(c.out_channels)).collect();
        let relus = (0..convs.len() - 1).map(|_| Relu::default()).collect();
        let shortcut = config
            .has_projection()
            .then(|| Projection { conv: Conv2d::new(cin, cout, 1, stride, 0, rng), bn: BatchNorm2d::new(cout) });
        Self { config, convs, bns, relus, shortcut, out_relu: Relu::default() }
    }

    /// Mutable access to the residual branch, for tests that pin parameters.
    pub fn branch_mut(&mut self) -> (&mut [Conv2d], &mut [BatchNorm2d]) {
        (&mut self.convs, &mut self.bns)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        if x.c != self.config.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "residual block expects {} channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for i in 0..=last {
            h = self.convs[i].forward(&h, mode)?;
            h = self.bns[i].forward(&h, mode);
            if i < last {
                h = self.relus[i].forward(&h, mode);
            }
        }
        let skip = match &mut self.shortcut {
            Some(p) => {
                let s = p.conv.forward(x, mode)?;
                p.bn.forward(&s, mode)
            }
            None => x.clone(),
        };
        h.add_assign(&skip);
        Ok(self.out_relu.forward(&h, mode))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.out_relu.backward(dy);
        let last = self.convs.len() - 1;
        let mut g = d.clone();
        for i in (0..=last).rev() {
            if i < last {
                g = self.relus[i].backward(&g);
            }
            g = self.bns[i].backward(&g);
            g = self.convs[i].backward(&g);
        }
        let skip = match &mut self.shortcut {
            Some(p) => {
                let s = p.bn.backward(&d);
                p.conv.backward(&s)
            }
            None => d,
        };
        g.add_assign(&skip);
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub in_channels: usize,
    /// Bottleneck width multiplier: each layer's 1×1 conv emits `bn_size·growth_rate` channels.
    pub bn_size: usize,
}

impl DenseBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth_rate
    }
}

/// BN-ReLU-Conv1×1-BN-ReLU-Conv3×3, emitting `growth_rate` new channels.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    norm1: BatchNorm2d,
    relu1: Relu,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    relu2: Relu,
    conv2: Conv2d,
}
visit_children!(DenseLayer { norm1, conv1, norm2, conv2 });

impl DenseLayer {
    fn new<R: Rng + ?Sized>(in_channels: usize, growth_rate: usize, bn_size: usize, rng: &mut R) -> Self {
        let width = bn_size * growth_rate;
        Self {
            norm1: BatchNorm2d::new(in_channels),
            relu1: Relu::default(),
            conv1: Conv2d::new(in_channels, width, 1, 1, 0, rng),
            norm2: BatchNorm2d::new(width),
            relu2: Relu::default(),
            conv2: Conv2d::new(width, growth_rate, 3, 1, 1, rng),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let h = self.norm1.forward(x, mode);
        let h = self.relu1.forward(&h, mode);
        let h = self.conv1.forward(&h, mode)?;
        let h = self.norm2.forward(&h, mode);
        let h = self.relu2.forward(&h, mode);
        self.conv2.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.conv2.backward(dy);
        let g = self.relu2.backward(&g);
        let g = self.norm2.backward(&g);
        let g = self.conv1.backward(&g);
        let g = self.relu1.backward(&g);
        self.norm1.backward(&g)
    }
}

/// Each layer sees the concatenation of the block input and every earlier
/// layer's output; the block returns the full concatenation.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub config: DenseBlockConfig,
    layers: Vec<DenseLayer>,
}
visit_children!(DenseBlock {}, lists { layers });

impl DenseBlock {
    pub fn new<R: Rng + ?Sized>(config: DenseBlockConfig, rng: &mut R) -> Self {
        let layers = (0..config.num_layers)
            .map(|l| DenseLayer::new(config.in_channels + l * config.growth_rate, config.growth_rate, config.bn_size, rng))
            .collect();
        Self { config, layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        if x.c != self.config.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "dense block expects {} channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let mut features = x.clone();
        for layer in &mut self.layers {
            let new = layer.forward(&features, mode)?;
            features = features.concat_channels(&new);
        }
        Ok(features)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cin = self.config.in_channels;
        let k = self.config.growth_rate;
        let mut g = dy.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let at = cin + l * k;
            let d_new = g.slice_channels(at, at + k);
            let d_in = layer.backward(&d_new);
            g.add_into_channels(0, &d_in);
        }
        g.slice_channels(0, cin)
    }
}

/// BN-ReLU-Conv1×1 (channel compression) followed by 2×2 average pooling.
#[derive(Debug, Clone)]
pub struct Transition {
    norm: BatchNorm2d,
    relu: Relu,
    conv: Conv2d,
    pool: AvgPool2d,
}
visit_children!(Transition { norm, conv });

impl Transition {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            norm: BatchNorm2d::new(in_channels),
            relu: Relu::default(),
            conv: Conv2d::new(in_channels, out_channels, 1, 1, 0, rng),
            pool: AvgPool2d::new(2),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let h = self.norm.forward(x, mode);
        let h = self.relu.forward(&h, mode);
        let h = self.conv.forward(&h, mode)?;
        self.pool.forward(&h, mode)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.pool.backward(dy);
        let g = self.conv.backward(&g);
        let g = self.relu.backward(&g);
        self.norm.backward(&g)
    }
}
