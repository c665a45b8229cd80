//! Feature extractor and the two classifier heads.
//!
//! The extractor is a residual CNN whose last stage output is the feature
//! map stack `A` (`[N, K, h, w]`); the feature vector `f` is its global
//! average pool. Both Siamese branches run through the same extractor.

use casn_grad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{child, BatchNorm2d, Conv2d, Linear, ModeFlag, Module, Slot};

/// One or more normalised images, laid out `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::Shape(format!(
                "images must be a non-empty [N, C, H, W] tensor, got {s:?}"
            )));
        }
        if !t.value().all_finite() {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }
}

/// Last-stage maps `A` (`[N, K, h, w]`) and their pooled vector `f` (`[N, K]`).
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub maps: Tensor,
    pub vector: Tensor,
}

impl FeatureBundle {
    /// Pool maps into the feature vector (global average pooling).
    pub fn from_maps(maps: Tensor) -> Self {
        let (n, k) = (maps.shape()[0], maps.shape()[1]);
        let vector = maps.mean_axes(&[2, 3]).reshape(&[n, k]);
        Self { maps, vector }
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `start..start + len`. The vector is re-pooled from the narrowed
    /// maps so that it stays a function of them in the graph (same values).
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        Self::from_maps(self.maps.narrow(0, start, len))
    }
}

/// Identity scores `y`, `[N, C]`.
#[derive(Clone, Debug)]
pub struct IdentityLogits(pub Tensor);

/// Pair scores `z`, `[P, 2]`: column 0 different identity, column 1 same.
#[derive(Clone, Debug)]
pub struct PairLogits(pub Tensor);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub blocks_per_stage: usize,
}

impl BackboneConfig {
    /// Named presets:
    /// - `tiny`: four stages of at most 16 channels, total stride 8. Used
    ///   for gradient checks and desk-scale synthetic runs.
    /// - `small`: 32..256 channels, total stride 32 (288x144 -> 9x5 maps).
    /// - `resnet18`: 64..512 channels, two blocks per stage, stride 32.
    pub fn preset(name: &str) -> Result<Self> {
        let stages = |v: &[(usize, usize)]| {
            v.iter()
                .map(|&(channels, stride)| StageSpec { channels, stride })
                .collect()
        };
        Ok(match name {
            "tiny" => Self {
                in_channels: 3,
                stem_channels: 8,
                stem_stride: 2,
                stages: stages(&[(8, 1), (12, 2), (16, 2), (16, 1)]),
                blocks_per_stage: 1,
            },
            "small" => Self {
                in_channels: 3,
                stem_channels: 16,
                stem_stride: 2,
                stages: stages(&[(32, 2), (64, 2), (128, 2), (256, 2)]),
                blocks_per_stage: 1,
            },
            "resnet18" => Self {
                in_channels: 3,
                stem_channels: 64,
                stem_stride: 2,
                stages: stages(&[(64, 2), (128, 2), (256, 2), (512, 2)]),
                blocks_per_stage: 2,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown backbone preset {other:?} (expected tiny, small or resnet18)"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("backbone widths and depth must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stem_stride == 0 || self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config("stage channels and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stem_stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Feature vector dimension `D` (equal to `K`).
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    /// Spatial size of `A` for an input of `height x width`.
    pub fn feature_hw(&self, height: usize, width: usize) -> (usize, usize) {
        let down = |x: usize, s: usize| (x - 1) / s + 1;
        let mut hw = (down(height, self.stem_stride), down(width, self.stem_stride));
        for s in &self.stages {
            hw = (down(hw.0, s.stride), down(hw.1, s.stride));
        }
        hw
    }
}

struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1)
            .then(|| (Conv2d::new(rng, cin, cout, 1, stride), BatchNorm2d::new(cout)));
        Self {
            conv1: Conv2d::new(rng, cin, cout, 3, stride),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(rng, cout, cout, 3, 1),
            bn2: BatchNorm2d::new(cout),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let h = self.bn1.forward(&self.conv1.forward(x), training).relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), training);
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x), training),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

impl Module for ResidualBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit(&child(prefix, "conv1"), f);
        self.bn1.visit(&child(prefix, "bn1"), f);
        self.conv2.visit(&child(prefix, "conv2"), f);
        self.bn2.visit(&child(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit(&child(prefix, "shortcut.conv"), f);
            bn.visit(&child(prefix, "shortcut.bn"), f);
        }
    }
}

pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(rng, config.in_channels, config.stem_channels, 3, config.stem_stride);
        let mut blocks = Vec::new();
        let mut cin = config.stem_channels;
        for stage in &config.stages {
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { stage.stride } else { 1 };
                blocks.push(ResidualBlock::new(rng, cin, stage.channels, stride));
                cin = stage.channels;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn: BatchNorm2d::new(config.stem_channels),
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Last-stage feature maps `A`.
    pub fn forward_maps(&self, x: &Tensor, training: bool) -> Tensor {
        let mut h = self.stem_bn.forward(&self.stem.forward(x), training).relu();
        for block in &self.blocks {
            h = block.forward(&h, training);
        }
        h
    }
}

impl Module for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.stem.visit(&child(prefix, "stem.conv"), f);
        self.stem_bn.visit(&child(prefix, "stem.bn"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&child(prefix, &format!("block{i}")), f);
        }
    }
}

/// Two fully connected layers with a ReLU between them.
pub struct Classifier {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Classifier {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(rng, input, hidden, 2.0),
            fc2: Linear::new(rng, hidden, output, 1.0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::Shape(format!(
                "classifier expects [N, {}] input, got {s:?}",
                self.input_dim()
            )));
        }
        Ok(self.fc2.forward(&self.fc1.forward(x).relu()))
    }
}

impl Module for Classifier {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.fc1.visit(&child(prefix, "fc1"), f);
        self.fc2.visit(&child(prefix, "fc2"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub num_classes: usize,
}

/// Shared extractor plus the identity (IDE) and pair (BCE) heads.
pub struct CasnModel {
    config: ModelConfig,
    pub backbone: Backbone,
    pub ide_head: Classifier,
    pub bce_head: Classifier,
    mode: ModeFlag,
}

impl CasnModel {
    /// Seeded random initialisation; starts in training mode.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0 || config.head_hidden == 0 {
            return Err(Error::Config("num_classes and head_hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone, &mut rng)?;
        let d = config.backbone.feature_dim();
        let ide_head = Classifier::new(&mut rng, d, config.head_hidden, config.num_classes);
        let bce_head = Classifier::new(&mut rng, d, config.head_hidden, 2);
        let mode = ModeFlag::default();
        mode.set(true);
        Ok(Self {
            config: config.clone(),
            backbone,
            ide_head,
            bce_head,
            mode,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn is_training(&self) -> bool {
        self.mode.training()
    }

    pub fn set_training(&self, training: bool) {
        self.mode.set(training);
    }

    pub fn extract_features(&self, images: &ImageTensor) -> Result<FeatureBundle> {
        let expected = self.config.backbone.in_channels;
        if images.channels() != expected {
            return Err(Error::Shape(format!(
                "backbone expects {expected} input channels, got {}",
                images.channels()
            )));
        }
        let maps = self.backbone.forward_maps(images.tensor(), self.is_training());
        Ok(FeatureBundle::from_maps(maps))
    }

    pub fn ide_head(&self, f: &Tensor) -> Result<IdentityLogits> {
        self.ide_head.forward(f).map(IdentityLogits)
    }

    pub fn bce_head(&self, f_diff: &Tensor) -> Result<PairLogits> {
        self.bce_head.forward(f_diff).map(PairLogits)
    }

    /// `(name, tensor)` for every trainable parameter, in a fixed order.
    pub fn named_parameters(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, slot| {
            if let Slot::Param(t) = slot {
                out.push((name.to_string(), t.clone()));
            }
        });
        out
    }
}

impl Module for CasnModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.backbone.visit(&child(prefix, "backbone"), f);
        self.ide_head.visit(&child(prefix, "ide_head"), f);
        self.bce_head.visit(&child(prefix, "bce_head"), f);
    }
}
