//! Run configuration: one TOML file with sections, plus `key=value`
//! overrides addressed by dotted path (`train.lr=0.01`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::MaskParams;
use crate::backbone::{BackboneConfig, ModelConfig};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evaluation::{EvalMode, FusionOptions, Normalization};
use crate::losses::{AlignParams, LossWeights, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    /// Share of same-identity pairs per batch.
    pub positive_fraction: f64,
    /// Random horizontal flips during training.
    pub hflip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Backbone preset: `tiny`, `small` or `resnet18`.
    pub backbone: String,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch (0-based) from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    /// Optimizer steps per epoch; 0 means `ceil(train images / batch_size)`.
    pub steps_per_epoch: usize,
    /// Also checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub sa_alpha: f64,
    pub enable_ia: bool,
    pub enable_sa: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub mask_sharpness: f64,
    pub mask_threshold: f64,
    pub trim_threshold: f64,
    /// Aligned profile length; 0 means the feature-map height.
    pub align_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub feature_weight: f64,
    pub attention_weight: f64,
    pub normalization: Normalization,
    /// Keep only the first N gallery images (0: all).
    pub max_gallery: usize,
    pub max_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub attention: AttentionConfig,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    /// Full-scale defaults: 288x144 inputs, SGD (momentum 0.9, lr 0.03,
    /// 40 epochs, x0.1 from epoch 30), batch 16, loss weights 0.5 / 0.05,
    /// spatial weight 0.2.
    fn default() -> Self {
        let w = LossWeights::default();
        let m = MaskParams::default();
        Self {
            seed: 7,
            data: DataConfig {
                root: PathBuf::from("data/market1501"),
                height: 288,
                width: 144,
                positive_fraction: 0.5,
                hflip: false,
            },
            model: ModelSection {
                backbone: "small".into(),
                head_hidden: 256,
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 16,
                lr: 0.03,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_decay_epoch: 30,
                lr_decay_factor: 0.1,
                steps_per_epoch: 0,
                checkpoint_every: 0,
                output_dir: PathBuf::from("runs/default"),
            },
            loss: LossConfig {
                lambda1: w.lambda1,
                lambda2: w.lambda2,
                sa_alpha: w.sa_alpha,
                enable_ia: true,
                enable_sa: true,
            },
            attention: AttentionConfig {
                mask_sharpness: m.sharpness,
                mask_threshold: m.threshold,
                trim_threshold: 0.3,
                align_length: 0,
            },
            eval: EvalConfig {
                mode: EvalMode::FeatureOnly,
                feature_weight: 1.0,
                attention_weight: 1.0,
                normalization: Normalization::MinMax,
                max_gallery: 0,
                max_rank: 20,
            },
            generate: GenerateConfig {
                identities: 8,
                images_per_identity: 6,
                cameras: 3,
                seed: 7,
            },
        }
    }
}

impl RunConfig {
    /// Desk-scale settings for the generated dataset: 64x32 images and the
    /// `tiny` backbone; optimisation schedule and loss weights unchanged.
    pub fn synthetic(root: impl Into<PathBuf>) -> Self {
        let mut c = Self::default();
        c.data.root = root.into();
        c.data.height = 64;
        c.data.width = 32;
        c.model.backbone = "tiny".into();
        c.model.head_hidden = 32;
        c.train.output_dir = PathBuf::from("runs/synthetic");
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Parse `text` (or start from defaults), apply overrides, validate.
    pub fn from_parts(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::try_from(Self::default()).expect("config always serialises"),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let c: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_parts(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.height == 0 || d.width == 0 {
            return fail("data.height and data.width must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.positive_fraction) {
            return fail(format!("data.positive_fraction must lie in [0, 1], got {}", d.positive_fraction));
        }
        let backbone = self.backbone()?;
        let stride = backbone.total_stride();
        if d.height < stride || d.width < stride {
            return fail(format!(
                "{}x{} images are smaller than the backbone stride {stride}",
                d.height, d.width
            ));
        }
        if self.model.head_hidden == 0 {
            return fail("model.head_hidden must be positive".into());
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return fail("train.epochs and train.batch_size must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return fail(format!("train.momentum must lie in [0, 1), got {}", t.momentum));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return fail(format!("train.weight_decay must be >= 0, got {}", t.weight_decay));
        }
        if !(t.lr_decay_factor > 0.0 && t.lr_decay_factor <= 1.0) {
            return fail(format!("train.lr_decay_factor must lie in (0, 1], got {}", t.lr_decay_factor));
        }
        self.weights().validate()?;
        self.mask()?;
        let a = &self.attention;
        if !(a.trim_threshold > 0.0 && a.trim_threshold < 1.0) {
            return fail(format!("attention.trim_threshold must lie in (0, 1), got {}", a.trim_threshold));
        }
        let e = &self.eval;
        for (name, v) in [("eval.feature_weight", e.feature_weight), ("eval.attention_weight", e.attention_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        if e.max_rank == 0 {
            return fail("eval.max_rank must be positive".into());
        }
        let g = &self.generate;
        if g.identities < 2 || g.images_per_identity < 3 || g.cameras < 2 {
            return fail("generate needs >= 2 identities, >= 3 images per identity and >= 2 cameras".into());
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        BackboneConfig::preset(&self.model.backbone)
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone()?,
            head_hidden: self.model.head_hidden,
            num_classes,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            sa_alpha: self.loss.sa_alpha,
        }
    }

    pub fn mask(&self) -> Result<MaskParams> {
        MaskParams::new(self.attention.mask_sharpness, self.attention.mask_threshold)
    }

    pub fn align_length(&self) -> Option<usize> {
        (self.attention.align_length > 0).then_some(self.attention.align_length)
    }

    pub fn objective(&self) -> Result<Objective> {
        Ok(Objective {
            weights: self.weights(),
            mask: self.mask()?,
            align: AlignParams {
                trim_threshold: self.attention.trim_threshold,
                length: self.align_length(),
            },
            enable_ia: self.loss.enable_ia,
            enable_sa: self.loss.enable_sa,
        })
    }

    pub fn fusion(&self) -> FusionOptions {
        FusionOptions {
            feature_weight: self.eval.feature_weight,
            attention_weight: self.eval.attention_weight,
            normalization: self.eval.normalization,
            trim_threshold: self.attention.trim_threshold,
            align_length: self.align_length(),
            ..FusionOptions::default()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            identities: self.generate.identities,
            images_per_identity: self.generate.images_per_identity,
            height: self.data.height,
            width: self.data.width,
            cameras: self.generate.cameras,
            seed: self.generate.seed,
        }
    }
}

/// Set `section.key=value` in a parsed config. The value is read as a TOML
/// literal when possible, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let defaults = toml::Table::try_from(RunConfig::default()).expect("config always serialises");
    let path: Vec<&str> = key.split('.').collect();
    let mut known = &defaults;
    let mut target = table;
    for (i, part) in path.iter().enumerate() {
        let unknown = || Error::Config(format!("unknown config key {key:?}"));
        let reference = known.get(*part).ok_or_else(unknown)?;
        if i + 1 == path.len() {
            if reference.is_table() {
                return Err(Error::Config(format!("{key:?} is a section, not a value")));
            }
            // integers are accepted where floats are expected
            let value = match (reference, value) {
                (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            target.insert(part.to_string(), value);
            return Ok(());
        }
        known = reference.as_table().ok_or_else(unknown)?;
        target = target
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part:?} in {key:?} is not a section")))?;
    }
    Err(Error::Config(format!("empty config key in {assignment:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.data.height, c.data.width), (288, 144));
        assert_eq!((c.train.momentum, c.train.lr, c.train.epochs), (0.9, 0.03, 40));
        assert_eq!((c.train.lr_decay_epoch, c.train.lr_decay_factor), (30, 0.1));
        assert_eq!(c.train.batch_size, 16);
        assert_eq!((c.loss.lambda1, c.loss.lambda2, c.loss.sa_alpha), (0.5, 0.05, 0.2));
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_is_byte_identical() {
        for c in [RunConfig::default(), RunConfig::synthetic("x/y")] {
            let a = c.to_toml();
            let b = RunConfig::from_toml(&a).unwrap().to_toml();
            assert_eq!(a, b);
            assert_eq!(RunConfig::from_toml(&a).unwrap(), c);
        }
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let c = RunConfig::from_parts(
            None,
            &[
                "train.lr=0.01".into(),
                "loss.enable_ia=false".into(),
                "model.backbone=tiny".into(),
                "data.root=/tmp/some where".into(),
                "seed=3".into(),
                "loss.lambda2=1".into(),
                "eval.mode=fused".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert!(!c.loss.enable_ia);
        assert_eq!(c.model.backbone, "tiny");
        assert_eq!(c.data.root, PathBuf::from("/tmp/some where"));
        assert_eq!(c.seed, 3);
        assert_eq!(c.loss.lambda2, 1.0);
        assert_eq!(c.eval.mode, EvalMode::Fused);
    }

    #[test]
    fn bad_overrides_and_values_are_rejected() {
        for o in ["train.lrr=1", "train=1", "nokey", "loss.lambda1=-1", "model.backbone=vgg", "train.momentum=1.0"] {
            assert!(matches!(RunConfig::from_parts(None, &[o.into()]), Err(Error::Config(_))), "{o}");
        }
    }

    #[test]
    fn unknown_fields_in_file_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }
}
