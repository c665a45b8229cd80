//! Scalar objectives and their weighted combination.
//!
//! `ide_loss` and `bce_loss` return batch sums. The combined objective
//! averages every term per image (identity terms) or per pair (pair terms)
//! before weighting, so the weights do not depend on batch size.

use casn_grad::{Array, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{
    aligned_profiles, identification_attention_from, siamese_attention_from_features, spatial_consistency,
    MaskParams, SiameseAttention,
};
use crate::backbone::{CasnModel, IdentityLogits, ImageTensor, PairLogits};
use crate::data::PairBatch;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the identification-attention loss.
    pub lambda1: f64,
    /// Weight on the Siamese attention loss.
    pub lambda2: f64,
    /// Weight of the spatial-consistency term inside the Siamese loss.
    pub sa_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.05,
            sa_alpha: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("sa_alpha", self.sa_alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Row-wise log-softmax of `[N, C]` logits.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let shift = logits.max_along(1).detach();
    let shifted = logits.sub(&shift);
    shifted.sub(&shifted.exp().sum_axes(&[1]).ln())
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let shifted = logits.sub(&logits.max_along(1).detach());
    let e = shifted.exp();
    e.div(&e.sum_axes(&[1]))
}

/// `-log softmax(logits)[label]` per row, `[N]`.
fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("{} labels for logits {s:?}", labels.len())));
    }
    let classes = s[1];
    let mut onehot = Array::zeros(s);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidLabel { label: c, bound: classes });
        }
        onehot.data_mut()[i * classes + c] = 1.0;
    }
    Ok(log_softmax(logits)
        .mul(&Tensor::constant(onehot))
        .sum_axes(&[1])
        .neg()
        .reshape(&[labels.len()]))
}

/// Per-image identity cross-entropy, `[N]`.
pub fn ide_loss_per_image(logits: &IdentityLogits, labels: &[usize]) -> Result<Tensor> {
    cross_entropy_rows(&logits.0, labels)
}

/// Multi-class cross-entropy summed over the batch.
pub fn ide_loss(logits: &IdentityLogits, labels: &[usize]) -> Result<Tensor> {
    Ok(ide_loss_per_image(logits, labels)?.sum_all())
}

/// Per-pair binary cross-entropy over the two pair logits, `[P]`.
pub fn bce_loss_per_pair(logits: &PairLogits, same: &[bool]) -> Result<Tensor> {
    if logits.0.shape().len() != 2 || logits.0.shape()[1] != 2 {
        return Err(Error::Shape(format!("pair logits must be [P, 2], got {:?}", logits.0.shape())));
    }
    let labels: Vec<usize> = same.iter().map(|&s| usize::from(s)).collect();
    cross_entropy_rows(&logits.0, &labels)
}

/// Binary cross-entropy summed over pairs.
pub fn bce_loss(logits: &PairLogits, same: &[bool]) -> Result<Tensor> {
    Ok(bce_loss_per_pair(logits, same)?.sum_all())
}

/// Parameters of the Siamese attention loss besides the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignParams {
    pub trim_threshold: f64,
    /// Common profile length; `None` uses the feature-map height.
    pub length: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SiameseLoss {
    /// Mean over pairs of `bce + sa_alpha * consistency * [same identity]`.
    pub loss: Tensor,
    /// Mean pair BCE.
    pub bce: Tensor,
    /// Spatial consistency of every pair, `[P]` (also computed for negatives).
    pub consistency: Tensor,
    /// Mean consistency over positive pairs (`None` without positives).
    pub positive_consistency: Option<f64>,
}

/// Siamese attention loss given the attention pipeline's output. The
/// spatial term only applies to same-identity pairs.
pub fn siamese_attention_loss(
    sa: &SiameseAttention,
    same: &[bool],
    weights: &LossWeights,
    align: AlignParams,
) -> Result<SiameseLoss> {
    let p = same.len();
    if sa.map1().len() != p {
        return Err(Error::Shape(format!("{p} pair labels for {} pairs", sa.map1().len())));
    }
    let bce_rows = bce_loss_per_pair(&sa.pair_logits, same)?;
    let length = align.length.unwrap_or(sa.map1().height());
    let v1 = aligned_profiles(sa.map1(), align.trim_threshold, length)?;
    let v2 = aligned_profiles(sa.map2(), align.trim_threshold, length)?;
    let consistency = spatial_consistency(&v1, &v2)?;
    let positive = Tensor::from_vec(&[p], same.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect());
    let loss = bce_rows
        .add(&consistency.mul(&positive).scale(weights.sa_alpha))
        .mean_all();
    let n_pos = same.iter().filter(|&&s| s).count();
    let positive_consistency = (n_pos > 0).then(|| {
        consistency
            .data()
            .iter()
            .zip(same)
            .filter(|(_, &s)| s)
            .map(|(c, _)| c)
            .sum::<f64>()
            / n_pos as f64
    });
    Ok(SiameseLoss {
        loss,
        bce: bce_rows.mean_all(),
        consistency,
        positive_consistency,
    })
}

/// Everything needed to evaluate the combined objective on a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub mask: MaskParams,
    pub align: AlignParams,
    pub enable_ia: bool,
    pub enable_sa: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mask: MaskParams::default(),
            align: AlignParams {
                trim_threshold: 0.3,
                length: None,
            },
            enable_ia: true,
            enable_sa: true,
        }
    }
}

/// Terms of the combined objective on one batch.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    /// Mean identity cross-entropy over both branches' images.
    pub ide: Tensor,
    /// Mean identification-attention loss (when enabled).
    pub ia: Option<Tensor>,
    /// Siamese attention loss. Always computed; only added when enabled.
    pub sa: SiameseLoss,
}

/// `L_ide + lambda1 L_ia + lambda2 L_sa` on a pair batch, with the
/// identification module applied to the images of both branches.
pub fn total_loss(model: &CasnModel, batch: &PairBatch, objective: &Objective) -> Result<LossBreakdown> {
    objective.weights.validate()?;
    let p = batch.len();
    let images = ImageTensor::new(Tensor::cat(&[batch.images_a.tensor().clone(), batch.images_b.tensor().clone()], 0))?;
    let labels: Vec<usize> = batch.identity_a.iter().chain(&batch.identity_b).copied().collect();

    let features = model.extract_features(&images)?;
    let logits = model.ide_head(&features.vector)?;
    let ide = ide_loss_per_image(&logits, &labels)?.mean_all();

    let ia = if objective.enable_ia {
        Some(identification_attention_from(model, &images, &features, &labels, objective.mask, true)?.loss)
    } else {
        None
    };

    let attention = siamese_attention_from_features(
        model,
        &features.narrow(0, p),
        &features.narrow(p, p),
        objective.enable_sa,
    )?;
    let sa = siamese_attention_loss(&attention, &batch.same, &objective.weights, objective.align)?;

    let mut total = ide.clone();
    if let Some(ia) = &ia {
        total = total.add(&ia.scale(objective.weights.lambda1));
    }
    if objective.enable_sa {
        total = total.add(&sa.loss.scale(objective.weights.lambda2));
    }
    Ok(LossBreakdown { total, ide, ia, sa })
}
