//! Gradient-derived attention.
//!
//! Two attention sources share one Grad-CAM core:
//!
//! * identification attention: Grad-CAM of the ground-truth identity score,
//!   used to soft-mask the image; the masked image's class probability is
//!   the identification-attention loss;
//! * Siamese attention: Grad-CAM of the importance scores `s = <alpha, f>`,
//!   where `alpha` selects feature-difference coordinates whose gradient on
//!   the same-identity logit is positive.
//!
//! Siamese maps are compared through their row-max profiles after
//! normalisation, trimming at threshold `t`, and linear resizing to a common
//! length.
//!
//! When a map feeds a training loss it is built with `differentiable = true`:
//! the gradients inside Grad-CAM are graph nodes, so the loss backpropagates
//! through them into the model parameters.

use std::rc::Rc;

use casn_grad::{grad, no_grad, Array, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{CasnModel, FeatureBundle, ImageTensor, PairLogits};
use crate::error::{Error, Result};
use crate::losses::softmax;

/// Non-negative saliency maps, `[N, h, w]`.
#[derive(Clone, Debug)]
pub struct AttentionMap(pub Tensor);

impl AttentionMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Row `n` as an `h x w` array.
    pub fn get(&self, n: usize) -> Array {
        let (h, w) = (self.height(), self.width());
        Array::new(vec![h, w], self.0.data()[n * h * w..(n + 1) * h * w].to_vec())
    }
}

/// Per-row importance profiles, `[N, L]`.
#[derive(Clone, Debug)]
pub struct ImportanceVector(pub Tensor);

impl ImportanceVector {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let l = self.len();
        &self.0.data()[n * l..(n + 1) * l]
    }
}

/// `{0, 1}` selection over feature coordinates, `[P, D]`. Constant with
/// respect to differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorVector(pub Array);

impl IndicatorVector {
    /// `1` where the gradient is strictly positive.
    pub fn from_gradient(g: &Array) -> Self {
        Self(g.map(|x| if x > 0.0 { 1.0 } else { 0.0 }))
    }
}

/// Soft-mask sigmoid `sigmoid(sharpness * (m - threshold))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub sharpness: f64,
    pub threshold: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            sharpness: 8.0,
            threshold: 0.5,
        }
    }
}

impl MaskParams {
    pub fn new(sharpness: f64, threshold: f64) -> Result<Self> {
        let p = Self {
            sharpness,
            threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::Config(format!("mask sharpness must be > 0, got {}", self.sharpness)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "mask threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Grad-CAM output: per-channel weights `[N, K]` and the rectified map.
#[derive(Clone, Debug)]
pub struct GradCam {
    pub channel_weights: Tensor,
    pub map: AttentionMap,
}

fn cam_from_gradient(gradient: &Tensor, maps: &Tensor) -> GradCam {
    let (n, k, h, w) = dims4(maps);
    let weights = gradient.mean_axes(&[2, 3]);
    let map = weights.mul(maps).sum_axes(&[1]).relu().reshape(&[n, h, w]);
    GradCam {
        channel_weights: weights.reshape(&[n, k]),
        map: AttentionMap(map),
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

/// Grad-CAM of `score` over each of `maps` in a single backward pass.
///
/// Per-image maps come out of one call when `score` is a sum of per-image
/// scores, since no image's score depends on another image's maps.
pub fn grad_cam_many(score: &Tensor, maps: &[&Tensor], differentiable: bool) -> Result<Vec<GradCam>> {
    if score.numel() != 1 {
        return Err(Error::Shape(format!("Grad-CAM score must be scalar, got {:?}", score.shape())));
    }
    for m in maps {
        if m.shape().len() != 4 {
            return Err(Error::Shape(format!("feature maps must be [N, K, h, w], got {:?}", m.shape())));
        }
    }
    let grads = grad(score, maps, differentiable);
    maps.iter()
        .zip(grads)
        .map(|(m, g)| {
            let g = g.ok_or(Error::NotConnected("feature maps"))?;
            Ok(if differentiable {
                cam_from_gradient(&g, m)
            } else {
                no_grad(|| cam_from_gradient(&g, &m.detach()))
            })
        })
        .collect()
}

/// `alpha_k = GAP(d score / d A_k)`, `M = ReLU(sum_k alpha_k A_k)`.
pub fn grad_cam(score: &Tensor, maps: &Tensor, differentiable: bool) -> Result<GradCam> {
    Ok(grad_cam_many(score, &[maps], differentiable)?.remove(0))
}

/// Min-max normalise each row of `[N, M]` to `[0, 1]`; constant rows become
/// zero.
pub fn minmax_rows(t: &Tensor) -> Tensor {
    let max = t.max_along(1);
    let min = t.min_along(1);
    let degenerate = Tensor::constant(
        max.value()
            .zip_broadcast(min.value(), |a, b| if a > b { 0.0 } else { 1.0 }),
    );
    t.sub(&min).div(&max.sub(&min).add(&degenerate))
}

/// Per-map min-max normalisation of `[N, h, w]`.
pub fn normalize_map(map: &AttentionMap) -> AttentionMap {
    let s = map.0.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    AttentionMap(minmax_rows(&map.0.reshape(&[n, h * w])).reshape(&[n, h, w]))
}

/// Linear interpolation weights `[out_len, in_len]`.
///
/// With `align_corners` the end points map onto each other exactly;
/// otherwise sample centres are aligned (image resizing convention).
pub fn resize_matrix(out_len: usize, in_len: usize, align_corners: bool) -> Array {
    assert!(out_len > 0 && in_len > 0, "resize to or from zero length");
    let mut m = Array::zeros(&[out_len, in_len]);
    for i in 0..out_len {
        let pos = if align_corners {
            if out_len == 1 {
                0.0
            } else {
                i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            }
        } else {
            ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64)
        };
        let lo = (pos.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = pos - lo as f64;
        m.data_mut()[i * in_len + lo] += 1.0 - frac;
        if frac > 0.0 {
            m.data_mut()[i * in_len + hi] += frac;
        }
    }
    m
}

/// Bilinear resize of `[N, 1, h, w]` to `[N, 1, H, W]`.
pub fn upsample(map: &Tensor, height: usize, width: usize) -> Tensor {
    let (h, w) = (map.shape()[2], map.shape()[3]);
    map.axis_matmul(2, Rc::new(resize_matrix(height, h, false)))
        .axis_matmul(3, Rc::new(resize_matrix(width, w, false)))
}

/// `I * (1 - sigmoid(sharpness * (up(M) - threshold)))` for a map already
/// normalised to `[0, 1]`.
pub fn apply_soft_mask(images: &ImageTensor, normalized: &AttentionMap, params: MaskParams) -> Result<ImageTensor> {
    if normalized.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} images",
            normalized.len(),
            images.len()
        )));
    }
    let (n, h, w) = (normalized.len(), normalized.height(), normalized.width());
    let up = upsample(&normalized.0.reshape(&[n, 1, h, w]), images.height(), images.width());
    let sigma = up.add_scalar(-params.threshold).scale(params.sharpness).sigmoid();
    ImageTensor::new(images.tensor().mul(&sigma.neg().add_scalar(1.0)))
}

/// Min-max normalise `map`, upsample it to the image, and erase the attended
/// pixels softly. Differentiable in both the image and the map.
pub fn soft_mask(images: &ImageTensor, map: &AttentionMap, params: MaskParams) -> Result<ImageTensor> {
    apply_soft_mask(images, &normalize_map(map), params)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut a = Array::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidLabel { label: c, bound: classes });
        }
        a.data_mut()[i * classes + c] = 1.0;
    }
    Ok(Tensor::constant(a))
}

/// Everything produced while computing the identification-attention loss.
#[derive(Clone, Debug)]
pub struct IdentificationAttention {
    pub cam: GradCam,
    pub masked: ImageTensor,
    /// Softmax probability of the true class on each masked image, `[N]`.
    pub probabilities: Tensor,
    /// Mean of `probabilities`.
    pub loss: Tensor,
}

/// Identification attention given an existing forward pass (`features` of
/// `images`).
pub fn identification_attention_from(
    model: &CasnModel,
    images: &ImageTensor,
    features: &FeatureBundle,
    labels: &[usize],
    params: MaskParams,
    differentiable: bool,
) -> Result<IdentificationAttention> {
    if labels.len() != images.len() || features.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} labels / {} feature rows for {} images",
            labels.len(),
            features.len(),
            images.len()
        )));
    }
    let onehot = one_hot(labels, model.num_classes())?;
    let logits = model.ide_head(&features.vector)?;
    let score = logits.0.mul(&onehot).sum_all();
    let cam = grad_cam(&score, &features.maps, differentiable)?;

    let masked_forward = || -> Result<(ImageTensor, Tensor)> {
        let masked = soft_mask(images, &cam.map, params)?;
        let masked_logits = model.ide_head(&model.extract_features(&masked)?.vector)?;
        let p = softmax(&masked_logits.0).mul(&onehot).sum_axes(&[1]);
        Ok((masked, p.reshape(&[labels.len()])))
    };
    let (masked, probabilities) = if differentiable {
        masked_forward()?
    } else {
        no_grad(masked_forward)?
    };
    let loss = probabilities.mean_all();
    Ok(IdentificationAttention {
        cam,
        masked,
        probabilities,
        loss,
    })
}

/// Mean softmax probability of the true class on the attention-masked
/// images (the identification-attention loss), differentiable through the
/// attention map.
pub fn identification_attention_loss(
    model: &CasnModel,
    images: &ImageTensor,
    labels: &[usize],
    params: MaskParams,
) -> Result<Tensor> {
    let features = model.extract_features(images)?;
    Ok(identification_attention_from(model, images, &features, labels, params, true)?.loss)
}

/// `alpha_i = 1` iff `d z_1 / d f_i^- > 0`, per pair.
pub fn indicator_vector(pair_logits: &PairLogits, f_diff: &Tensor) -> Result<IndicatorVector> {
    let z = &pair_logits.0;
    if z.shape().len() != 2 || z.shape()[1] != 2 {
        return Err(Error::Shape(format!("pair logits must be [P, 2], got {:?}", z.shape())));
    }
    let same = z.narrow(1, 1, 1).sum_all();
    let g = grad(&same, &[f_diff], false)
        .remove(0)
        .ok_or(Error::NotConnected("feature difference"))?;
    Ok(IndicatorVector::from_gradient(g.value()))
}

/// `s_1 = <alpha, f_1>`, `s_2 = <alpha, f_2>` per pair (`[P]` each).
pub fn importance_scores(alpha: &IndicatorVector, f1: &Tensor, f2: &Tensor) -> Result<(Tensor, Tensor)> {
    let a = alpha.0.shape();
    if f1.shape() != a || f2.shape() != a || a.len() != 2 {
        return Err(Error::Shape(format!(
            "indicator {a:?} vs features {:?} / {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    let p = a[0];
    let alpha = Tensor::constant(alpha.0.clone());
    let s1 = f1.mul(&alpha).sum_axes(&[1]).reshape(&[p]);
    let s2 = f2.mul(&alpha).sum_axes(&[1]).reshape(&[p]);
    Ok((s1, s2))
}

/// Intermediate and final products of the Siamese attention pipeline.
#[derive(Clone, Debug)]
pub struct SiameseAttention {
    pub pair_logits: PairLogits,
    pub f_diff: Tensor,
    pub indicator: IndicatorVector,
    pub scores: (Tensor, Tensor),
    pub cam1: GradCam,
    pub cam2: GradCam,
}

impl SiameseAttention {
    pub fn map1(&self) -> &AttentionMap {
        &self.cam1.map
    }

    pub fn map2(&self) -> &AttentionMap {
        &self.cam2.map
    }
}

/// Siamese attention for pairs whose branch features are already computed.
pub fn siamese_attention_from_features(
    model: &CasnModel,
    branch1: &FeatureBundle,
    branch2: &FeatureBundle,
    differentiable: bool,
) -> Result<SiameseAttention> {
    if branch1.maps.shape() != branch2.maps.shape() {
        return Err(Error::Shape(format!(
            "branch maps differ: {:?} vs {:?}",
            branch1.maps.shape(),
            branch2.maps.shape()
        )));
    }
    let f_diff = branch1.vector.sub(&branch2.vector);
    let pair_logits = model.bce_head(&f_diff)?;
    let indicator = indicator_vector(&pair_logits, &f_diff)?;
    let (s1, s2) = importance_scores(&indicator, &branch1.vector, &branch2.vector)?;
    let total = s1.sum_all().add(&s2.sum_all());
    let mut cams = grad_cam_many(&total, &[&branch1.maps, &branch2.maps], differentiable)?;
    let cam2 = cams.pop().expect("two maps");
    let cam1 = cams.pop().expect("two maps");
    Ok(SiameseAttention {
        pair_logits,
        f_diff,
        indicator,
        scores: (s1, s2),
        cam1,
        cam2,
    })
}

/// Full pipeline on image pairs: one shared extractor over both branches,
/// pair head on `f1 - f2`, indicator, importance scores, Grad-CAM per branch.
pub fn siamese_attention_maps(
    model: &CasnModel,
    images1: &ImageTensor,
    images2: &ImageTensor,
    differentiable: bool,
) -> Result<SiameseAttention> {
    if images1.len() != images2.len() {
        return Err(Error::Shape(format!(
            "{} first-branch images vs {} second-branch images",
            images1.len(),
            images2.len()
        )));
    }
    let p = images1.len();
    let both = ImageTensor::new(Tensor::cat(&[images1.tensor().clone(), images2.tensor().clone()], 0))?;
    let features = model.extract_features(&both)?;
    siamese_attention_from_features(model, &features.narrow(0, p), &features.narrow(p, p), differentiable)
}

/// Maximum response of each horizontal row: `[N, h, w] -> [N, h]`.
pub fn row_max_pool(map: &AttentionMap) -> ImportanceVector {
    let (n, h) = (map.len(), map.height());
    ImportanceVector(map.0.max_along(2).reshape(&[n, h]))
}

/// Per-profile min-max normalisation to `[0, 1]`.
pub fn normalize_profile(v: &ImportanceVector) -> ImportanceVector {
    ImportanceVector(minmax_rows(&v.0))
}

/// Inclusive span from the first to the last entry strictly above `t`;
/// the whole vector when none is.
pub fn trim_span(values: &[f64], t: f64) -> (usize, usize) {
    let first = values.iter().position(|&v| v > t);
    let last = values.iter().rposition(|&v| v > t);
    match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => (0, values.len().saturating_sub(1)),
    }
}

/// Trim each profile to its above-threshold span and linearly resize the
/// span to `length` (end points preserved; a single-element span is
/// replicated).
pub fn trim_and_align_one(v: &ImportanceVector, t: f64, length: usize) -> Result<ImportanceVector> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidInput(format!("trim threshold must lie in (0, 1), got {t}")));
    }
    if length == 0 {
        return Err(Error::InvalidInput("aligned length must be positive".into()));
    }
    let n = v.0.shape()[0];
    let h = v.len();
    let rows: Vec<Tensor> = (0..n)
        .map(|i| {
            let (start, end) = trim_span(v.row(i), t);
            let span = end - start + 1;
            let interp = resize_matrix(length, span, true);
            // [h, length]: zero outside the span.
            let mut select = Array::zeros(&[h, length]);
            for j in 0..span {
                for o in 0..length {
                    select.data_mut()[(start + j) * length + o] = interp.data()[o * span + j];
                }
            }
            v.0.narrow(0, i, 1).matmul(&Tensor::constant(select))
        })
        .collect();
    Ok(ImportanceVector(Tensor::cat(&rows, 0)))
}

pub fn trim_and_align(
    v1: &ImportanceVector,
    v2: &ImportanceVector,
    t: f64,
    length: usize,
) -> Result<(ImportanceVector, ImportanceVector)> {
    Ok((trim_and_align_one(v1, t, length)?, trim_and_align_one(v2, t, length)?))
}

/// Row-max pool, normalise, trim and align a batch of maps.
pub fn aligned_profiles(map: &AttentionMap, t: f64, length: usize) -> Result<ImportanceVector> {
    trim_and_align_one(&normalize_profile(&row_max_pool(map)), t, length)
}

/// Euclidean distance between aligned profiles, per row (`[N]`).
pub fn spatial_consistency(v1: &ImportanceVector, v2: &ImportanceVector) -> Result<Tensor> {
    if v1.0.shape() != v2.0.shape() {
        return Err(Error::Shape(format!(
            "aligned profiles differ in shape: {:?} vs {:?}",
            v1.0.shape(),
            v2.0.shape()
        )));
    }
    let n = v1.0.shape()[0];
    Ok(v1.0.sub(&v2.0).square().sum_axes(&[1]).sqrt().reshape(&[n]))
}
