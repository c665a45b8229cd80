//! Query/gallery distances, CMC and mAP.
//!
//! Ranking excludes, per query, gallery entries that share both identity
//! and camera with it. Ties are broken by gallery index.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use casn_grad::{no_grad, Array, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{aligned_profiles, siamese_attention_from_features, spatial_consistency};
use crate::backbone::{CasnModel, FeatureBundle};
use crate::data::{load_images, stack, ReidSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Normalised feature distance plus normalised attention distance.
    Fused,
    /// Euclidean feature distance only.
    FeatureOnly,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Fused => "fused",
            EvalMode::FeatureOnly => "feature_only",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(EvalMode::Fused),
            "feature_only" => Ok(EvalMode::FeatureOnly),
            other => Err(Error::Config(format!("unknown eval mode {other:?} (fused or feature_only)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Global min-max over the whole matrix (constant matrix -> zeros).
    MinMax,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOptions {
    pub feature_weight: f64,
    pub attention_weight: f64,
    pub normalization: Normalization,
    pub trim_threshold: f64,
    /// Aligned profile length; `None` uses the feature-map height.
    pub align_length: Option<usize>,
    /// Pairs per attention batch.
    pub chunk: usize,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            feature_weight: 1.0,
            attention_weight: 1.0,
            normalization: Normalization::MinMax,
            trim_threshold: 0.3,
            align_length: None,
            chunk: 64,
        }
    }
}

/// `Q x G` distances with query and gallery labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Vec<f64>,
    pub query_ids: Vec<u32>,
    pub query_cameras: Vec<u32>,
    pub gallery_ids: Vec<u32>,
    pub gallery_cameras: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(
        values: Vec<f64>,
        query_ids: Vec<u32>,
        query_cameras: Vec<u32>,
        gallery_ids: Vec<u32>,
        gallery_cameras: Vec<u32>,
    ) -> Result<Self> {
        let (q, g) = (query_ids.len(), gallery_ids.len());
        if q == 0 || g == 0 {
            return Err(Error::Evaluation("query and gallery must both be non-empty".into()));
        }
        if query_cameras.len() != q || gallery_cameras.len() != g {
            return Err(Error::Shape("camera labels do not match identity labels".into()));
        }
        if values.len() != q * g {
            return Err(Error::Shape(format!("{} distances for a {q}x{g} matrix", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Evaluation(format!("distance {bad} is not finite and non-negative")));
        }
        Ok(Self {
            values,
            query_ids,
            query_cameras,
            gallery_ids,
            gallery_cameras,
        })
    }

    pub fn rows(&self) -> usize {
        self.query_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.cols() + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.cols()..(q + 1) * self.cols()]
    }

    /// Same labels, values passed through `f` (must stay finite and >= 0).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.values.iter().map(|&v| f(v)).collect(),
            self.query_ids.clone(),
            self.query_cameras.clone(),
            self.gallery_ids.clone(),
            self.gallery_cameras.clone(),
        )
    }

    pub fn normalized(&self, scheme: Normalization) -> Self {
        let mut out = self.clone();
        if scheme == Normalization::MinMax {
            out.values = minmax(&self.values);
        }
        out
    }

    /// Write `<stem>.bin` (row-major little-endian f64) and `<stem>.txt`
    /// (dimensions and labels).
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = stem.with_extension("bin");
        let txt = stem.with_extension("txt");
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let join = |v: &[u32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let header = format!(
            "rows={}\ncols={}\ndtype=f64le\norder=row_major\nquery_ids={}\nquery_cameras={}\ngallery_ids={}\ngallery_cameras={}\n",
            self.rows(),
            self.cols(),
            join(&self.query_ids),
            join(&self.query_cameras),
            join(&self.gallery_ids),
            join(&self.gallery_cameras),
        );
        fs::write(&txt, header).map_err(|e| Error::io(&txt, e))?;
        Ok((bin, txt))
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let txt = stem.with_extension("txt");
        let header = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
        let field = |key: &str| -> Result<&str> {
            header
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Evaluation(format!("{} lacks {key}", txt.display())))
        };
        let labels = |key: &str| -> Result<Vec<u32>> {
            field(key)?
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| Error::Evaluation(format!("bad {key} entry {x:?}"))))
                .collect()
        };
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Evaluation(format!("{} is not a whole number of f64s", bin.display())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(
            values,
            labels("query_ids")?,
            labels("query_cameras")?,
            labels("gallery_ids")?,
            labels("gallery_cameras")?,
        )
    }
}

fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        v.iter().map(|x| (x - lo) / span).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Gallery order and retrieval scores of every query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Valid gallery indices of each query sorted by distance (exclusions removed).
    pub order: Vec<Vec<usize>>,
    /// Average precision per query; `None` when the query has no valid match.
    pub average_precision: Vec<Option<f64>>,
    /// `cmc[k]`: fraction of evaluated queries with a match within rank `k + 1`.
    pub cmc: Vec<f64>,
    /// Queries without any valid match (left out of the averages).
    pub skipped_queries: usize,
}

impl RankingResult {
    pub fn mean_average_precision(&self) -> f64 {
        let aps: Vec<f64> = self.average_precision.iter().flatten().copied().collect();
        aps.iter().sum::<f64>() / aps.len() as f64
    }

    /// `cmc[rank - 1]`, saturating at the end of the curve.
    pub fn rank(&self, rank: usize) -> f64 {
        let k = rank.max(1) - 1;
        self.cmc.get(k).or(self.cmc.last()).copied().unwrap_or(0.0)
    }
}

/// Sort each row with exclusions applied, then score every query.
pub fn rank(dm: &DistanceMatrix, max_rank: usize) -> Result<RankingResult> {
    if max_rank == 0 {
        return Err(Error::Evaluation("max_rank must be positive".into()));
    }
    let mut cmc = vec![0.0; max_rank];
    let mut order = Vec::with_capacity(dm.rows());
    let mut average_precision = Vec::with_capacity(dm.rows());
    let mut evaluated = 0usize;
    for q in 0..dm.rows() {
        let (qid, qcam) = (dm.query_ids[q], dm.query_cameras[q]);
        let row = dm.row(q);
        let mut valid: Vec<usize> = (0..dm.cols())
            .filter(|&g| !(dm.gallery_ids[g] == qid && dm.gallery_cameras[g] == qcam))
            .collect();
        // stable: equal distances keep gallery order
        valid.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let hits: Vec<usize> = valid
            .iter()
            .enumerate()
            .filter(|(_, &g)| dm.gallery_ids[g] == qid)
            .map(|(pos, _)| pos)
            .collect();
        if hits.is_empty() {
            average_precision.push(None);
        } else {
            evaluated += 1;
            for c in cmc.iter_mut().skip(hits[0]) {
                *c += 1.0;
            }
            let ap = hits
                .iter()
                .enumerate()
                .map(|(i, &pos)| (i + 1) as f64 / (pos + 1) as f64)
                .sum::<f64>()
                / hits.len() as f64;
            average_precision.push(Some(ap));
        }
        order.push(valid);
    }
    if evaluated == 0 {
        return Err(Error::Evaluation("no query has a valid gallery match".into()));
    }
    for c in &mut cmc {
        *c /= evaluated as f64;
    }
    Ok(RankingResult {
        order,
        average_precision,
        cmc,
        skipped_queries: dm.rows() - evaluated,
    })
}

/// CMC curve over ranks `1..=max_rank`, and the number of skipped queries.
pub fn cmc(dm: &DistanceMatrix, max_rank: usize) -> Result<(Vec<f64>, usize)> {
    let r = rank(dm, max_rank)?;
    Ok((r.cmc, r.skipped_queries))
}

pub fn mean_average_precision(dm: &DistanceMatrix) -> Result<f64> {
    Ok(rank(dm, 1)?.mean_average_precision())
}

/// Images with labels, ready for retrieval.
#[derive(Clone, Debug)]
pub struct EvalSet {
    /// `[3, H, W]` normalised images.
    pub images: Vec<Array>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
}

impl EvalSet {
    pub fn from_samples(samples: &[&ReidSample], height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            images: load_images(samples, height, width)?,
            identities: samples.iter().map(|s| s.identity).collect(),
            cameras: samples.iter().map(|s| s.camera).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` entries.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            identities: self.identities[..n].to_vec(),
            cameras: self.cameras[..n].to_vec(),
        }
    }
}

/// Feature maps of every image (eval mode, no graph), `[N, K, h, w]`.
pub fn feature_maps(model: &CasnModel, set: &EvalSet, chunk: usize) -> Result<Array> {
    let was_training = model.is_training();
    model.set_training(false);
    let result = no_grad(|| -> Result<Array> {
        let mut parts = Vec::new();
        for block in set.images.chunks(chunk.max(1)) {
            let images = stack(&block.iter().collect::<Vec<_>>())?;
            parts.push(model.extract_features(&images)?.maps);
        }
        Ok(Tensor::cat(&parts, 0).value().clone())
    });
    model.set_training(was_training);
    result
}

fn pooled(maps: &Array) -> Array {
    FeatureBundle::from_maps(Tensor::constant(maps.clone())).vector.value().clone()
}

/// Component and combined distance matrices.
#[derive(Clone, Debug)]
pub struct FusedDistances {
    /// Raw Euclidean feature distances.
    pub feature: DistanceMatrix,
    /// Raw attention-profile distances (fused mode only).
    pub attention: Option<DistanceMatrix>,
    /// Distances used for ranking.
    pub combined: DistanceMatrix,
}

/// Distances between every query and gallery image.
///
/// Feature-only mode returns plain Euclidean distances. Fused mode adds
/// the attention distance of every (query, gallery) pair: Siamese attention
/// maps are computed with the query in the first branch, then row-max
/// pooled, trimmed and aligned, and compared with the L2 norm. Each matrix
/// is normalised over all its entries before the weighted sum.
pub fn fused_distances(
    model: &CasnModel,
    queries: &EvalSet,
    gallery: &EvalSet,
    mode: EvalMode,
    options: &FusionOptions,
) -> Result<FusedDistances> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Evaluation("query and gallery must both be non-empty".into()));
    }
    let chunk = options.chunk.max(1);
    let qmaps = feature_maps(model, queries, chunk)?;
    let gmaps = feature_maps(model, gallery, chunk)?;
    let (qn, gn) = (queries.len(), gallery.len());
    let (qf, gf) = (pooled(&qmaps), pooled(&gmaps));
    let d = qf.shape()[1];
    let mut feat = Vec::with_capacity(qn * gn);
    for q in 0..qn {
        let a = &qf.data()[q * d..(q + 1) * d];
        for g in 0..gn {
            let b = &gf.data()[g * d..(g + 1) * d];
            feat.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    let labelled = |values: Vec<f64>| {
        DistanceMatrix::new(
            values,
            queries.identities.clone(),
            queries.cameras.clone(),
            gallery.identities.clone(),
            gallery.cameras.clone(),
        )
    };
    let feature = labelled(feat)?;
    if mode == EvalMode::FeatureOnly {
        return Ok(FusedDistances {
            combined: feature.clone(),
            feature,
            attention: None,
        });
    }

    let was_training = model.is_training();
    model.set_training(false);
    let attention = attention_distances(model, &qmaps, &gmaps, options);
    model.set_training(was_training);
    let attention = labelled(attention?)?;

    let nf = feature.normalized(options.normalization);
    let na = attention.normalized(options.normalization);
    let combined = labelled(
        nf.values()
            .iter()
            .zip(na.values())
            .map(|(f, a)| options.feature_weight * f + options.attention_weight * a)
            .collect(),
    )?;
    Ok(FusedDistances {
        feature,
        attention: Some(attention),
        combined,
    })
}

fn attention_distances(model: &CasnModel, qmaps: &Array, gmaps: &Array, options: &FusionOptions) -> Result<Vec<f64>> {
    let (qn, gn) = (qmaps.shape()[0], gmaps.shape()[0]);
    let per: usize = qmaps.shape()[1..].iter().product();
    let mut inner = qmaps.shape().to_vec();
    let length = options.align_length.unwrap_or(inner[2]);
    let mut out = Vec::with_capacity(qn * gn);
    for q in 0..qn {
        let query = &qmaps.data()[q * per..(q + 1) * per];
        for start in (0..gn).step_by(options.chunk.max(1)) {
            let n = options.chunk.max(1).min(gn - start);
            inner[0] = n;
            let repeated: Vec<f64> = (0..n).flat_map(|_| query.iter().copied()).collect();
            let b1 = FeatureBundle::from_maps(Tensor::variable(Array::new(inner.clone(), repeated)));
            let b2 = FeatureBundle::from_maps(Tensor::variable(Array::new(
                inner.clone(),
                gmaps.data()[start * per..(start + n) * per].to_vec(),
            )));
            let sa = siamese_attention_from_features(model, &b1, &b2, false)?;
            let v1 = aligned_profiles(sa.map1(), options.trim_threshold, length)?;
            let v2 = aligned_profiles(sa.map2(), options.trim_threshold, length)?;
            out.extend_from_slice(spatial_consistency(&v1, &v2)?.data());
        }
    }
    Ok(out)
}

/// Retrieval metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn from_ranking(mode: EvalMode, ranking: &RankingResult, gallery: usize) -> Self {
        Self {
            mode,
            rank1: ranking.rank(1),
            rank5: ranking.rank(5),
            rank10: ranking.rank(10),
            map: ranking.mean_average_precision(),
            queries: ranking.order.len(),
            gallery,
            skipped_queries: ranking.skipped_queries,
        }
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode.as_str());
        let _ = writeln!(s, "rank1={:.6}", self.rank1);
        let _ = writeln!(s, "rank5={:.6}", self.rank5);
        let _ = writeln!(s, "rank10={:.6}", self.rank10);
        let _ = writeln!(s, "map={:.6}", self.map);
        let _ = writeln!(s, "queries={}", self.queries);
        let _ = writeln!(s, "gallery={}", self.gallery);
        let _ = writeln!(s, "skipped_queries={}", self.skipped_queries);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} evaluation: rank-1 {:.1}%  rank-5 {:.1}%  rank-10 {:.1}%  mAP {:.1}%  ({} queries, {} gallery, {} skipped)",
            self.mode.as_str(),
            100.0 * self.rank1,
            100.0 * self.rank5,
            100.0 * self.rank10,
            100.0 * self.map,
            self.queries,
            self.gallery,
            self.skipped_queries
        )
    }
}

/// Compute the distance matrix and rank it.
pub fn evaluate(
    model: &CasnModel,
    queries: &EvalSet,
    gallery: &EvalSet,
    mode: EvalMode,
    options: &FusionOptions,
    max_rank: usize,
) -> Result<(FusedDistances, RankingResult, EvalReport)> {
    let distances = fused_distances(model, queries, gallery, mode, options)?;
    let ranking = rank(&distances.combined, max_rank.max(10))?;
    let report = EvalReport::from_ranking(mode, &ranking, gallery.len());
    Ok((distances, ranking, report))
}
