//! Re-id image folders, pair sampling and a synthetic dataset generator.
//!
//! Layout: `<root>/{train,query,gallery}/<identity>_c<camera>[s<n>]_<seq>.<ext>`
//! (Market-1501 naming). Identities of the train split are re-indexed
//! densely (sorted raw id -> 0..C).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use casn_grad::{Array, Tensor};
use image::{imageops, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReidSample {
    pub image_path: PathBuf,
    /// Raw identity as written in the file name.
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

/// `(identity, camera)` from a `<identity>_c<camera>[s<n>]_<seq>.<ext>` name.
pub fn parse_file_name(path: &Path) -> Result<(u32, u32)> {
    let bad = |reason: &str| Error::FileName {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| bad("not valid UTF-8"))?;
    let (stem, _ext) = name.rsplit_once('.').ok_or_else(|| bad("missing extension"))?;
    let mut parts = stem.splitn(3, '_');
    let (Some(id), Some(cam), Some(seq)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad("expected <identity>_c<camera>_<seq>"));
    };
    if seq.is_empty() {
        return Err(bad("empty sequence field"));
    }
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("identity must be a non-negative integer"));
    }
    let identity: u32 = id.parse().map_err(|_| bad("identity out of range"))?;
    let cam = cam.strip_prefix('c').ok_or_else(|| bad("camera field must start with 'c'"))?;
    let digits: String = cam.chars().take_while(|c| c.is_ascii_digit()).collect();
    let rest = &cam[digits.len()..];
    if digits.is_empty() {
        return Err(bad("camera number missing"));
    }
    if !(rest.is_empty() || (rest.starts_with('s') && rest.len() > 1 && rest[1..].bytes().all(|b| b.is_ascii_digit()))) {
        return Err(bad("unexpected characters after camera number"));
    }
    let camera: u32 = digits.parse().map_err(|_| bad("camera out of range"))?;
    Ok((identity, camera))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    /// Sorted by split, then path.
    pub samples: Vec<ReidSample>,
    /// Sorted raw train identities; position = dense label.
    pub train_identities: Vec<u32>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ReidSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.train_identities.len()
    }

    pub fn label_of(&self, identity: u32) -> Option<usize> {
        self.train_identities.binary_search(&identity).ok()
    }
}

/// Scan `root/{train,query,gallery}`, sorted and deterministic.
pub fn scan_dataset(root: &Path) -> Result<Dataset> {
    let mut samples = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<_>>()?;
        paths.retain(|p| p.is_file() && is_image(p));
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("split {split} at {} has no images", dir.display())));
        }
        for image_path in paths {
            let (identity, camera) = parse_file_name(&image_path)?;
            samples.push(ReidSample {
                image_path,
                identity,
                camera,
                split,
            });
        }
    }
    let mut train_identities: Vec<u32> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.identity)
        .collect();
    train_identities.sort_unstable();
    train_identities.dedup();
    Ok(Dataset {
        root: root.to_path_buf(),
        samples,
        train_identities,
    })
}

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `[3, H, W]` channel-normalised array from an RGB image.
pub fn normalize_rgb(img: &RgbImage) -> Array {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut a = Array::zeros(&[3, h, w]);
    let d = a.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = (px[c] as f64 / 255.0 - MEAN[c]) / STD[c];
        }
    }
    a
}

/// Inverse of `normalize_rgb` (clamped to the 8-bit range).
pub fn denormalize_rgb(a: &Array) -> RgbImage {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v = a.data()[(c * h + y as usize) * w + x as usize] * STD[c] + MEAN[c];
            *p = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

pub fn load_rgb(path: &Path, height: usize, width: usize) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(if img.width() as usize == width && img.height() as usize == height {
        img
    } else {
        imageops::resize(&img, width as u32, height as u32, imageops::FilterType::Triangle)
    })
}

/// Load, resize to `height x width` and normalise.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Array> {
    Ok(normalize_rgb(&load_rgb(path, height, width)?))
}

pub fn load_images(samples: &[&ReidSample], height: usize, width: usize) -> Result<Vec<Array>> {
    samples.iter().map(|s| load_image(&s.image_path, height, width)).collect()
}

/// Stack `[3, H, W]` arrays into an image batch.
pub fn stack(images: &[&Array]) -> Result<ImageTensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stack zero images".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("image {:?} vs {:?}", img.shape(), shape)));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    ImageTensor::new(Tensor::from_vec(&full, data))
}

pub fn hflip(a: &Array) -> Array {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = Array::zeros(a.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = a.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Image pairs with dense identity labels; `same[i] == (identity_a[i] == identity_b[i])`.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub images_a: ImageTensor,
    pub images_b: ImageTensor,
    pub identity_a: Vec<usize>,
    pub identity_b: Vec<usize>,
    pub same: Vec<bool>,
}

impl PairBatch {
    pub fn new(
        images_a: ImageTensor,
        images_b: ImageTensor,
        identity_a: Vec<usize>,
        identity_b: Vec<usize>,
    ) -> Result<Self> {
        let n = identity_a.len();
        if identity_b.len() != n || images_a.len() != n || images_b.len() != n {
            return Err(Error::Shape("pair batch components differ in length".into()));
        }
        let same = identity_a.iter().zip(&identity_b).map(|(a, b)| a == b).collect();
        Ok(Self {
            images_a,
            images_b,
            identity_a,
            identity_b,
            same,
        })
    }

    pub fn len(&self) -> usize {
        self.same.len()
    }

    pub fn is_empty(&self) -> bool {
        self.same.is_empty()
    }
}

/// One sampled pair: indices into the training items.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Seeded pair sampler over training items.
pub struct PairSampler {
    rng: ChaCha8Rng,
    labels: Vec<usize>,
    cameras: Vec<u32>,
    by_label: Vec<Vec<usize>>,
    /// Labels with at least two items.
    positive_labels: Vec<usize>,
    batch_size: usize,
    positives_per_batch: usize,
}

impl PairSampler {
    /// `labels[i]` / `cameras[i]` describe training item `i`.
    pub fn new(
        labels: &[usize],
        cameras: &[u32],
        batch_size: usize,
        positive_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != cameras.len() {
            return Err(Error::Shape("labels and cameras differ in length".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&positive_fraction) {
            return Err(Error::Config(format!("positive fraction {positive_fraction} not in [0, 1]")));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_label = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_label[l].push(i);
        }
        let present: Vec<usize> = (0..classes).filter(|&l| !by_label[l].is_empty()).collect();
        let positive_labels: Vec<usize> = (0..classes).filter(|&l| by_label[l].len() >= 2).collect();
        let positives_per_batch = (positive_fraction * batch_size as f64).round() as usize;
        if positives_per_batch > 0 && positive_labels.is_empty() {
            return Err(Error::Dataset("no identity has at least two images for positive pairs".into()));
        }
        if positives_per_batch < batch_size && present.len() < 2 {
            return Err(Error::Dataset("negative pairs need at least two identities".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            labels: labels.to_vec(),
            cameras: cameras.to_vec(),
            by_label,
            positive_labels,
            batch_size,
            positives_per_batch,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn positive(&mut self) -> PairIndex {
        let label = *self.positive_labels.choose(&mut self.rng).expect("checked in new");
        let members = &self.by_label[label];
        let a = *members.choose(&mut self.rng).expect("non-empty");
        let cross: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&m| m != a && self.cameras[m] != self.cameras[a])
            .collect();
        let b = if cross.is_empty() {
            let others: Vec<usize> = members.iter().copied().filter(|&m| m != a).collect();
            *others.choose(&mut self.rng).expect("at least two members")
        } else {
            *cross.choose(&mut self.rng).expect("non-empty")
        };
        PairIndex { a, b, same: true }
    }

    fn negative(&mut self) -> PairIndex {
        let n = self.labels.len();
        let a = self.rng.gen_range(0..n);
        loop {
            let b = self.rng.gen_range(0..n);
            if self.labels[b] != self.labels[a] {
                return PairIndex { a, b, same: false };
            }
        }
    }

    /// Next batch of pair indices (positives and negatives shuffled).
    pub fn next_indices(&mut self) -> Vec<PairIndex> {
        let mut pairs: Vec<PairIndex> = (0..self.batch_size)
            .map(|i| {
                if i < self.positives_per_batch {
                    self.positive()
                } else {
                    self.negative()
                }
            })
            .collect();
        pairs.shuffle(&mut self.rng);
        pairs
    }

    /// Materialise the next batch from preloaded `[3, H, W]` images.
    pub fn next_batch(&mut self, images: &[Array], flip: bool) -> Result<PairBatch> {
        let pairs = self.next_indices();
        let mut pick = |i: usize| -> Array {
            if flip && self.rng.gen_bool(0.5) {
                hflip(&images[i])
            } else {
                images[i].clone()
            }
        };
        let a: Vec<Array> = pairs.iter().map(|p| pick(p.a)).collect();
        let b: Vec<Array> = pairs.iter().map(|p| pick(p.b)).collect();
        let batch = PairBatch::new(
            stack(&a.iter().collect::<Vec<_>>())?,
            stack(&b.iter().collect::<Vec<_>>())?,
            pairs.iter().map(|p| self.labels[p.a]).collect(),
            pairs.iter().map(|p| self.labels[p.b]).collect(),
        )?;
        debug_assert!(batch.same.iter().zip(&pairs).all(|(s, p)| *s == p.same));
        Ok(batch)
    }
}

// ---- synthetic data ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            images_per_identity: 6,
            height: 64,
            width: 32,
            cameras: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// `path,identity,camera,split` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{},{},{},{}\n", e.path.display(), e.identity, e.camera, e.split))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Dataset(format!("malformed manifest line {line:?}"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(ManifestEntry {
                    path: PathBuf::from(f[0]),
                    identity: f[1].parse().map_err(|_| bad())?,
                    camera: f[2].parse().map_err(|_| bad())?,
                    split: f[3].parse()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        Self::parse(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }
}

/// Appearance signature of one synthetic identity.
#[derive(Clone, Debug)]
struct Figure {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    torso_shape: u8,
    stripes: u8,
    bag: i8,
    torso_fraction: f64,
    girth: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Figure {
    fn new(id: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let hue = id as f64 / n as f64;
        Self {
            head: hsv(0.08, rng.gen_range(0.3..0.6), rng.gen_range(0.5..0.9)),
            torso: hsv(hue, rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)),
            legs: hsv(hue + rng.gen_range(0.25..0.75), rng.gen_range(0.4..1.0), rng.gen_range(0.25..0.8)),
            torso_shape: (id % 3) as u8,
            stripes: ((id / 3) % 3) as u8,
            bag: [0, -1, 1][(id / 2) % 3],
            torso_fraction: rng.gen_range(0.35..0.48),
            girth: rng.gen_range(0.75..1.0),
        }
    }

    /// Colour of the figure at normalised coordinates (u across, v down,
    /// both in `[0, 1]` inside the figure box), or `None` for background.
    fn color_at(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let head_end = 0.16;
        let torso_end = head_end + self.torso_fraction;
        let cu = u - 0.5;
        if v < head_end {
            let dy = (v - head_end / 2.0) / (head_end / 2.0);
            let dx = cu / 0.16;
            return (dx * dx + dy * dy <= 1.0).then_some(self.head);
        }
        if v < torso_end {
            let t = (v - head_end) / self.torso_fraction;
            let half = 0.5 * self.girth
                * match self.torso_shape {
                    0 => 0.8,
                    1 => 0.55 + 0.35 * t,
                    _ => 0.85 * (1.0 - (2.0 * t - 1.0).powi(2)).max(0.0).sqrt().max(0.45),
                };
            if cu.abs() <= half {
                let stripe = match self.stripes {
                    1 => ((t * 5.0) as u32) % 2 == 1,
                    2 => cu.abs() < 0.08,
                    _ => false,
                };
                return Some(if stripe { self.torso.map(|c| c * 0.35) } else { self.torso });
            }
            let bag_side = f64::from(self.bag);
            if self.bag != 0 && (cu * bag_side) > half && (cu * bag_side) < half + 0.14 && t > 0.45 && t < 0.85 {
                return Some([0.35, 0.22, 0.1]);
            }
            return None;
        }
        let leg_gap = 0.04;
        let leg_w = 0.17 * self.girth;
        let a = cu.abs();
        (a > leg_gap && a < leg_gap + leg_w).then_some(self.legs)
    }
}

fn render(
    figure: &Figure,
    spec: &SyntheticSpec,
    camera: usize,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let (h, w) = (spec.height as f64, spec.width as f64);
    // Camera-specific background tone and illumination.
    let mut cam_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9 * (camera as u64 + 1)));
    let base = hsv(cam_rng.gen_range(0.0..1.0), 0.2, cam_rng.gen_range(0.35..0.65));
    let gain = cam_rng.gen_range(0.8..1.15);

    let clutter: Vec<([f64; 4], [f64; 3])> = (0..6)
        .map(|_| {
            let x0 = rng.gen_range(0.0..w);
            let y0 = rng.gen_range(0.0..h);
            let rect = [x0, y0, x0 + rng.gen_range(2.0..w * 0.5), y0 + rng.gen_range(2.0..h * 0.3)];
            (rect, hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.1..0.4), rng.gen_range(0.3..0.7)))
        })
        .collect();

    let scale = rng.gen_range(0.85..1.02);
    let box_h = 0.9 * h * scale;
    let box_w = 0.5 * w * scale;
    let cx = w / 2.0 + rng.gen_range(-0.1..0.1) * w;
    let top = (h - box_h) / 2.0 + rng.gen_range(-0.04..0.04) * h;
    let occluder = rng.gen_bool(0.3).then(|| {
        let oh = rng.gen_range(0.1..0.25) * h;
        let y0 = rng.gen_range(0.2 * h..0.9 * h - oh);
        ([0.0, y0, w, y0 + oh], hsv(rng.gen_range(0.0..1.0), 0.15, rng.gen_range(0.3..0.6)))
    });

    let mut img = RgbImage::new(spec.width as u32, spec.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let inside = |r: &[f64; 4]| fx >= r[0] && fx < r[2] && fy >= r[1] && fy < r[3];
        let mut c = base;
        for (r, col) in &clutter {
            if inside(r) {
                c = *col;
            }
        }
        let u = (fx - (cx - box_w / 2.0)) / box_w;
        let v = (fy - top) / box_h;
        if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
            if let Some(col) = figure.color_at(u, v) {
                c = col;
            }
        }
        if let Some((r, col)) = &occluder {
            if inside(r) {
                c = *col;
            }
        }
        let noise = rng.gen_range(-0.03..0.03);
        *px = Rgb(c.map(|ch| ((ch * gain + noise) * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    img
}

/// Render a synthetic re-id dataset under `root` and write its manifest.
///
/// Per identity, the last two images become the query and gallery entries
/// (on different cameras) and the rest the training set.
pub fn generate_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<Manifest> {
    if spec.identities < 2 {
        return Err(Error::Config("synthetic data needs at least two identities".into()));
    }
    if spec.images_per_identity < 3 {
        return Err(Error::Config("synthetic data needs at least three images per identity".into()));
    }
    if spec.cameras < 2 {
        return Err(Error::Config("synthetic data needs at least two cameras".into()));
    }
    if spec.height < 8 || spec.width < 4 {
        return Err(Error::Config("synthetic images must be at least 8x4".into()));
    }
    for split in Split::ALL {
        let d = root.join(split.as_str());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::new();
    let per = spec.images_per_identity;
    for id in 0..spec.identities {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(id as u64));
        let figure = Figure::new(id, spec.identities, &mut rng);
        for j in 0..per {
            let camera = j % spec.cameras;
            let split = match j {
                _ if j == per - 2 => Split::Query,
                _ if j == per - 1 => Split::Gallery,
                _ => Split::Train,
            };
            let identity = id as u32 + 1;
            let rel = PathBuf::from(split.as_str()).join(format!("{:04}_c{}_{:03}.png", identity, camera + 1, j));
            let img = render(&figure, spec, camera, &mut rng);
            let path = root.join(&rel);
            img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
            entries.push(ManifestEntry {
                path: rel,
                identity,
                camera: camera as u32 + 1,
                split,
            });
        }
    }
    let manifest = Manifest { entries };
    let mp = root.join(MANIFEST_FILE);
    fs::write(&mp, manifest.to_text()).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// Count of images per identity in a split (raw identity keys).
pub fn identity_counts(samples: &[&ReidSample]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.identity).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_market_style_names() {
        assert_eq!(parse_file_name(Path::new("train/0007_c2_001.png")).unwrap(), (7, 2));
        assert_eq!(parse_file_name(Path::new("0002_c1s1_000451_03.jpg")).unwrap(), (2, 1));
    }

    #[test]
    fn rejects_malformed_names() {
        for bad in ["x_c1_1.png", "0001_1_001.png", "0001_c_001.png", "0001.png", "-1_c1s1_0001.jpg", "0001_c1x_3.png"] {
            let err = parse_file_name(Path::new(bad)).unwrap_err();
            assert!(matches!(err, Error::FileName { .. }), "{bad}: {err}");
            assert!(err.to_string().contains(bad));
        }
    }

    #[test]
    fn pair_batches_respect_positive_fraction() {
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let cams = [1, 2, 1, 2, 1, 2, 3];
        for (frac, expect) in [(1.0, 8), (0.0, 0), (0.5, 4)] {
            let mut s = PairSampler::new(&labels, &cams, 8, frac, 1).unwrap();
            for _ in 0..5 {
                let pairs = s.next_indices();
                assert_eq!(pairs.iter().filter(|p| p.same).count(), expect);
                for p in &pairs {
                    assert_eq!(p.same, labels[p.a] == labels[p.b]);
                    if p.same {
                        assert_ne!(p.a, p.b);
                        // every identity here spans several cameras
                        assert_ne!(cams[p.a], cams[p.b]);
                    }
                }
            }
        }
    }

    #[test]
    fn sampler_is_reproducible() {
        let labels = [0, 0, 1, 1, 2];
        let cams = [1, 1, 1, 2, 1];
        let mut a = PairSampler::new(&labels, &cams, 4, 0.5, 9).unwrap();
        let mut b = PairSampler::new(&labels, &cams, 4, 0.5, 9).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }

    #[test]
    fn sampler_needs_positive_capable_identity() {
        assert!(matches!(
            PairSampler::new(&[0, 1, 2], &[1, 1, 1], 4, 0.5, 0),
            Err(Error::Dataset(_))
        ));
        assert!(PairSampler::new(&[0, 1, 2], &[1, 1, 1], 4, 0.0, 0).is_ok());
    }

    #[test]
    fn normalize_roundtrip() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 200]));
        assert_eq!(denormalize_rgb(&normalize_rgb(&img)), img);
    }

    #[test]
    fn hflip_twice_is_identity() {
        let a = Array::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(hflip(&a).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(hflip(&hflip(&a)), a);
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                path: PathBuf::from("query/0001_c2_004.png"),
                identity: 1,
                camera: 2,
                split: Split::Query,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("a,b,c\n").is_err());
    }
}
