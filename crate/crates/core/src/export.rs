//! Attention maps as images: 8-bit grayscale (min-max scaled, resized to
//! the input) plus a jet-coloured overlay on the source image.
//!
//! Files are named `<split>_<imageid>_<branch>.png` and
//! `<split>_<imageid>_<branch>_overlay.png`, where `branch` is `ia`
//! (identification attention), `b1` or `b2` (Siamese branches).

use std::fs;
use std::path::{Path, PathBuf};

use casn_grad::{Array, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::attention::{aligned_profiles, grad_cam, siamese_attention_maps, spatial_consistency, upsample};
use crate::backbone::CasnModel;
use crate::data::{load_rgb, normalize_rgb, stack};
use crate::error::{Error, Result};

/// Jet colour map on `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// `[h, w]` map resized to `height x width` and min-max scaled to `[0, 1]`
/// (a constant map becomes zeros).
pub fn resize_normalized(map: &Array, height: usize, width: usize) -> Array {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let up = upsample(&Tensor::constant(map.reshape(&[1, 1, h, w])), height, width);
    let v = up.value().reshape(&[height, width]);
    let lo = v.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.map(|x| (x - lo) / (hi - lo))
    } else {
        Array::zeros(&[height, width])
    }
}

pub fn gray_image(normalized: &Array) -> GrayImage {
    let (h, w) = (normalized.shape()[0], normalized.shape()[1]);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(normalized.data()[y as usize * w + x as usize] * 255.0).round() as u8])
    })
}

/// Half-and-half blend of the source with the jet-coloured map.
pub fn overlay_image(source: &RgbImage, normalized: &Array) -> RgbImage {
    let w = normalized.shape()[1];
    RgbImage::from_fn(source.width(), source.height(), |x, y| {
        let c = jet(normalized.data()[y as usize * w + x as usize]);
        let s = source.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|i| ((u16::from(s[i]) + u16::from(c[i])) / 2) as u8))
    })
}

pub fn attention_file_name(split: &str, image_id: &str, branch: &str) -> String {
    format!("{split}_{image_id}_{branch}.png")
}

/// Paths of one exported map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportedMap {
    pub gray: PathBuf,
    pub overlay: PathBuf,
}

pub fn write_map(dir: &Path, split: &str, image_id: &str, branch: &str, map: &Array, source: &RgbImage) -> Result<ExportedMap> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let norm = resize_normalized(map, source.height() as usize, source.width() as usize);
    let gray = dir.join(attention_file_name(split, image_id, branch));
    let overlay = dir.join(format!("{split}_{image_id}_{branch}_overlay.png"));
    let save_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| Error::Image { path: p, source }
    };
    gray_image(&norm).save(&gray).map_err(save_err(&gray))?;
    overlay_image(source, &norm).save(&overlay).map_err(save_err(&overlay))?;
    Ok(ExportedMap { gray, overlay })
}

/// `(split, image id)` from a dataset path: the parent directory when it
/// is a split name (otherwise `input`) and the file stem.
pub fn image_key(path: &Path) -> (String, String) {
    let split = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .filter(|n| matches!(*n, "train" | "query" | "gallery"))
        .unwrap_or("input")
        .to_string();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    (split, id)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

/// Identification attention of one image for class index `class` (eval mode).
pub fn identification_map(model: &CasnModel, image: &Array, class: usize) -> Result<Array> {
    if class >= model.num_classes() {
        return Err(Error::InvalidLabel {
            label: class,
            bound: model.num_classes(),
        });
    }
    let was_training = model.is_training();
    model.set_training(false);
    let result = (|| -> Result<Array> {
        let features = model.extract_features(&stack(&[image])?)?;
        let logits = model.ide_head(&features.vector)?;
        let score = logits.0.narrow(1, class, 1).sum_all();
        let cam = grad_cam(&score, &features.maps, false)?;
        Ok(cam.map.get(0))
    })();
    model.set_training(was_training);
    result
}

/// Most probable class of one image (eval mode).
pub fn predict_class(model: &CasnModel, image: &Array) -> Result<usize> {
    let was_training = model.is_training();
    model.set_training(false);
    let result = casn_grad::no_grad(|| -> Result<usize> {
        let f = model.extract_features(&stack(&[image])?)?;
        let logits = model.ide_head(&f.vector)?;
        let row = logits.0.data();
        Ok((0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
    });
    model.set_training(was_training);
    result
}

/// Export the identification attention of the image at `path`.
pub fn export_identification(
    model: &CasnModel,
    path: &Path,
    class: usize,
    size: (usize, usize),
    out: &Path,
) -> Result<ExportedMap> {
    require(path)?;
    let rgb = load_rgb(path, size.0, size.1)?;
    let map = identification_map(model, &normalize_rgb(&rgb), class)?;
    let (split, id) = image_key(path);
    write_map(out, &split, &id, "ia", &map, &rgb)
}

/// Exported Siamese attention of a pair.
#[derive(Clone, Debug)]
pub struct PairExport {
    pub branch1: ExportedMap,
    pub branch2: ExportedMap,
    pub profiles: PathBuf,
    pub aligned1: Vec<f64>,
    pub aligned2: Vec<f64>,
    pub consistency: f64,
}

/// Export both Siamese attention maps of the pair `(first, second)` and
/// dump their aligned row profiles as text.
pub fn export_pair(
    model: &CasnModel,
    first: &Path,
    second: &Path,
    size: (usize, usize),
    trim_threshold: f64,
    align_length: Option<usize>,
    out: &Path,
) -> Result<PairExport> {
    require(first)?;
    require(second)?;
    let rgb1 = load_rgb(first, size.0, size.1)?;
    let rgb2 = load_rgb(second, size.0, size.1)?;
    let (a, b) = (normalize_rgb(&rgb1), normalize_rgb(&rgb2));
    let was_training = model.is_training();
    model.set_training(false);
    let sa = siamese_attention_maps(model, &stack(&[&a])?, &stack(&[&b])?, false);
    model.set_training(was_training);
    let sa = sa?;
    let length = align_length.unwrap_or(sa.map1().height());
    let v1 = aligned_profiles(sa.map1(), trim_threshold, length)?;
    let v2 = aligned_profiles(sa.map2(), trim_threshold, length)?;
    let consistency = spatial_consistency(&v1, &v2)?.data()[0];

    let (s1, id1) = image_key(first);
    let (s2, id2) = image_key(second);
    let branch1 = write_map(out, &s1, &id1, "b1", &sa.map1().get(0), &rgb1)?;
    let branch2 = write_map(out, &s2, &id2, "b2", &sa.map2().get(0), &rgb2)?;
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
    let (aligned1, aligned2) = (v1.row(0).to_vec(), v2.row(0).to_vec());
    let text = format!(
        "first={}\nsecond={}\nv1_aligned={}\nv2_aligned={}\nconsistency={consistency:.6}\n",
        first.display(),
        second.display(),
        join(&aligned1),
        join(&aligned2)
    );
    let profiles = out.join(format!("pair_{id1}_{id2}_profiles.txt"));
    fs::write(&profiles, text).map_err(|e| Error::io(&profiles, e))?;
    Ok(PairExport {
        branch1,
        branch2,
        profiles,
        aligned1,
        aligned2,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    #[test]
    fn resized_map_spans_unit_range() {
        let m = Array::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let r = resize_normalized(&m, 8, 4);
        assert_eq!(r.shape(), &[8, 4]);
        let lo = r.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(resize_normalized(&Array::full(&[2, 2], 4.0), 4, 4).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn keys_from_paths() {
        assert_eq!(image_key(Path::new("d/query/0001_c1_004.png")), ("query".into(), "0001_c1_004".into()));
        assert_eq!(image_key(Path::new("x.png")), ("input".into(), "x".into()));
        assert_eq!(attention_file_name("gallery", "7", "b2"), "gallery_7_b2.png");
    }
}
