//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use casn::backbone::{CasnModel, Classifier, ImageTensor, ModelConfig};
use casn::config::RunConfig;
use casn_grad::{Array, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tiny_config(classes: usize) -> ModelConfig {
    RunConfig::synthetic("unused").model_config(classes).unwrap()
}

pub fn tiny_model(classes: usize, seed: u64) -> CasnModel {
    CasnModel::new(&tiny_config(classes), seed).unwrap()
}

pub fn random_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_vec(&[n, 3, h, w], uniform(rng, n * 3 * h * w, -2.0, 2.0))).unwrap()
}

/// `|a - b| <= atol + rtol * |b|`
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * b.abs()
}

pub fn all_close(a: &[f64], b: &[f64], rtol: f64, atol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y, rtol, atol))
}

// ---- losses ----

/// `-log softmax(row)[label]` for each row.
pub fn cross_entropy_oracle(logits: &[f64], cols: usize, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            let row = &logits[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &x in row {
                s += (x - m).exp();
            }
            m + s.ln() - row[c]
        })
        .collect()
}

pub fn softmax_prob_oracle(logits: &[f64], cols: usize, row: usize, class: usize) -> f64 {
    let r = &logits[row * cols..(row + 1) * cols];
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &x in r {
        s += (x - m).exp();
    }
    (r[class] - m).exp() / s
}

// ---- classifier heads ----

fn linear_oracle(x: &[f64], n: usize, w: &Array, b: &Array) -> Vec<f64> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        for o in 0..fout {
            let mut s = b.data()[o];
            for i in 0..fin {
                s += x[r * fin + i] * w.data()[i * fout + o];
            }
            out[r * fout + o] = s;
        }
    }
    out
}

/// `fc2(relu(fc1(x)))` on `n` rows.
pub fn head_oracle(head: &Classifier, x: &[f64], n: usize) -> Vec<f64> {
    let h: Vec<f64> = linear_oracle(x, n, head.fc1.weight.value(), head.fc1.bias.value())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    linear_oracle(&h, n, head.fc2.weight.value(), head.fc2.bias.value())
}

/// Gradient of `sum_o g_o * head(x)_o` with respect to one input row `x`.
pub fn head_input_grad_oracle(head: &Classifier, x: &[f64], g: &[f64]) -> Vec<f64> {
    let (w1, b1) = (head.fc1.weight.value(), head.fc1.bias.value());
    let w2 = head.fc2.weight.value();
    let (fin, hid, fout) = (w1.shape()[0], w1.shape()[1], w2.shape()[1]);
    let mut dh = vec![0.0; hid];
    for j in 0..hid {
        let mut pre = b1.data()[j];
        for i in 0..fin {
            pre += x[i] * w1.data()[i * hid + j];
        }
        if pre > 0.0 {
            for o in 0..fout {
                dh[j] += w2.data()[j * fout + o] * g[o];
            }
        }
    }
    (0..fin)
        .map(|i| (0..hid).map(|j| w1.data()[i * hid + j] * dh[j]).sum())
        .collect()
}

// ---- Grad-CAM ----

/// Channel weights and map of one image, given `d score / d f` where
/// `f_k` is the spatial mean of `A_k` (`maps` is `[K, h, w]`).
pub fn grad_cam_oracle(maps: &[f64], k: usize, h: usize, w: usize, dsdf: &[f64]) -> (Vec<f64>, Vec<f64>) {
    // d s / d A_k(i, j) = dsdf_k / (h w) everywhere; its spatial mean is the same value.
    let alpha: Vec<f64> = (0..k).map(|c| dsdf[c] / (h * w) as f64).collect();
    let mut map = vec![0.0; h * w];
    for (p, m) in map.iter_mut().enumerate() {
        let mut s = 0.0;
        for c in 0..k {
            s += alpha[c] * maps[c * h * w + p];
        }
        *m = s.max(0.0);
    }
    (alpha, map)
}

pub fn pooled_oracle(maps: &[f64], k: usize, hw: usize) -> Vec<f64> {
    (0..k).map(|c| maps[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

// ---- masking ----

pub fn minmax_oracle(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn half_pixel(i: usize, out: usize, inp: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
    let lo = pos.floor() as usize;
    (lo, (lo + 1).min(inp - 1), pos - lo as f64)
}

/// Bilinear resize (pixel-centre convention) of an `h x w` map.
pub fn upsample_oracle(map: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = half_pixel(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = half_pixel(x, ow, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Masked copy of one `[C, H, W]` image given its raw attention map.
pub fn soft_mask_oracle(image: &[f64], c: usize, hh: usize, ww: usize, map: &[f64], h: usize, w: usize, sharp: f64, beta: f64) -> Vec<f64> {
    let up = upsample_oracle(&minmax_oracle(map), h, w, hh, ww);
    let mut out = image.to_vec();
    for ch in 0..c {
        for p in 0..hh * ww {
            let sigma = 1.0 / (1.0 + (-(sharp * (up[p] - beta))).exp());
            out[ch * hh * ww + p] *= 1.0 - sigma;
        }
    }
    out
}

// ---- profiles ----

pub fn row_max_oracle(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h)
        .map(|r| map[r * w..(r + 1) * w].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn trim_align_oracle(v: &[f64], t: f64, length: usize) -> Vec<f64> {
    let mut first = None;
    let mut last = None;
    for (i, &x) in v.iter().enumerate() {
        if x > t {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    let (a, b) = match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => (0, v.len() - 1),
    };
    let span = &v[a..=b];
    if span.len() == 1 {
        return vec![span[0]; length];
    }
    (0..length)
        .map(|o| {
            let pos = if length == 1 {
                0.0
            } else {
                o as f64 * (span.len() - 1) as f64 / (length - 1) as f64
            };
            let lo = (pos.floor() as usize).min(span.len() - 1);
            let hi = (lo + 1).min(span.len() - 1);
            let f = pos - lo as f64;
            span[lo] * (1.0 - f) + span[hi] * f
        })
        .collect()
}

pub fn l2_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s.sqrt()
}

pub fn aligned_profile_oracle(map: &[f64], h: usize, w: usize, t: f64, length: usize) -> Vec<f64> {
    trim_align_oracle(&minmax_oracle(&row_max_oracle(map, h, w)), t, length)
}

// ---- retrieval ----

pub struct Labels<'a> {
    pub qid: &'a [u32],
    pub qcam: &'a [u32],
    pub gid: &'a [u32],
    pub gcam: &'a [u32],
}

fn valid(l: &Labels, q: usize, g: usize) -> bool {
    !(l.gid[g] == l.qid[q] && l.gcam[g] == l.qcam[q])
}

/// Number of valid gallery entries ranked before `g` (distance, then index).
fn before(d: &[f64], cols: usize, l: &Labels, q: usize, g: usize) -> (usize, usize) {
    let (mut all, mut hits) = (0, 0);
    for o in 0..cols {
        if o == g || !valid(l, q, o) {
            continue;
        }
        let (a, b) = (d[q * cols + o], d[q * cols + g]);
        if a < b || (a == b && o < g) {
            all += 1;
            if l.gid[o] == l.qid[q] {
                hits += 1;
            }
        }
    }
    (all, hits)
}

/// CMC by scanning, and the number of queries without a valid match.
pub fn brute_cmc(d: &[f64], l: &Labels, max_rank: usize) -> (Vec<f64>, usize) {
    let (qn, gn) = (l.qid.len(), l.gid.len());
    let mut counts = vec![0usize; max_rank];
    let mut evaluated = 0;
    for q in 0..qn {
        let first = (0..gn)
            .filter(|&g| valid(l, q, g) && l.gid[g] == l.qid[q])
            .map(|g| before(d, gn, l, q, g).0)
            .min();
        if let Some(r) = first {
            evaluated += 1;
            for (k, c) in counts.iter_mut().enumerate() {
                if r <= k {
                    *c += 1;
                }
            }
        }
    }
    (counts.iter().map(|&c| c as f64 / evaluated as f64).collect(), qn - evaluated)
}

/// Average precision of each query (`None` without valid matches).
pub fn brute_ap(d: &[f64], l: &Labels) -> Vec<Option<f64>> {
    let (qn, gn) = (l.qid.len(), l.gid.len());
    (0..qn)
        .map(|q| {
            let mut ranked: Vec<(usize, f64)> = (0..gn)
                .filter(|&g| valid(l, q, g) && l.gid[g] == l.qid[q])
                .map(|g| {
                    let (pos, hits) = before(d, gn, l, q, g);
                    (pos, (hits + 1) as f64 / (pos + 1) as f64)
                })
                .collect();
            if ranked.is_empty() {
                return None;
            }
            ranked.sort_by_key(|r| r.0);
            Some(ranked.iter().map(|r| r.1).sum::<f64>() / ranked.len() as f64)
        })
        .collect()
}

pub fn brute_map(d: &[f64], l: &Labels) -> f64 {
    let aps: Vec<f64> = brute_ap(d, l).into_iter().flatten().collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

// ---- combined objective ----

/// Terms of the combined objective recomputed with the loops above; only
/// the extractor forward pass is delegated to the model.
pub struct ObjectiveOracle {
    pub ide: f64,
    pub ia: f64,
    pub sa: f64,
    pub total: f64,
}

pub fn objective_oracle(
    model: &CasnModel,
    batch: &casn::data::PairBatch,
    obj: &casn::losses::Objective,
) -> ObjectiveOracle {
    let p = batch.len();
    let n = 2 * p;
    let images = Tensor::cat(&[batch.images_a.tensor().clone(), batch.images_b.tensor().clone()], 0);
    let labels: Vec<usize> = batch.identity_a.iter().chain(&batch.identity_b).copied().collect();
    let maps = casn_grad::no_grad(|| model.extract_features(&ImageTensor::new(images.clone()).unwrap()).unwrap().maps);
    let s = maps.shape().to_vec();
    let (k, h, w) = (s[1], s[2], s[3]);
    let per = k * h * w;
    let a = maps.value().data();
    let f: Vec<f64> = (0..n).flat_map(|i| pooled_oracle(&a[i * per..(i + 1) * per], k, h * w)).collect();
    let classes = model.num_classes();

    let logits = head_oracle(&model.ide_head, &f, n);
    let ide = cross_entropy_oracle(&logits, classes, &labels).iter().sum::<f64>() / n as f64;

    let (c, hh, ww) = (3, images.shape()[2], images.shape()[3]);
    let mut masked = Vec::with_capacity(n * c * hh * ww);
    for i in 0..n {
        let mut g = vec![0.0; classes];
        g[labels[i]] = 1.0;
        let dsdf = head_input_grad_oracle(&model.ide_head, &f[i * k..(i + 1) * k], &g);
        let (_, cam) = grad_cam_oracle(&a[i * per..(i + 1) * per], k, h, w, &dsdf);
        let img = &images.value().data()[i * c * hh * ww..(i + 1) * c * hh * ww];
        masked.extend(soft_mask_oracle(img, c, hh, ww, &cam, h, w, obj.mask.sharpness, obj.mask.threshold));
    }
    let ia = if obj.enable_ia {
        let mmaps = casn_grad::no_grad(|| {
            model
                .extract_features(&ImageTensor::new(Tensor::from_vec(&[n, c, hh, ww], masked)).unwrap())
                .unwrap()
                .maps
        });
        let ma = mmaps.value().data();
        let mf: Vec<f64> = (0..n).flat_map(|i| pooled_oracle(&ma[i * per..(i + 1) * per], k, h * w)).collect();
        let ml = head_oracle(&model.ide_head, &mf, n);
        (0..n).map(|i| softmax_prob_oracle(&ml, classes, i, labels[i])).sum::<f64>() / n as f64
    } else {
        0.0
    };

    let fdiff: Vec<f64> = (0..p * k).map(|j| f[j] - f[p * k + j]).collect();
    let z = head_oracle(&model.bce_head, &fdiff, p);
    let pair_labels: Vec<usize> = batch.same.iter().map(|&s| usize::from(s)).collect();
    let bce = cross_entropy_oracle(&z, 2, &pair_labels);
    let length = obj.align.length.unwrap_or(h);
    let mut sa = 0.0;
    for i in 0..p {
        let dz1 = head_input_grad_oracle(&model.bce_head, &fdiff[i * k..(i + 1) * k], &[0.0, 1.0]);
        let alpha: Vec<f64> = dz1.iter().map(|&g| if g > 0.0 { 1.0 } else { 0.0 }).collect();
        let (_, m1) = grad_cam_oracle(&a[i * per..(i + 1) * per], k, h, w, &alpha);
        let (_, m2) = grad_cam_oracle(&a[(p + i) * per..(p + i + 1) * per], k, h, w, &alpha);
        let v1 = aligned_profile_oracle(&m1, h, w, obj.align.trim_threshold, length);
        let v2 = aligned_profile_oracle(&m2, h, w, obj.align.trim_threshold, length);
        let pos = if batch.same[i] { 1.0 } else { 0.0 };
        sa += bce[i] + obj.weights.sa_alpha * l2_oracle(&v1, &v2) * pos;
    }
    sa /= p as f64;

    let mut total = ide;
    if obj.enable_ia {
        total += obj.weights.lambda1 * ia;
    }
    if obj.enable_sa {
        total += obj.weights.lambda2 * sa;
    }
    ObjectiveOracle { ide, ia, sa, total }
}

/// A seeded random pair batch with `p` pairs over `classes` identities.
pub fn random_pair_batch(rng: &mut ChaCha8Rng, p: usize, classes: usize, h: usize, w: usize) -> casn::data::PairBatch {
    let a = random_images(rng, p, h, w);
    let b = random_images(rng, p, h, w);
    let ia: Vec<usize> = (0..p).map(|_| rng.gen_range(0..classes)).collect();
    let ib: Vec<usize> = ia
        .iter()
        .map(|&x| if rng.gen_bool(0.5) { x } else { rng.gen_range(0..classes) })
        .collect();
    casn::data::PairBatch::new(a, b, ia, ib).unwrap()
}
