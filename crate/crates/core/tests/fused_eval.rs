mod common;

use casn::attention::{aligned_profiles, siamese_attention_maps, spatial_consistency};
use casn::backbone::CasnModel;
use casn::data::stack;
use casn::evaluation::{evaluate, fused_distances, rank, DistanceMatrix, EvalMode, EvalSet, FusionOptions};
use casn::nn::{Module, Slot};
use casn_grad::{no_grad, Array, Tensor};
use common::*;

fn eval_set(seed: u64, n: usize, ids: &[u32], cams: &[u32]) -> EvalSet {
    let mut r = rng(seed);
    let images = random_images(&mut r, n, 64, 32);
    EvalSet {
        images: (0..n)
            .map(|i| images.tensor().value().narrow(0, i, 1).reshape(&[3, 64, 32]))
            .collect(),
        identities: ids[..n].to_vec(),
        cameras: cams[..n].to_vec(),
    }
}

fn eval_model() -> CasnModel {
    let m = tiny_model(4, 21);
    m.set_training(false);
    m
}

fn minmax_values(v: &[f64]) -> Vec<f64> {
    minmax_oracle(v)
}

#[test]
fn identical_query_and_gallery_have_zero_distance() {
    let model = eval_model();
    let q = eval_set(1, 1, &[1], &[1]);
    let g = EvalSet {
        cameras: vec![2],
        ..q.clone()
    };
    let d = fused_distances(&model, &q, &g, EvalMode::Fused, &FusionOptions::default()).unwrap();
    assert_eq!(d.feature.values(), &[0.0]);
    assert_eq!(d.attention.unwrap().values(), &[0.0]);
    assert_eq!(d.combined.values(), &[0.0]);
}

#[test]
fn feature_distances_match_the_loop_oracle_and_are_symmetric() {
    let model = eval_model();
    let q = eval_set(2, 3, &[1, 2, 3], &[1, 1, 2]);
    let g = eval_set(3, 4, &[1, 2, 3, 4], &[2, 2, 1, 1]);
    let d = fused_distances(&model, &q, &g, EvalMode::FeatureOnly, &FusionOptions::default()).unwrap();
    assert!(d.attention.is_none());
    assert_eq!(d.combined, d.feature);
    let vector = |img: &Array| {
        let maps = no_grad(|| model.extract_features(&stack(&[img]).unwrap()).unwrap().maps);
        let s = maps.shape().to_vec();
        pooled_oracle(maps.value().data(), s[1], s[2] * s[3])
    };
    for (i, a) in q.images.iter().enumerate() {
        for (j, b) in g.images.iter().enumerate() {
            let expect = l2_oracle(&vector(a), &vector(b));
            assert!(close(d.feature.get(i, j), expect, 1e-9, 1e-12), "({i},{j})");
        }
    }
    let swapped = fused_distances(&model, &g, &q, EvalMode::FeatureOnly, &FusionOptions::default()).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert!(close(swapped.feature.get(j, i), d.feature.get(i, j), 1e-12, 1e-15));
        }
    }
}

#[test]
fn fused_matrix_is_the_sum_of_normalised_exported_components() {
    let model = eval_model();
    let q = eval_set(4, 3, &[1, 2, 3], &[1, 1, 2]);
    let g = eval_set(5, 4, &[1, 2, 3, 4], &[2, 2, 1, 1]);
    let opts = FusionOptions {
        chunk: 3,
        ..FusionOptions::default()
    };
    let d = fused_distances(&model, &q, &g, EvalMode::Fused, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.feature.write(&dir.path().join("f")).unwrap();
    d.attention.as_ref().unwrap().write(&dir.path().join("a")).unwrap();
    let f = DistanceMatrix::read(&dir.path().join("f")).unwrap();
    let a = DistanceMatrix::read(&dir.path().join("a")).unwrap();
    let expect: Vec<f64> = minmax_values(f.values())
        .iter()
        .zip(minmax_values(a.values()))
        .map(|(x, y)| x + y)
        .collect();
    assert!(all_close(d.combined.values(), &expect, 1e-12, 1e-15));

    // each attention entry equals the pairwise pipeline run on that pair alone
    for (i, qi) in q.images.iter().enumerate() {
        for (j, gj) in g.images.iter().enumerate() {
            let sa = siamese_attention_maps(&model, &stack(&[qi]).unwrap(), &stack(&[gj]).unwrap(), false).unwrap();
            let h = sa.map1().height();
            let v1 = aligned_profiles(sa.map1(), opts.trim_threshold, h).unwrap();
            let v2 = aligned_profiles(sa.map2(), opts.trim_threshold, h).unwrap();
            let sc = spatial_consistency(&v1, &v2).unwrap().data()[0];
            assert!(close(a.get(i, j), sc, 1e-9, 1e-12), "({i},{j}) {} vs {sc}", a.get(i, j));
        }
    }
}

#[test]
fn constant_attention_leaves_the_feature_ranking_unchanged() {
    let mut model = eval_model();
    // a pair head with zero output weights has no positive gradient anywhere
    model.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name.starts_with("bce_head.fc2") {
                *p = Tensor::variable(Array::zeros(p.shape()));
            }
        }
    });
    let q = eval_set(6, 3, &[1, 2, 3], &[1, 1, 2]);
    let g = eval_set(7, 4, &[1, 2, 3, 1], &[2, 2, 1, 1]);
    let opts = FusionOptions::default();
    let (fd, fr, feat) = evaluate(&model, &q, &g, EvalMode::FeatureOnly, &opts, 4).unwrap();
    let (ud, ur, fused) = evaluate(&model, &q, &g, EvalMode::Fused, &opts, 4).unwrap();
    let att = ud.attention.unwrap();
    assert!(att.values().iter().all(|&v| v == att.values()[0]));
    assert_eq!(fr.order, ur.order);
    assert_eq!(fr.cmc, ur.cmc);
    assert_eq!((feat.rank1, feat.map), (fused.rank1, fused.map));
    assert_eq!(rank(&fd.combined, 10).unwrap(), fr);
}

#[test]
fn gallery_cap_and_reports() {
    let model = eval_model();
    let q = eval_set(8, 2, &[1, 2], &[1, 1]);
    let g = eval_set(9, 4, &[1, 2, 3, 4], &[2, 2, 1, 1]).truncated(2);
    assert_eq!(g.len(), 2);
    let (_, _, report) = evaluate(&model, &q, &g, EvalMode::FeatureOnly, &FusionOptions::default(), 10).unwrap();
    assert_eq!((report.queries, report.gallery), (2, 2));
    let kv = report.to_key_values();
    for key in ["mode=feature_only", "rank1=", "rank5=", "rank10=", "map=", "queries=2", "gallery=2"] {
        assert!(kv.contains(key), "{kv}");
    }
}
