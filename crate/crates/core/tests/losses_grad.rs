mod common;

use casn::backbone::{CasnModel, ImageTensor};
use casn::data::PairBatch;
use casn::losses::{total_loss, Objective};
use casn::nn::{Module, Slot};
use casn_grad::{grad, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn set_param(model: &mut CasnModel, target: &str, index: usize, delta: f64) {
    model.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name == target {
                let mut v = p.value().clone();
                v.data_mut()[index] += delta;
                *p = Tensor::variable(v);
            }
        }
    });
}

fn permuted(batch: &PairBatch, order: &[usize]) -> PairBatch {
    let pick = |t: &ImageTensor| {
        let parts: Vec<Tensor> = order.iter().map(|&i| t.tensor().narrow(0, i, 1)).collect();
        ImageTensor::new(Tensor::cat(&parts, 0)).unwrap()
    };
    PairBatch::new(
        pick(&batch.images_a),
        pick(&batch.images_b),
        order.iter().map(|&i| batch.identity_a[i]).collect(),
        order.iter().map(|&i| batch.identity_b[i]).collect(),
    )
    .unwrap()
}

#[test]
fn total_loss_matches_the_loop_objective() {
    let mut r = rng(31);
    for case in 0..12u64 {
        let model = tiny_model(5, case);
        let batch = random_pair_batch(&mut r, 3, 5, 64, 32);
        let obj = Objective::default();
        let got = total_loss(&model, &batch, &obj).unwrap();
        let expect = objective_oracle(&model, &batch, &obj);
        assert!(close(got.total.item(), expect.total, 1e-9, 1e-12), "case {case}");
        assert!(close(got.ia.unwrap().item(), expect.ia, 1e-9, 1e-12));
        assert!(close(got.sa.loss.item(), expect.sa, 1e-9, 1e-12));
    }
}

#[test]
fn disabled_modules_leave_only_the_identity_loss() {
    let mut r = rng(2);
    let model = tiny_model(4, 2);
    let batch = random_pair_batch(&mut r, 4, 4, 64, 32);
    let mut obj = Objective {
        enable_ia: false,
        enable_sa: false,
        ..Objective::default()
    };
    let l = total_loss(&model, &batch, &obj).unwrap();
    assert_eq!(l.total.item(), l.ide.item());
    assert!(l.ia.is_none());

    obj.enable_ia = true;
    let with_ia = total_loss(&model, &batch, &obj).unwrap();
    let ia = with_ia.ia.unwrap().item();
    assert!(close(with_ia.total.item(), with_ia.ide.item() + obj.weights.lambda1 * ia, 1e-12, 0.0));

    obj.enable_ia = false;
    obj.enable_sa = true;
    let with_sa = total_loss(&model, &batch, &obj).unwrap();
    assert!(close(with_sa.total.item(), with_sa.ide.item() + obj.weights.lambda2 * with_sa.sa.loss.item(), 1e-12, 0.0));
}

#[test]
fn negative_pairs_carry_no_spatial_term() {
    let mut r = rng(3);
    let model = tiny_model(4, 3);
    let mut batch = random_pair_batch(&mut r, 3, 4, 64, 32);
    batch.identity_b = batch.identity_a.iter().map(|&i| (i + 1) % 4).collect();
    batch.same = vec![false; 3];
    let mut obj = Objective::default();
    let l0 = total_loss(&model, &batch, &obj).unwrap();
    obj.weights.sa_alpha = 10.0;
    let l1 = total_loss(&model, &batch, &obj).unwrap();
    assert!(close(l0.sa.loss.item(), l1.sa.loss.item(), 1e-12, 0.0));
    assert!(close(l0.sa.loss.item(), l0.sa.bce.item(), 1e-12, 0.0));
    assert!(l0.sa.positive_consistency.is_none());
}

#[test]
fn gradients_match_finite_differences_through_attention() {
    let mut r = rng(4);
    let mut model = tiny_model(3, 4);
    let mut batch = random_pair_batch(&mut r, 2, 3, 64, 32);
    batch.identity_b = batch.identity_a.clone();
    batch.same = vec![true, true];
    let obj = Objective::default();
    model.set_training(false);
    let params = model.named_parameters();
    let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
    let l = total_loss(&model, &batch, &obj).unwrap();
    let grads = grad(&l.total, &refs, false);
    let eps = 1e-5;
    let mut checked = 0;
    for (pi, (name, t)) in params.iter().enumerate() {
        if !(name.contains("conv") || name.contains("fc")) {
            continue;
        }
        let g = grads[pi].as_ref().unwrap().value().clone();
        for _ in 0..2 {
            let i = r.gen_range(0..t.numel());
            set_param(&mut model, name, i, eps);
            let up = total_loss(&model, &batch, &obj).unwrap().total.item();
            set_param(&mut model, name, i, -2.0 * eps);
            let down = total_loss(&model, &batch, &obj).unwrap().total.item();
            set_param(&mut model, name, i, eps);
            let fd = (up - down) / (2.0 * eps);
            assert!(close(g.data()[i], fd, 1e-3, 1e-7), "{name}[{i}]: autograd {} vs fd {fd}", g.data()[i]);
            checked += 1;
        }
    }
    assert!(checked >= 10, "only {checked} entries checked");
}

#[test]
fn identical_seeds_give_identical_losses() {
    let mut r1 = rng(9);
    let mut r2 = rng(9);
    let (b1, b2) = (random_pair_batch(&mut r1, 2, 3, 64, 32), random_pair_batch(&mut r2, 2, 3, 64, 32));
    let (m1, m2) = (tiny_model(3, 77), tiny_model(3, 77));
    let obj = Objective::default();
    assert_eq!(
        total_loss(&m1, &b1, &obj).unwrap().total.item().to_bits(),
        total_loss(&m2, &b2, &obj).unwrap().total.item().to_bits()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn total_loss_ignores_pair_order(seed in 0u64..10_000, p in 2usize..5) {
        let mut r = rng(seed);
        let model = tiny_model(4, seed);
        let batch = random_pair_batch(&mut r, p, 4, 32, 16);
        let mut order: Vec<usize> = (0..p).collect();
        order.rotate_left(1);
        let obj = Objective::default();
        let a = total_loss(&model, &batch, &obj).unwrap();
        let b = total_loss(&model, &permuted(&batch, &order), &obj).unwrap();
        prop_assert!(close(a.total.item(), b.total.item(), 1e-9, 1e-12));
        prop_assert!(close(a.ide.item(), b.ide.item(), 1e-9, 1e-12));
    }

    #[test]
    fn loss_terms_are_finite_and_bounded(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let model = tiny_model(3, seed);
        let batch = random_pair_batch(&mut r, 2, 3, 32, 16);
        let l = total_loss(&model, &batch, &Objective::default()).unwrap();
        let ia = l.ia.unwrap().item();
        prop_assert!((0.0..=1.0).contains(&ia));
        prop_assert!(l.ide.item() >= 0.0 && l.sa.bce.item() >= 0.0);
        prop_assert!(l.sa.consistency.data().iter().all(|&c| c >= 0.0 && c.is_finite()));
        prop_assert!(l.total.item().is_finite());
    }
}
