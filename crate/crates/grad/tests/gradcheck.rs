use std::rc::Rc;

use casn_grad::{grad, no_grad, numeric_gradient, Array, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn assert_close(a: &Array, b: &Array, rtol: f64, atol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(
            (x - y).abs() <= atol + rtol * y.abs(),
            "{what}[{i}]: analytic {x} vs numeric {y}"
        );
    }
}

/// First-order check of `f` at each input, plus a second-order check of
/// `x -> <v, grad f(x)>` for a fixed random direction `v`.
fn check<F>(inputs: &[Array], f: F)
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scalar = |vals: &[Array]| -> f64 {
        no_grad(|| {
            let ts: Vec<Tensor> = vals.iter().map(|v| Tensor::constant(v.clone())).collect();
            f(&ts).item()
        })
    };
    let vars: Vec<Tensor> = inputs.iter().map(|v| Tensor::variable(v.clone())).collect();
    let out = f(&vars);
    let refs: Vec<&Tensor> = vars.iter().collect();
    let grads = grad(&out, &refs, true);
    let dirs: Vec<Array> = inputs.iter().map(|v| random(v.shape(), &mut rng)).collect();

    for (k, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("input connected");
        let num = numeric_gradient(&inputs[k], 1e-6, |probe| {
            let mut vals = inputs.to_vec();
            vals[k] = probe.clone();
            scalar(&vals)
        });
        assert_close(g.value(), &num, 1e-5, 1e-7, &format!("grad[{k}]"));
    }

    // h = sum_k <v_k, grad_k f>
    let mut h: Option<Tensor> = None;
    for (g, v) in grads.iter().zip(&dirs) {
        let term = g.as_ref().unwrap().mul(&Tensor::constant(v.clone())).sum_all();
        h = Some(match h {
            None => term,
            Some(acc) => acc.add(&term),
        });
    }
    let h = h.unwrap();
    if !h.requires_grad() {
        return;
    }
    let second = grad(&h, &refs, false);
    for (k, s) in second.iter().enumerate() {
        let Some(s) = s else { continue };
        let num = numeric_gradient(&inputs[k], 1e-5, |probe| {
            let mut vals = inputs.to_vec();
            vals[k] = probe.clone();
            let vs: Vec<Tensor> = vals.iter().map(|v| Tensor::variable(v.clone())).collect();
            let o = f(&vs);
            let rs: Vec<&Tensor> = vs.iter().collect();
            let gs = grad(&o, &rs, false);
            gs.iter()
                .zip(&dirs)
                .map(|(g, v)| {
                    g.as_ref()
                        .map(|g| g.data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>())
                        .unwrap_or(0.0)
                })
                .sum()
        });
        assert_close(s.value(), &num, 1e-4, 1e-6, &format!("hvp[{k}]"));
    }
}

#[test]
fn elementwise_ops_first_and_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng).map(|x| x + 2.5);
    check(&[a.clone(), b.clone()], |t| t[0].mul(&t[1]).add(&t[0].div(&t[1])).sum_all());
    check(std::slice::from_ref(&a), |t| t[0].exp().sigmoid().sum_all());
    check(std::slice::from_ref(&b), |t| t[0].ln().sqrt().square().sum_all());
    check(&[a.clone(), b.clone()], |t| t[0].sub(&t[1]).scale(3.0).add_scalar(1.0).exp().mean_all());
}

#[test]
fn broadcasting_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let bias = random(&[1, 3, 1], &mut rng);
    check(&[a.clone(), bias.clone()], |t| {
        t[0].mul(&t[1]).add(&t[1]).sum_axes(&[2]).square().mean_all()
    });
    check(std::slice::from_ref(&a), |t| t[0].max_along(1).square().sum_all());
    check(std::slice::from_ref(&a), |t| t[0].min_along(2).mul(&t[0].max_along(2)).sum_all());
    check(std::slice::from_ref(&a), |t| t[0].reshape(&[6, 4]).broadcast_to(&[6, 4]).square().sum_all());
}

#[test]
fn slicing_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[2, 4], &mut rng);
    check(&[a.clone(), b.clone()], |t| {
        let c = Tensor::cat(&[t[0].clone(), t[1].clone()], 0);
        c.narrow(0, 1, 3).square().sum_all().add(&c.pad(1, 2, 1).exp().sum_all())
    });
}

#[test]
fn matmul_and_axis_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let m = Rc::new(random(&[5, 4], &mut rng));
    check(&[a.clone(), b.clone()], |t| t[0].matmul(&t[1]).sigmoid().sum_all());
    check(std::slice::from_ref(&a), move |t| t[0].axis_matmul(1, m.clone()).t().square().sum_all());
}

#[test]
fn conv_first_and_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 2, 5, 4], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        check(&[x.clone(), w.clone()], move |t| {
            t[0].conv2d(&t[1], stride, pad).sigmoid().square().sum_all()
        });
    }
}

#[test]
fn relu_network_hessian_vector_product() {
    // Second-order terms of a ReLU network flow only through weight products.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let w1 = random(&[3, 2, 3, 3], &mut rng);
    let w2 = random(&[2, 3, 3, 3], &mut rng);
    check(&[x, w1, w2], |t| {
        t[0].conv2d(&t[1], 1, 1).relu().conv2d(&t[2], 2, 1).square().sum_all()
    });
}

#[test]
fn double_backprop_of_polynomial() {
    // z = (dy/dx)^3 + y with y = x^2 gives dz/dx = 24x^2 + 2x.
    let x = Tensor::variable(Array::scalar(2.0));
    let y = x.square();
    let gx = grad(&y, &[&x], true)[0].clone().unwrap();
    let z = gx.square().mul(&gx).add(&y);
    let dz = grad(&z, &[&x], false)[0].clone().unwrap();
    assert_eq!(dz.item(), 100.0);
}

#[test]
fn unreachable_input_yields_none_but_zero_path_yields_zero() {
    let a = Tensor::variable(Array::ones(&[3]));
    let b = Tensor::variable(Array::ones(&[3]));
    let out = a.scale(0.0).sum_all();
    let g = grad(&out, &[&a, &b], false);
    assert_eq!(g[0].as_ref().unwrap().data(), &[0.0, 0.0, 0.0]);
    assert!(g[1].is_none());
}

#[test]
fn sqrt_at_zero_has_zero_gradient() {
    let a = Tensor::variable(Array::new(vec![2], vec![0.0, 4.0]));
    let g = grad(&a.sqrt().sum_all(), &[&a], false)[0].clone().unwrap();
    assert_eq!(g.data(), &[0.0, 0.25]);
}

#[test]
fn no_grad_records_nothing() {
    let a = Tensor::variable(Array::ones(&[2]));
    let out = no_grad(|| a.exp().sum_all());
    assert!(!out.requires_grad());
    assert!(grad(&out, &[&a], false)[0].is_none());
}

proptest! {
    #[test]
    fn sum_to_inverts_broadcast_scaling(vals in proptest::collection::vec(-5.0f64..5.0, 3), reps in 1usize..5) {
        let a = Array::new(vec![1, 3], vals.clone());
        let b = a.broadcast_to(&[reps, 3]).sum_to(&[1, 3]);
        for (x, y) in b.data().iter().zip(&vals) {
            prop_assert!((x - y * reps as f64).abs() < 1e-12);
        }
    }
}
