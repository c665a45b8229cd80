use std::collections::HashMap;
use std::rc::Rc;

use crate::array::Array;
use crate::tensor::{NoGradGuard, Op, Tensor};

/// Gradients of `output` (seeded with ones) with respect to each of `inputs`.
///
/// An entry is `None` when the input is not reachable from `output` through
/// differentiable nodes. With `create_graph`, the returned gradients are
/// themselves graph nodes and can be differentiated again.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Option<Tensor>> {
    let seed = Tensor::ones(output.shape());
    grad_with_seed(output, &seed, inputs, create_graph)
}

pub fn grad_with_seed(
    output: &Tensor,
    seed: &Tensor,
    inputs: &[&Tensor],
    create_graph: bool,
) -> Vec<Option<Tensor>> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
    if !output.requires_grad() {
        return vec![None; inputs.len()];
    }
    let _guard = NoGradGuard::set(create_graph);
    let order = topo_order(output);

    let wanted: HashMap<usize, usize> = inputs.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
    let mut needed: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    for node in &order {
        let n = wanted.contains_key(&node.id())
            || node.0.parents.iter().any(|p| needed.get(&p.id()).copied().unwrap_or(false));
        needed.insert(node.id(), n);
    }

    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    let seed = if create_graph { seed.clone() } else { seed.detach() };
    grads.insert(output.id(), seed);

    for node in order.iter().rev() {
        if !needed[&node.id()] {
            continue;
        }
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let Some(op) = &node.0.op else {
            continue;
        };
        let parents = &node.0.parents;
        let want: Vec<bool> = parents
            .iter()
            .map(|p| p.requires_grad() && needed.get(&p.id()).copied().unwrap_or(false))
            .collect();
        if !want.iter().any(|&w| w) {
            continue;
        }
        let pg = vjp(op, node, parents, &g, &want);
        for ((p, w), pg) in parents.iter().zip(&want).zip(pg) {
            if !*w {
                continue;
            }
            let Some(pg) = pg else { continue };
            match grads.remove(&p.id()) {
                Some(acc) => {
                    grads.insert(p.id(), acc.add(&pg));
                }
                None => {
                    grads.insert(p.id(), pg);
                }
            }
        }
        if !wanted.contains_key(&node.id()) {
            grads.remove(&node.id());
        }
    }

    inputs.iter().map(|t| grads.get(&t.id()).cloned()).collect()
}

/// Post-order over differentiable nodes: parents precede children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in &t.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn mask_of(a: &Array, pred: impl Fn(f64) -> bool) -> Tensor {
    Tensor::constant(a.map(|x| if pred(x) { 1.0 } else { 0.0 }))
}

fn vjp(op: &Op, out: &Tensor, p: &[Tensor], g: &Tensor, want: &[bool]) -> Vec<Option<Tensor>> {
    let only = |w: bool, f: &dyn Fn() -> Tensor| if w { Some(f()) } else { None };
    match op {
        Op::Add => vec![
            only(want[0], &|| g.sum_to(p[0].shape())),
            only(want[1], &|| g.sum_to(p[1].shape())),
        ],
        Op::Sub => vec![
            only(want[0], &|| g.sum_to(p[0].shape())),
            only(want[1], &|| g.neg().sum_to(p[1].shape())),
        ],
        Op::Mul => vec![
            only(want[0], &|| g.mul(&p[1]).sum_to(p[0].shape())),
            only(want[1], &|| g.mul(&p[0]).sum_to(p[1].shape())),
        ],
        Op::Div => vec![
            only(want[0], &|| g.div(&p[1]).sum_to(p[0].shape())),
            only(want[1], &|| g.mul(out).div(&p[1]).neg().sum_to(p[1].shape())),
        ],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Exp => vec![Some(g.mul(out))],
        Op::Log => vec![Some(g.div(&p[0]))],
        Op::Sqrt => {
            let nz = mask_of(out.value(), |x| x > 0.0);
            let z = mask_of(out.value(), |x| x <= 0.0);
            vec![Some(g.mul(&nz).div(&out.scale(2.0).add(&z)))]
        }
        Op::Relu => vec![Some(g.mul(&mask_of(p[0].value(), |x| x > 0.0)))],
        Op::Sigmoid => vec![Some(g.mul(out).mul(&out.neg().add_scalar(1.0)))],
        Op::SumTo => vec![Some(g.broadcast_to(p[0].shape()))],
        Op::BroadcastTo => vec![Some(g.sum_to(p[0].shape()))],
        Op::Reshape => vec![Some(g.reshape(p[0].shape()))],
        Op::Extreme { mask } => {
            vec![Some(g.broadcast_to(p[0].shape()).mul(&Tensor::constant((**mask).clone())))]
        }
        Op::Narrow { axis, start } => {
            let n = p[0].shape()[*axis];
            let len = out.shape()[*axis];
            vec![Some(g.pad(*axis, *start, n - start - len))]
        }
        Op::Pad { axis, before } => vec![Some(g.narrow(*axis, *before, p[0].shape()[*axis]))],
        Op::MatMul => vec![
            only(want[0], &|| g.matmul(&p[1].t())),
            only(want[1], &|| p[0].t().matmul(g)),
        ],
        Op::Transpose => vec![Some(g.t())],
        Op::AxisMatmul { axis, matrix } => {
            vec![Some(g.axis_matmul(*axis, Rc::new(matrix.transpose2d())))]
        }
        Op::Conv { geom } => {
            let (x, w) = (&p[0], &p[1]);
            vec![
                only(want[0], &|| {
                    Tensor::conv2d_input_grad(g, w, *geom, (x.shape()[2], x.shape()[3]))
                }),
                only(want[1], &|| {
                    Tensor::conv2d_weight_grad(x, g, *geom, (w.shape()[2], w.shape()[3]))
                }),
            ]
        }
        Op::ConvInputGrad { geom } => {
            let (gy, w) = (&p[0], &p[1]);
            vec![
                only(want[0], &|| g.conv2d(w, geom.stride, geom.pad)),
                only(want[1], &|| {
                    Tensor::conv2d_weight_grad(g, gy, *geom, (w.shape()[2], w.shape()[3]))
                }),
            ]
        }
        Op::ConvWeightGrad { geom } => {
            let (x, gy) = (&p[0], &p[1]);
            vec![
                only(want[0], &|| {
                    Tensor::conv2d_input_grad(gy, g, *geom, (x.shape()[2], x.shape()[3]))
                }),
                only(want[1], &|| x.conv2d(g, geom.stride, geom.pad)),
            ]
        }
    }
}
