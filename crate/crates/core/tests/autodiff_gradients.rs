//! Finite-difference checks for every primitive and a few composites.

use comanip::autodiff::{backward, eval_graph, grad_check, GradCheckConfig, Graph, NodeId, Params, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
}

/// Contracts `node` against a fixed random tensor so every entry gets a distinct weight.
fn project(g: &mut Graph, node: NodeId, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let w = g.constant(random(shape, rng));
    let m = g.mul(node, w);
    g.sum(m)
}

fn check(g: &Graph, out: NodeId, params: &Params) -> f64 {
    let report = grad_check(g, out, params, &Params::new(), GradCheckConfig::default()).unwrap();
    report.max_rel_err
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    MatMul,
    MatMulNt,
    MatMulTn,
    BatchedShared,
    Add,
    AddBroadcast,
    Mul,
    MulBroadcast,
    Concat,
    Softmax,
    LayerNorm,
    Gelu,
    Exp,
    Log,
    Sum,
    SumAxis,
    Mean,
    MeanAxis,
    Scale,
    Reshape,
    Slice,
}

const ALL: [Prim; 21] = [
    Prim::MatMul,
    Prim::MatMulNt,
    Prim::MatMulTn,
    Prim::BatchedShared,
    Prim::Add,
    Prim::AddBroadcast,
    Prim::Mul,
    Prim::MulBroadcast,
    Prim::Concat,
    Prim::Softmax,
    Prim::LayerNorm,
    Prim::Gelu,
    Prim::Exp,
    Prim::Log,
    Prim::Sum,
    Prim::SumAxis,
    Prim::Mean,
    Prim::MeanAxis,
    Prim::Scale,
    Prim::Reshape,
    Prim::Slice,
];

fn primitive_error(prim: Prim, r: usize, c: usize, k: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut p = Params::new();
    let x = g.param("x");
    let (out, out_shape) = match prim {
        Prim::MatMul | Prim::MatMulNt | Prim::MatMulTn => {
            let y = g.param("y");
            let (xs, ys, ta, tb) = match prim {
                Prim::MatMul => ([r, k], [k, c], false, false),
                Prim::MatMulNt => ([r, k], [c, k], false, true),
                _ => ([k, r], [k, c], true, false),
            };
            p.insert("x", random(&xs, &mut rng));
            p.insert("y", random(&ys, &mut rng));
            (g.matmul_ex(x, y, ta, tb), vec![r, c])
        }
        Prim::BatchedShared => {
            let y = g.param("y");
            p.insert("x", random(&[3, r, k], &mut rng));
            p.insert("y", random(&[k, c], &mut rng));
            (g.matmul(x, y), vec![3, r, c])
        }
        Prim::Add | Prim::Mul | Prim::AddBroadcast | Prim::MulBroadcast => {
            let y = g.param("y");
            p.insert("x", random(&[r, c], &mut rng));
            let ys = if matches!(prim, Prim::Add | Prim::Mul) {
                vec![r, c]
            } else {
                vec![c]
            };
            p.insert("y", random(&ys, &mut rng));
            let n = if matches!(prim, Prim::Add | Prim::AddBroadcast) {
                g.add(x, y)
            } else {
                g.mul(x, y)
            };
            (n, vec![r, c])
        }
        Prim::Concat => {
            let y = g.param("y");
            p.insert("x", random(&[r, c], &mut rng));
            p.insert("y", random(&[r, k], &mut rng));
            (g.concat(&[x, y], 1), vec![r, c + k])
        }
        Prim::Softmax => {
            p.insert("x", random(&[r, c], &mut rng).map(|v| 3.0 * v));
            (g.softmax(x), vec![r, c])
        }
        Prim::LayerNorm => {
            p.insert("x", random(&[r, c.max(2)], &mut rng));
            (g.layer_norm(x, 1e-5), vec![r, c.max(2)])
        }
        Prim::Gelu => {
            p.insert("x", random(&[r, c], &mut rng).map(|v| 3.0 * v));
            (g.gelu(x), vec![r, c])
        }
        Prim::Exp => {
            p.insert("x", random(&[r, c], &mut rng));
            (g.exp(x), vec![r, c])
        }
        Prim::Log => {
            p.insert("x", positive(&[r, c], &mut rng));
            (g.log(x), vec![r, c])
        }
        Prim::Sum | Prim::Mean => {
            p.insert("x", random(&[r, c], &mut rng));
            let n = if matches!(prim, Prim::Sum) { g.sum(x) } else { g.mean(x) };
            (n, vec![1])
        }
        Prim::SumAxis | Prim::MeanAxis => {
            p.insert("x", random(&[r, c, 2], &mut rng));
            let n = if matches!(prim, Prim::SumAxis) {
                g.sum_axis(x, 1)
            } else {
                g.mean_axis(x, 1)
            };
            (n, vec![r, 1, 2])
        }
        Prim::Scale => {
            p.insert("x", random(&[r, c], &mut rng));
            (g.scale(x, -2.5), vec![r, c])
        }
        Prim::Reshape => {
            p.insert("x", random(&[r, c], &mut rng));
            (g.reshape(x, &[c, r]), vec![c, r])
        }
        Prim::Slice => {
            p.insert("x", random(&[r, c + 2], &mut rng));
            (g.slice(x, 1, 1, c + 1), vec![r, c])
        }
    };
    let s = project(&mut g, out, &out_shape, &mut rng);
    check(&g, s, &p)
}

#[test]
fn every_primitive_at_16_by_16() {
    for (i, prim) in ALL.iter().enumerate() {
        let err = primitive_error(*prim, 16, 16, 16, i as u64);
        assert!(err < 1e-4, "{prim:?}: rel err {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn primitives_match_finite_differences(
        which in 0usize..ALL.len(),
        r in 1usize..=16,
        c in 1usize..=16,
        k in 1usize..=16,
        seed in any::<u64>(),
    ) {
        let err = primitive_error(ALL[which], r, c, k, seed);
        prop_assert!(err < 1e-4, "{:?} {}x{}x{}: {}", ALL[which], r, c, k, err);
    }
}

#[test]
fn matmul_gradient_on_4x4_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let a = g.param("a");
    let b = g.input("b");
    let ab = g.matmul(a, b);
    let s = g.sum(ab);
    let mut p = Params::new();
    p.insert("a", random(&[4, 4], &mut rng));
    let mut data = Params::new();
    data.insert("b", random(&[4, 4], &mut rng));
    let report = grad_check(&g, s, &p, &data, GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn two_layer_mlp_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.input("x");
    let h = g.linear(x, "l1");
    let h = g.gelu(h);
    let y = g.linear(h, "l2");
    let t = g.input("target");
    let d = g.sub(y, t);
    let sq = g.square(d);
    let loss = g.mean(sq);
    let mut p = Params::new();
    p.add_linear("l1", 5, 8, &mut rng);
    p.add_linear("l2", 8, 3, &mut rng);
    for (_, v) in p.iter_mut() {
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
    }
    let mut data = Params::new();
    data.insert("x", random(&[7, 5], &mut rng));
    data.insert("target", random(&[7, 3], &mut rng));
    let report = grad_check(&g, loss, &p, &data, GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.params.len(), 4);
}

#[test]
fn softmax_entropy_composite_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.param("logits");
    let p = g.softmax(x);
    let eps = g.constant(Tensor::scalar(f64::MIN_POSITIVE));
    let pe = g.add(p, eps);
    let lp = g.log(pe);
    let plp = g.mul(p, lp);
    let h = g.sum_axis(plp, 1);
    let neg = g.scale(h, -1.0);
    let w = g.softmax(neg);
    let out = project(&mut g, w, &[3, 1], &mut rng);
    let mut params = Params::new();
    params.insert("logits", random(&[3, 6], &mut rng).map(|v| 2.0 * v));
    let report = grad_check(&g, out, &params, &Params::new(), GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn shared_leaf_gradients_accumulate() {
    // x appears twice: d/dx Σ(x∘x) through two separate leaves with the same name.
    let mut g = Graph::new();
    let a = g.param("x");
    let b = g.param("x");
    let m = g.mul(a, b);
    let s = g.sum(m);
    let mut p = Params::new();
    p.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let ev = eval_graph(&g, &p).unwrap();
    let grads = backward(&g, &ev, s).unwrap();
    assert_eq!(grads["x"].data(), &[2.0, 4.0]);
}
