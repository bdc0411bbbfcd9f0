use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinytune::tensor::{Graph, SegmentFn, Tensor, Var};
use tinytune::Result;

/// A random differentiable graph: a chain of ops over a `[3, 4]` input, each
/// binary op drawing a fresh leaf, reduced by a fixed random projection.
#[derive(Clone, Debug)]
struct Recipe {
    seed: u64,
    ops: Vec<u8>,
}

fn recipe() -> impl Strategy<Value = Recipe> {
    (any::<u64>(), prop::collection::vec(0u8..11, 1..7)).prop_map(|(seed, ops)| Recipe { seed, ops })
}

/// Leaf tensors the recipe needs, in creation order.
fn leaves(r: &Recipe) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let (mut rows, mut cols) = (3usize, 4usize);
    let mut out = vec![Tensor::randn(&[rows, cols], 1.0, &mut rng)];
    for &op in &r.ops {
        match op {
            0 => {
                let n = rng.random_range(4..7);
                out.push(Tensor::randn(&[cols, n], 0.7, &mut rng));
                cols = n;
            }
            1 | 2 => out.push(Tensor::randn(&[rows, cols], 1.0, &mut rng)),
            6 => out.push(Tensor::randn(&[cols], 1.0, &mut rng)),
            8 => std::mem::swap(&mut rows, &mut cols),
            9 => {
                let n = rng.random_range(4..7);
                out.push(Tensor::randn(&[n, cols], 0.7, &mut rng));
                cols = n;
            }
            10 => out.push(Tensor::randn(&[rows, 2], 1.0, &mut rng)),
            _ => {}
        }
    }
    out.push(Tensor::randn(&[rows, cols], 1.0, &mut rng));
    out
}

fn build(g: &mut Graph, r: &Recipe, vars: &[Var]) -> Result<Var> {
    let mut x = vars[0];
    let mut next = 1;
    let mut take = || {
        next += 1;
        vars[next - 1]
    };
    for &op in &r.ops {
        x = match op {
            0 => g.matmul(x, take())?,
            1 => g.add(x, take())?,
            2 => g.mul(x, take())?,
            3 => g.gelu(x)?,
            4 => g.softplus(x)?,
            5 => g.scale(x, 0.7)?,
            6 => g.rmsnorm(x, take())?,
            7 => g.softmax(x)?,
            8 => g.transpose(x)?,
            9 => g.matmul_nt(x, take())?,
            _ => {
                let extra = take();
                let cols = g.value(x).cols();
                let cat = g.concat(&[x, extra], 1)?;
                g.slice(cat, 1, 1, cols)?
            }
        };
    }
    let proj = vars[next];
    let y = g.mul(x, proj)?;
    g.sum(y)
}

fn eval(r: &Recipe, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, r, &vars).unwrap();
    g.value_f64(out)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn random_graphs_match_central_differences(r in recipe()) {
        let inputs = leaves(&r);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &r, &vars).unwrap();
        g.backward(out).unwrap();
        // Five-point stencil: f32 rounding in the forward pass grows as 1/h.
        let h = 1e-2f32;
        for (i, &v) in vars.iter().enumerate() {
            let analytic: Vec<f64> = g.grad(v).unwrap().iter().map(|&x| x as f64).collect();
            let mut numeric = Vec::with_capacity(analytic.len());
            for j in 0..analytic.len() {
                let mut shifted = inputs.clone();
                let orig = inputs[i].data()[j];
                let mut at = |d: f32| {
                    shifted[i].data_mut()[j] = orig + d;
                    eval(&r, &shifted)
                };
                let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
                numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h as f64));
            }
            let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
            let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
            prop_assert!(diff <= 1e-3 * scale + 1e-4, "input {i}: error {diff} at scale {scale}");
        }
    }

    #[test]
    fn same_ops_give_bitwise_equal_results(r in recipe()) {
        let inputs = leaves(&r);
        let run = || {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &r, &vars).unwrap();
            g.backward(out).unwrap();
            let grads: Vec<Vec<u32>> = vars.iter().map(|&v| g.grad(v).unwrap().iter().map(|x| x.to_bits()).collect()).collect();
            (g.value_f64(out).to_bits(), grads)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn checkpointed_segment_gives_identical_gradients(r in recipe()) {
        let inputs = leaves(&r);
        let plain = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &r, &vars).unwrap();
            g.backward(out).unwrap();
            vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect::<Vec<_>>()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let rc = r.clone();
        let seg: SegmentFn = Rc::new(move |g: &mut Graph, v: &[Var]| build(g, &rc, v));
        let out = g.checkpoint(&vars, seg).unwrap();
        g.backward(out).unwrap();
        for (v, expect) in vars.iter().zip(&plain) {
            prop_assert_eq!(g.grad(*v).unwrap(), &expect[..]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-20.0f32..20.0, 1..9), 1..5),
        shift in -50.0f32..50.0,
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(width, 0.5); r }).collect();
        let data: Vec<f32> = rows.concat();
        let shifted: Vec<f32> = data.iter().map(|x| x + shift).collect();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![rows.len(), width], data).unwrap());
        let b = g.constant(Tensor::new(vec![rows.len(), width], shifted).unwrap());
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        let (va, vb) = (g.value(sa), g.value(sb));
        for r in 0..va.rows() {
            let total: f64 = va.row(r).iter().map(|&x| x as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6, "row sum {total}");
        }
        // Shifted inputs are themselves rounded to f32, by up to half an ulp near 70.
        for (x, y) in va.data().iter().zip(vb.data()) {
            prop_assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    g.zero_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}
