// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks of every differentiable primitive.
//!
//! The oracle perturbs leaf values one at a time, re-runs the forward pass and
//! compares the slope with the tape's backward result. Everything runs in the
//! f64 instantiation of the tape so the comparison measures the gradient
//! rules, not single-precision rounding.

use mindpatch::autodiff::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Builds `sum(build(inputs) * proj)` and returns the maximum relative error
/// between backward and central differences over every input entry.
fn check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let proj = uniform(&mut rng, &probe);

    let eval = |vals: &[Tensor<f64>], want_grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let p = tape.constant(proj.clone());
        let prod = tape.mul(out, p).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item();
        let grads = want_grads.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .zip(vals)
                .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };

    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

fn sweep<G>(name: &str, gen: G)
where
    G: Fn(&mut ChaCha8Rng, u64) -> f64,
{
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(gen(&mut rng, seed));
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_matches_finite_differences() {
    sweep("matmul", |rng, seed| {
        let a = uniform(rng, &[4, 5]);
        let b = uniform(rng, &[5, 3]);
        check(&[a, b], seed, |t, v| t.matmul(v[0], v[1]).unwrap())
    });
}

#[test]
fn matmul_transposed_matches_finite_differences() {
    sweep("matmul_nt", |rng, seed| {
        let a = uniform(rng, &[4, 5]);
        let b = uniform(rng, &[3, 5]);
        check(&[a, b], seed, |t, v| t.matmul_nt(v[0], v[1]).unwrap())
    });
}

#[test]
fn elementwise_add_and_mul_match_finite_differences() {
    sweep("add", |rng, seed| {
        let a = uniform(rng, &[3, 4]);
        let b = uniform(rng, &[3, 4]);
        check(&[a, b], seed, |t, v| t.add(v[0], v[1]).unwrap())
    });
    sweep("mul", |rng, seed| {
        let a = uniform(rng, &[3, 4]);
        let b = uniform(rng, &[3, 4]);
        check(&[a, b], seed, |t, v| t.mul(v[0], v[1]).unwrap())
    });
}

#[test]
fn bias_and_scale_match_finite_differences() {
    sweep("add_bias", |rng, seed| {
        let x = uniform(rng, &[3, 4]);
        let b = uniform(rng, &[4]);
        check(&[x, b], seed, |t, v| t.add_bias(v[0], v[1]).unwrap())
    });
    sweep("scale", |rng, seed| {
        let x = uniform(rng, &[3, 4]);
        check(&[x], seed, |t, v| t.scale(v[0], -1.7).unwrap())
    });
}

#[test]
fn rms_norm_matches_finite_differences() {
    sweep("rms_norm", |rng, seed| {
        let x = uniform(rng, &[3, 6]);
        let g = uniform(rng, &[6]);
        check(&[x, g], seed, |t, v| t.rms_norm(v[0], v[1]).unwrap())
    });
}

#[test]
fn silu_matches_finite_differences() {
    sweep("silu", |rng, seed| {
        let x = uniform(rng, &[4, 5]);
        check(&[x], seed, |t, v| t.silu(v[0]).unwrap())
    });
}

#[test]
fn embedding_scatter_add_matches_finite_differences() {
    sweep("embedding", |rng, seed| {
        let table = uniform(rng, &[6, 4]);
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
        check(&[table], seed, move |t, v| t.embedding(v[0], &ids).unwrap())
    });
}

#[test]
fn softmax_and_causal_mask_match_finite_differences() {
    sweep("softmax", |rng, seed| {
        let x = uniform(rng, &[3, 5]);
        check(&[x], seed, |t, v| t.softmax(v[0]).unwrap())
    });
    sweep("causal_mask+softmax", |rng, seed| {
        let x = uniform(rng, &[3, 5]);
        check(&[x], seed, |t, v| {
            let m = t.causal_mask(v[0]).unwrap();
            t.softmax(m).unwrap()
        })
    });
}

#[test]
fn concat_and_slice_match_finite_differences() {
    sweep("concat_rows", |rng, seed| {
        let a = uniform(rng, &[2, 3]);
        let b = uniform(rng, &[4, 3]);
        check(&[a, b], seed, |t, v| t.concat_rows(&[v[0], v[1]]).unwrap())
    });
    sweep("concat_cols", |rng, seed| {
        let a = uniform(rng, &[3, 2]);
        let b = uniform(rng, &[3, 4]);
        check(&[a, b], seed, |t, v| t.concat_cols(&[v[0], v[1]]).unwrap())
    });
    sweep("slice_rows", |rng, seed| {
        let a = uniform(rng, &[5, 3]);
        check(&[a], seed, |t, v| t.slice_rows(v[0], 1, 4).unwrap())
    });
    sweep("slice_cols", |rng, seed| {
        let a = uniform(rng, &[3, 5]);
        check(&[a], seed, |t, v| t.slice_cols(v[0], 2, 5).unwrap())
    });
}

#[test]
fn masked_cross_entropy_matches_finite_differences() {
    sweep("cross_entropy", |rng, seed| {
        let logits = uniform(rng, &[2, 7]);
        let targets: Vec<usize> = (0..2).map(|_| rng.gen_range(0..7)).collect();
        let weights: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..1.0)).collect();
        check(&[logits], seed, move |t, v| {
            t.cross_entropy(v[0], &targets, &weights).unwrap()
        })
    });
}

#[test]
fn composite_graph_matches_finite_differences() {
    sweep("matmul->silu->ce", |rng, seed| {
        let x = uniform(rng, &[3, 4]);
        let w = uniform(rng, &[4, 6]);
        let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..6)).collect();
        check(&[x, w], seed, move |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let a = t.silu(h).unwrap();
            t.cross_entropy(a, &targets, &[1.0, 0.0, 2.0]).unwrap()
        })
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// backward(f + g) == backward(f) + backward(g)
    #[test]
    fn gradient_accumulation_is_additive(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[3, 4]);
        let w = uniform(&mut rng, &[4, 4]);

        let grads_of = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let h = tape.matmul(xv, wv).unwrap();
            let f = {
                let a = tape.silu(h).unwrap();
                tape.sum(a).unwrap()
            };
            let g = {
                let s = tape.softmax(h).unwrap();
                let m = tape.mul(s, xv).unwrap();
                tape.sum(m).unwrap()
            };
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            (grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone())
        };
        let (fx, fw) = grads_of(0);
        let (gx, gw) = grads_of(1);
        let (sx, sw) = grads_of(2);
        for ((a, b), s) in fx.data().iter().zip(gx.data()).zip(sx.data()) {
            prop_assert!((a + b - s).abs() < 1e-12);
        }
        for ((a, b), s) in fw.data().iter().zip(gw.data()).zip(sw.data()) {
            prop_assert!((a + b - s).abs() < 1e-12);
        }
    }
}
