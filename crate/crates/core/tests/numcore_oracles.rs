//! Brute-force oracles and finite-difference gradient checks for the tensor
//! engine. The oracles here are written independently of the graph kernels
//! they verify.

use opcrash_core::numcore::gradcheck::gradcheck;
use opcrash_core::numcore::kernels::softmax_axis;
use opcrash_core::numcore::{Graph, NodeId, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_passthrough() {
    let mut g = Graph::<f64>::new();
    let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = Tensor::from_vec(&[2, 3], vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0]).unwrap();
    let i = g.leaf(eye);
    let an = g.leaf(a.clone());
    let y = g.matmul(i, an).unwrap();
    assert_eq!(g.value(y).data(), a.data());
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(99);
    let a = Tensor::<f64>::rand_uniform(&[5, 4], -2.0, 2.0, &mut r);
    let b = Tensor::<f64>::rand_uniform(&[4, 3], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let an = g.leaf(a.clone());
    let bn = g.leaf(b.clone());
    let y = g.matmul(an, bn).unwrap();
    // independent triple loop
    for i in 0..5 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a.at2(i, k) * b.at2(k, j);
            }
            assert!((g.value(y).at2(i, j) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn softmax_uniform_on_equal_logits() {
    let t = Tensor::from_vec(&[3], vec![0.0_f64, 0.0, 0.0]).unwrap();
    let s = softmax_axis(&t, 0).unwrap();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let t = Tensor::from_vec(&[3], vec![1.0_f64, 2.0, 3.0]).unwrap();
    let s = softmax_axis(&t, 0).unwrap();
    let exps: Vec<f64> = [1.0_f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    for (a, e) in s.data().iter().zip(&exps) {
        assert!((a - e / total).abs() < 1e-12);
    }
}

#[test]
fn mlp_two_layer_matches_hand_rolled_forward() {
    use opcrash_core::numcore::nn::Mlp;
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut r);
    let x = Tensor::<f64>::rand_uniform(&[2, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let y = mlp.apply(&mut g, &store, xn).unwrap();

    // hand-rolled: affine, tanh-form gelu, affine
    let gelu = |v: f64| {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
    };
    let w0 = store.get(mlp.layers[0].w);
    let b0 = store.get(mlp.layers[0].b);
    let w1 = store.get(mlp.layers[1].w);
    let b1 = store.get(mlp.layers[1].b);
    for row in 0..2 {
        let mut hidden = [0.0f64; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = b0.data()[j];
            for k in 0..3 {
                acc += x.at2(row, k) * w0.at2(k, j);
            }
            *h = gelu(acc);
        }
        for j in 0..2 {
            let mut acc = b1.data()[j];
            for (k, &h) in hidden.iter().enumerate() {
                acc += h * w1.at2(k, j);
            }
            assert!((g.value(y).at2(row, j) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 4], 7.3));
    let gain = g.leaf(Tensor::full(&[4], 1.0));
    let bias = g.leaf(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for &v in g.value(y).data() {
        assert!(v.abs() < 1e-10);
    }
}

#[test]
fn layer_norm_matches_formula_oracle() {
    let vals = [0.3_f64, -1.2, 2.5, 0.9];
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[1, 4], vals.to_vec()).unwrap());
    let gain = g.leaf(Tensor::from_vec(&[4], vec![2.0, 1.0, 0.5, -1.0]).unwrap());
    let bias = g.leaf(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(x, gain, bias).unwrap();
    let mean: f64 = vals.iter().sum::<f64>() / 4.0;
    let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    let istd = 1.0 / (var + 1e-5).sqrt();
    let gains = [2.0, 1.0, 0.5, -1.0];
    let biases = [0.1, 0.2, 0.3, 0.4];
    for j in 0..4 {
        let expect = (vals[j] - mean) * istd * gains[j] + biases[j];
        assert!((g.value(y).at2(0, j) - expect).abs() < 1e-10);
    }
}

#[test]
fn layer_norm_pre_affine_statistics() {
    // rows with unit-or-larger variance so the 1e-5 epsilon bound applies
    let vals: Vec<f64> = (0..48).map(|i| (i % 8) as f64 + 0.1 * (i / 8) as f64).collect();
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[6, 8], vals).unwrap());
    let gain = g.leaf(Tensor::full(&[8], 1.0));
    let bias = g.leaf(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for i in 0..6 {
        let row: Vec<f64> = (0..8).map(|j| g.value(y).at2(i, j)).collect();
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

/// Gradient check a loss builder over several seeds; all ops funnel through
/// a weighted sum so gradients are dense.
fn check_op<F>(name: &str, build_with_seed: impl Fn(u64) -> (ParamStore<f64>, F))
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
{
    for seed in 0..10u64 {
        let (mut store, build) = build_with_seed(seed);
        let report = gradcheck(&mut store, build, 4, FD_EPS, seed);
        assert!(
            report.max_rel_err < FD_TOL,
            "{name} seed {seed}: max rel err {}",
            report.max_rel_err
        );
    }
}

fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed ^ 0xabcdef);
    let w = g.leaf(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut r));
    let prod = g.mul(y, w).unwrap();
    g.sum_all(prod)
}

#[test]
fn gradcheck_matmul_family() {
    check_op("matmul", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let y = g.matmul(an, bn).unwrap();
            weighted_sum(g, y, seed)
        })
    });
    check_op("matmul_tn", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let y = g.matmul_tn(an, bn).unwrap();
            weighted_sum(g, y, seed)
        })
    });
    check_op("matmul_nt", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let y = g.matmul_nt(an, bn).unwrap();
            weighted_sum(g, y, seed)
        })
    });
}

#[test]
fn gradcheck_elementwise_family() {
    check_op("add_sub_mul_scale", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let sum = g.add(an, bn).unwrap();
            let diff = g.sub(an, bn).unwrap();
            let prod = g.mul(sum, diff).unwrap();
            let scaled = g.scale(prod, 0.7);
            weighted_sum(g, scaled, seed)
        })
    });
    check_op("gelu_sigmoid", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[4, 2], -2.0, 2.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let ge = g.gelu(an);
            let si = g.sigmoid(ge);
            weighted_sum(g, si, seed)
        })
    });
    check_op("sqrt", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 2], 0.5, 2.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let sq = g.mul(an, an).unwrap();
            let rt = g.sqrt(sq).unwrap();
            weighted_sum(g, rt, seed)
        })
    });
    check_op("add_bias", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        let b = store.register("bias", Tensor::rand_uniform(&[4], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let y = g.add_bias(an, bn).unwrap();
            weighted_sum(g, y, seed)
        })
    });
}

#[test]
fn gradcheck_normalization_family() {
    check_op("softmax", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let y = g.softmax(an).unwrap();
            weighted_sum(g, y, seed)
        })
    });
    check_op("col_normalize", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[4, 3], -2.0, 2.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let sm = g.softmax(an).unwrap();
            let y = g.col_normalize(sm).unwrap();
            weighted_sum(g, y, seed)
        })
    });
    check_op("layer_norm", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::rand_uniform(&[3, 6], -2.0, 2.0, &mut r));
        let gain = store.register("gain", Tensor::rand_uniform(&[6], 0.5, 1.5, &mut r));
        let bias = store.register("bias", Tensor::rand_uniform(&[6], -0.5, 0.5, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xn = s.inject(g, x);
            let gn = s.inject(g, gain);
            let bn = s.inject(g, bias);
            let y = g.layer_norm(xn, gn, bn).unwrap();
            weighted_sum(g, y, seed)
        })
    });
}

#[test]
fn gradcheck_structural_family() {
    check_op("slice_concat_reshape", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let left = g.slice_cols(an, 0, 2).unwrap();
            let right = g.slice_cols(an, 4, 2).unwrap();
            let cat = g.concat_cols(&[left, right]).unwrap(); // 3 x 4
            let stacked = g.concat_rows(&[cat, bn]).unwrap(); // 5 x 4
            let reshaped = g.reshape(stacked, &[4, 5]).unwrap();
            weighted_sum(g, reshaped, seed)
        })
    });
    check_op("sum_all_and_gate", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut r));
        let alpha = store.register("alpha", Tensor::rand_uniform(&[1], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let an = s.inject(g, a);
            let bn = s.inject(g, b);
            let al = s.inject(g, alpha);
            let sig = g.sigmoid(al);
            let mix = g.gate_mix(an, bn, sig).unwrap();
            weighted_sum(g, mix, seed)
        })
    });
}

#[test]
fn gradcheck_attention_family() {
    check_op("attention", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let q = store.register("q", Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut r));
        let k = store.register("k", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        let v = store.register("v", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let qn = s.inject(g, q);
            let kn = s.inject(g, k);
            let vn = s.inject(g, v);
            let y = g.attention(qn, kn, vn, 2).unwrap();
            weighted_sum(g, y, seed)
        })
    });
    check_op("flare_core", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let k = store.register("k", Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut r));
        let v = store.register("v", Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut r));
        let q = store.register("g", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let kn = s.inject(g, k);
            let vn = s.inject(g, v);
            let qn = s.inject(g, q);
            let y = g.flare_core(kn, vn, qn, 2).unwrap();
            weighted_sum(g, y, seed)
        })
    });
    check_op("slice_aggregate_scatter", |seed| {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let logits = store.register("logits", Tensor::rand_uniform(&[5, 6], -1.0, 1.0, &mut r));
        let x = store.register("x", Tensor::rand_uniform(&[5, 4], -1.0, 1.0, &mut r));
        (store, move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let ln = s.inject(g, logits);
            let xn = s.inject(g, x);
            let grouped = g.reshape(ln, &[10, 3]).unwrap();
            let soft = g.softmax(grouped).unwrap();
            let back = g.reshape(soft, &[5, 6]).unwrap();
            let sw = g.col_normalize(back).unwrap();
            let t = g.slice_aggregate(sw, xn, 2).unwrap();
            let y = g.slice_scatter(sw, t, 2).unwrap();
            weighted_sum(g, y, seed)
        })
    });
}

#[test]
fn forward_and_gradients_are_bit_deterministic() {
    let run = || {
        let mut r = rng(7);
        let mut store = ParamStore::<f32>::new();
        let a = store.register("a", Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut r));
        let b = store.register("b", Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut r));
        let mut g = Graph::new();
        let an = store.inject(&mut g, a);
        let bn = store.inject(&mut g, b);
        let mm = g.matmul(an, bn).unwrap();
        let sm = g.softmax(mm).unwrap();
        let fl = g.flare_core(sm, an, bn, 2).unwrap();
        let loss = g.sum_all(fl);
        g.backward(loss).unwrap();
        let mut out = g.value(loss).data().to_vec();
        out.extend_from_slice(g.grad(an).unwrap().data());
        out.extend_from_slice(g.grad(bn).unwrap().data());
        out
    };
    let x = run();
    let y = run();
    assert_eq!(x, y, "bitwise determinism violated");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_f32(vals in proptest::collection::vec(-30.0f32..30.0, 2..40)) {
        let n = vals.len();
        let t = Tensor::<f32>::from_vec(&[1, n], vals).unwrap();
        let s = softmax_axis(&t, 1).unwrap();
        let total: f64 = s.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_f64(vals in proptest::collection::vec(-30.0f64..30.0, 2..40)) {
        let n = vals.len();
        let t = Tensor::<f64>::from_vec(&[1, n], vals).unwrap();
        let s = softmax_axis(&t, 1).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(
        vals in proptest::collection::vec(-10.0f64..10.0, 4..12),
        shift in -50.0f64..50.0,
    ) {
        let n = vals.len();
        let t = Tensor::<f64>::from_vec(&[1, n], vals.clone()).unwrap();
        let shifted = Tensor::<f64>::from_vec(&[1, n], vals.iter().map(|v| v + shift).collect()).unwrap();
        let a = softmax_axis(&t, 1).unwrap();
        let b = softmax_axis(&shifted, 1).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn matmul_is_associative_at_f64(
        a_vals in proptest::collection::vec(-2.0f64..2.0, 9..=9),
        b_vals in proptest::collection::vec(-2.0f64..2.0, 9..=9),
        c_vals in proptest::collection::vec(-2.0f64..2.0, 9..=9),
    ) {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[3, 3], a_vals).unwrap());
        let b = g.leaf(Tensor::from_vec(&[3, 3], b_vals).unwrap());
        let c = g.leaf(Tensor::from_vec(&[3, 3], c_vals).unwrap());
        let ab = g.matmul(a, b).unwrap();
        let ab_c = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let a_bc = g.matmul(a, bc).unwrap();
        prop_assert!(g.value(ab_c).max_abs_diff(g.value(a_bc)) < 1e-10);
    }
}
