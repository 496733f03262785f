use frm_core::frm::{attention_weights, pairwise_softmax, DnlBlock};
use frm_core::gradcheck::random_tensor;
use frm_core::oracle;
use frm_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn vectorized_matches_literal_loops() {
    let report = oracle::sweep(11, 4, &[4, 8], 2).unwrap();
    assert_eq!(report.cases.len(), 32);
    assert!(report.max_abs_dev() < 1e-5, "max deviation {}", report.max_abs_dev());
}

#[test]
fn vectorized_weights_match_literal_weights() {
    let (store, block) = oracle::random_block(8, 4, 5).unwrap();
    let x = random_tensor([2, 8, 3, 4], 9);
    let expect = oracle::attention_weights(&store, &block, &x);
    let mut g = Graph::<f64>::from_store(&store, false);
    let xv = g.constant(x);
    let maps = block.maps(&mut g, xv).unwrap();
    let w = attention_weights(&mut g, maps.q, maps.k, maps.m).unwrap();
    let got = g.value(w);
    for (n, rows) in expect.iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((got.at(n, 0, i, j) - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn singleton_position_doubles_the_value_transform() {
    let (store, mut block) = oracle::random_block(4, 4, 2).unwrap();
    block.residual = false;
    let x = random_tensor([2, 4, 1, 1], 3);
    let out = oracle::dnl_forward(&store, &block, &x);
    // proj(2 g(x)) = 2 W_p W_v x + 2 W_p b_v + b_p
    let mut g = Graph::<f64>::from_store(&store, false);
    let xv = g.constant(x);
    let v = block.value.forward(&mut g, xv).unwrap();
    let v2 = g.scale(v, 2.0);
    let expect = block.proj.forward(&mut g, v2).unwrap();
    assert!(g.value(expect).max_abs_diff(&out) < 1e-12);
}

fn weights_for(q: Tensor<f64>, k: Tensor<f64>, m: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let (q, k, m) = (g.constant(q), g.constant(k), g.constant(m));
    let w = attention_weights(&mut g, q, k, m).unwrap();
    g.value(w).clone()
}

#[test]
fn weight_rows_sum_to_two() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let (h, w, c) = (1 + (seed % 4) as usize, 1 + (seed / 4 % 4) as usize, 2 + (seed % 3) as usize);
        let q = random_tensor([2, c, h, w], seed);
        let k = random_tensor([2, c, h, w], seed + 100);
        let m = random_tensor([2, 1, h, w], seed + 200);
        let wt = weights_for(q, k, m);
        let [n, _, rows, cols] = wt.shape();
        for b in 0..n {
            for i in 0..rows {
                let s: f64 = (0..cols).map(|j| wt.at(b, 0, i, j)).sum();
                worst = worst.max((s - 2.0).abs());
            }
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

fn shifted(t: &Tensor<f64>, by: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(t.shape(), |n, c, h, w| t.at(n, c, h, w) + by[c])
}

#[test]
fn constant_shifts_leave_weights_unchanged() {
    let q = random_tensor([2, 3, 3, 4], 1);
    let k = random_tensor([2, 3, 3, 4], 2);
    let m = random_tensor([2, 1, 3, 4], 3);
    let base = weights_for(q.clone(), k.clone(), m.clone());
    let shift = [0.7, -1.3, 2.9];
    for variant in [
        weights_for(shifted(&q, &shift), k.clone(), m.clone()),
        weights_for(q.clone(), shifted(&k, &shift), m.clone()),
        weights_for(q.clone(), k.clone(), shifted(&m, &[5.0])),
    ] {
        assert!(variant.max_abs_diff(&base) < 1e-12);
    }
}

#[test]
fn pairwise_softmax_is_permutation_equivariant() {
    let q = random_tensor([1, 2, 2, 3], 4);
    let k = random_tensor([1, 2, 2, 3], 5);
    let perm = [4usize, 0, 5, 2, 1, 3];
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |n, c, h, w| {
            let p = perm[h * 3 + w];
            t.at(n, c, p / 3, p % 3)
        })
    };
    let mut g = Graph::<f64>::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let base = pairwise_softmax(&mut g, qv, kv).unwrap();
    let (qp, kp) = (g.constant(permute(&q)), g.constant(permute(&k)));
    let moved = pairwise_softmax(&mut g, qp, kp).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let a = g.value(moved).at(0, 0, i, j);
            let b = g.value(base).at(0, 0, perm[i], perm[j]);
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_reduction_is_config_error() {
    let mut rng = rand::thread_rng();
    let mut store = ParamStore::new();
    assert!(DnlBlock::new(&mut store, "dnl", 3, 4, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dnl_output_invariant_to_key_query_shift(seed in 0u64..1000, h in 1usize..4, w in 1usize..4) {
        let (mut store, block) = oracle::random_block(8, 4, seed).unwrap();
        let x = random_tensor([1, 8, h, w], seed + 1);
        let base = oracle::dnl_forward(&store, &block, &x);
        // shifting the query, key and unary biases moves every map by a constant
        for conv in [&block.query, &block.key, &block.unary] {
            for v in store.value_mut(conv.bias.unwrap()).data_mut() {
                *v += 0.75;
            }
        }
        let mut g = Graph::<f64>::from_store(&store, false);
        let xv = g.constant(x);
        let y = block.forward(&mut g, xv).unwrap();
        prop_assert!(g.value(y).max_abs_diff(&base) < 1e-6);
    }
}
