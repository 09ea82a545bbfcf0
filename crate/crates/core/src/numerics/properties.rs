use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn arb_matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max, any::<u64>()).prop_map(|(m, n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn([m, n], 2.0, &mut rng)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in arb_matrix(16), shift in -50.0f64..50.0, t in 0.05f64..5.0) {
        let s = softmax_rows(&x, t).unwrap();
        for row in s.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift), t).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn([m, k], 1.0, &mut rng);
        let b = Tensor::randn([k, l], 1.0, &mut rng);
        let c = Tensor::randn([l, n], 1.0, &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn composite_gradients_match_finite_differences(m in 1usize..5, d in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([m, d], 1.0, &mut rng);
        let w = Tensor::randn([d, d], 0.5, &mut rng);
        let gamma = Tensor::randn([d], 1.0, &mut rng);
        let beta = Tensor::randn([d], 1.0, &mut rng);
        let params = vec![("x".to_string(), x), ("w".to_string(), w), ("gamma".to_string(), gamma), ("beta".to_string(), beta)];
        let r = finite_diff_check(&params, |g, v| {
            let y = g.layer_norm(v[0], v[2], v[3])?;
            let y = g.linear(y, v[1])?;
            let y = g.gelu(y);
            let s = g.softmax(y, 0.8)?;
            let n = g.l2_normalize(y)?;
            let p = g.mul(s, n)?;
            Ok(g.sum(p))
        }, 1e-5, 1e-4).unwrap();
        prop_assert!(r.passed(), "{:?}", r.params);
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([3, 5], 1.0, &mut rng);
            let w = Tensor::randn([4, 5], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let wv = g.leaf(w);
            let y = g.linear(xv, wv).unwrap();
            let y = g.log_softmax(y);
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            (g.value(s).clone(), grads.wrt(xv), grads.wrt(wv))
        };
        prop_assert_eq!(run(), run());
    }
}
