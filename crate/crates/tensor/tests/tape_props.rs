use clozecheck_tensor::gradcheck::check_gradients;
use clozecheck_tensor::{AdamW, AdamWConfig, Init, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_is_a_distribution_over_kept_entries(
        x in matrix(4, 6),
        keep in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 6), 4),
    ) {
        let mut mask = Tensor::zeros(vec![4, 6]);
        for (i, row) in keep.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                if !k {
                    mask.data_mut()[i * 6 + j] = f64::NEG_INFINITY;
                }
            }
        }
        let mut t = Tape::eval();
        let xv = t.constant(x);
        let p = t.masked_softmax(xv, Some(&mask), true).unwrap();
        let p = t.value(p);
        for (i, row) in keep.iter().enumerate() {
            let r = p.row(i);
            let mass: f64 = r.iter().sum();
            if row.iter().any(|&k| k) {
                prop_assert!((mass - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(mass, 0.0);
            }
            for (j, &k) in row.iter().enumerate() {
                if !k {
                    prop_assert_eq!(r[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_layer_norm_gradients(a in matrix(3, 4), b in matrix(4, 5), g in matrix(1, 5)) {
        let gain = g.reshape(vec![5]).unwrap();
        let bias = Tensor::zeros(vec![5]);
        let err = check_gradients(&[a, b, gain, bias], 1e-6, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.layer_norm(y, v[2], v[3], 1e-5)?;
            let y = t.relu(y);
            let lp = t.log_softmax(y)?;
            t.nll(lp, &[Some(0), Some(4), None], 1.0)
        })
        .unwrap();
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn frozen_parameters_survive_any_number_of_steps(steps in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let live = store.init("live", [3, 3], Init::Uniform(1.0), &mut rng);
        let frozen = store.init("frozen", [3, 3], Init::Uniform(1.0), &mut rng);
        store.get_mut(frozen).frozen = true;
        let before = store.value(frozen).clone();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        for s in 0..steps {
            let mut t = Tape::new(true, s as u64);
            let (l, f) = (t.param(&store, live), t.param(&store, frozen));
            let y = t.matmul(l, f).unwrap();
            let y = t.mul(y, y).unwrap();
            let loss = t.sum(y);
            store.zero_grad();
            t.backward(loss).accumulate(&t, &mut store);
            opt.step(&mut store, 1e-2).unwrap();
        }
        prop_assert_eq!(store.value(frozen).data(), before.data());
        prop_assert_eq!(store.get(frozen).frozen, true);
    }
}
