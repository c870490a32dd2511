//! Property tests over the math-core invariants.

use proptest::prelude::*;

use rsllm_core::graph::Graph;
use rsllm_core::params::ParamStore;
use rsllm_core::tensor::Tensor;
use rsllm_core::{checkpoint, init};

fn finite_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_always_sum_to_one(vals in finite_vals(24)) {
        let mut g: Graph = Graph::new(0);
        let x = g.constant(Tensor::new(vec![4, 6], vals).unwrap());
        let s = g.softmax(x).unwrap();
        for i in 0..4 {
            let row: f64 = g.value(s).values()[i * 6..(i + 1) * 6].iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax(vals in finite_vals(18)) {
        let mut g: Graph = Graph::new(0);
        let x = g.constant(Tensor::new(vec![3, 6], vals.clone()).unwrap());
        let s = g.softmax(x).unwrap();
        let x2 = g.constant(Tensor::new(vec![3, 6], vals).unwrap());
        let ls = g.log_softmax(x2).unwrap();
        for j in 0..18 {
            prop_assert!((g.value(s).values()[j].ln() - g.value(ls).values()[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn double_backward_doubles_gradients(vals in finite_vals(6)) {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::new(vec![2, 3], vals).unwrap()).unwrap();
        let mut g = Graph::new(0);
        let x = g.param(&store, p);
        let t = g.tanh(x);
        let loss = g.sum(t);
        g.backward(loss, &mut store).unwrap();
        let once = store.grad(p).unwrap().values().to_vec();
        g.backward(loss, &mut store).unwrap();
        let twice = store.grad(p).unwrap().values().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..5) {
        let dir = std::env::temp_dir()
            .join(format!("rsllm-prop-{}-{seed}-{rows}-{cols}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.ckpt");
        let mut store: ParamStore = ParamStore::new();
        let mut rng = init::seeded_rng(seed);
        store.register("w", init::normal(&mut rng, vec![rows, cols], 1.0)).unwrap();
        store.register("b", init::normal(&mut rng, vec![cols], 1.0)).unwrap();
        checkpoint::save(&store, &path).unwrap();
        let loaded: ParamStore = checkpoint::load(&path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.value, &b.value);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}

/// The generic core also instantiates at f32 (looser tolerance).
#[test]
fn f32_instantiation_smoke() {
    use rsllm_core::{Graph32, ParamStore32};
    let mut store = ParamStore32::new();
    let p = store
        .register("p", rsllm_core::tensor::Tensor::<f32>::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let mut g = Graph32::new(0);
    let x = g.param(&store, p);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss, &mut store).unwrap();
    let grad = store.grad(p).unwrap().values();
    assert!((grad[0] - 2.0).abs() < 1e-5 && (grad[1] - 4.0).abs() < 1e-5);
}
