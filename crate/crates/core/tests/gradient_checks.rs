//! Finite-difference verification of every differentiable primitive
//! and the composite blocks, on randomized shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rsllm_core::blocks::{self, AttentionWeights, GruWeights};
use rsllm_core::graph::Graph;
use rsllm_core::init::{self, seeded_rng};
use rsllm_core::params::ParamStore;
use rsllm_core::tensor::Tensor;
use rsllm_core::{finite_difference_check, Error, NodeId};

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;
const SHAPES_PER_OP: u64 = 10;

/// Keep sampled values away from kinks (relu, max ties).
fn smooth_param(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t: Tensor<f64> = init::normal(rng, shape, 1.0);
    for v in t.values_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(if *v == 0.0 { 1.0 } else { *v });
        }
    }
    t
}

/// Scalarize an arbitrary output: dot with a fixed random weight so the
/// incoming gradient is generic.
fn weighted_loss(
    g: &mut Graph<f64>,
    out: NodeId,
    weights: &Tensor<f64>,
) -> Result<NodeId, Error> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let w = g.constant(weights.clone());
    let flat_out = g.reshape(out, vec![g.value(out).len()])?;
    let flat_w = g.reshape(w, vec![weights.len()])?;
    let prod = g.mul(flat_out, flat_w)?;
    Ok(g.sum(prod))
}

/// Run the finite-difference oracle over a graph builder `build` that
/// maps bound parameter nodes to an output node.
fn check_op<B>(label: &str, mut make: impl FnMut(u64) -> (ParamStore, B))
where
    B: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, Error>,
{
    for round in 0..SHAPES_PER_OP {
        let (mut store, mut build) = make(round);
        // Freeze output weighting across FD probes of this round.
        let mut weight_cache: Option<Tensor<f64>> = None;
        let err = finite_difference_check(
            |s, with_grad| {
                let mut g = Graph::new(0);
                let nodes: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
                let out = build(&mut g, &nodes)?;
                let weights = weight_cache.get_or_insert_with(|| {
                    init::normal(&mut seeded_rng(900 + round), g.value(out).shape().to_vec(), 1.0)
                });
                let loss = weighted_loss(&mut g, out, weights)?;
                let v = g.value(loss).item();
                if with_grad {
                    g.backward(loss, s)?;
                }
                Ok(v)
            },
            &mut store,
            EPS,
            8,
            round,
        )
        .unwrap_or_else(|e| panic!("{label} round {round}: {e}"));
        assert!(err < TOL, "{label} round {round}: relative error {err}");
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

#[test]
fn grad_add_and_mul_and_scale() {
    check_op("add", |round| {
        let mut rng = seeded_rng(round);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 6));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![r, c])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.add(n[0], n[1]))
    });
    check_op("mul", |round| {
        let mut rng = seeded_rng(round + 50);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 6));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![r, c])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.mul(n[0], n[1]))
    });
    check_op("scale", |round| {
        let mut rng = seeded_rng(round + 100);
        let n = dims(&mut rng, 1, 12);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![n])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| Ok(g.scale(n[0], -1.75)))
    });
}

#[test]
fn grad_add_bias_and_sum() {
    check_op("add_bias", |round| {
        let mut rng = seeded_rng(round + 150);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 6));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.add_bias(n[0], n[1]))
    });
    check_op("sum", |round| {
        let mut rng = seeded_rng(round + 200);
        let (r, c) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| Ok(g.sum(n[0])))
    });
}

#[test]
fn grad_matmul_and_transpose() {
    check_op("matmul", |round| {
        let mut rng = seeded_rng(round + 250);
        let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![m, k])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![k, n])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.matmul(n[0], n[1]))
    });
    check_op("transpose", |round| {
        let mut rng = seeded_rng(round + 300);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 6));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.transpose(n[0]))
    });
}

#[test]
fn grad_embedding_lookup() {
    check_op("embedding", |round| {
        let mut rng = seeded_rng(round + 350);
        let (v, d, l) = (dims(&mut rng, 3, 8), dims(&mut rng, 1, 5), dims(&mut rng, 1, 6));
        let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..v)).collect();
        let mut store = ParamStore::new();
        store.register("table", smooth_param(&mut rng, vec![v, d])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.embedding(n[0], &ids))
    });
}

#[test]
fn grad_concat_and_slice() {
    check_op("concat_rows", |round| {
        let mut rng = seeded_rng(round + 400);
        let c = dims(&mut rng, 1, 5);
        let (r1, r2) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![r1, c])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![r2, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.concat_rows(&[n[0], n[1]]))
    });
    check_op("concat_cols", |round| {
        let mut rng = seeded_rng(round + 450);
        let r = dims(&mut rng, 1, 5);
        let (c1, c2) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![r, c1])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![r, c2])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.concat_cols(&[n[0], n[1]]))
    });
    check_op("concat_flat", |round| {
        let mut rng = seeded_rng(round + 500);
        let (a, b) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 6));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![a])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![b])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.concat_flat(&[n[0], n[1]]))
    });
    check_op("slice_rows", |round| {
        let mut rng = seeded_rng(round + 550);
        let (r, c) = (dims(&mut rng, 2, 6), dims(&mut rng, 1, 5));
        let start = rng.gen_range(0..r - 1);
        let len = rng.gen_range(1..=r - start);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.slice_rows(n[0], start, len))
    });
    check_op("slice_cols", |round| {
        let mut rng = seeded_rng(round + 600);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 6));
        let start = rng.gen_range(0..c - 1);
        let len = rng.gen_range(1..=c - start);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.slice_cols(n[0], start, len))
    });
}

#[test]
fn grad_activations() {
    for (label, base) in [("relu", 650u64), ("gelu", 700), ("sigmoid", 750), ("tanh", 800)] {
        check_op(label, |round| {
            let mut rng = seeded_rng(round + base);
            let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 6));
            let mut store = ParamStore::new();
            store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
            (store, move |g: &mut Graph<f64>, n: &[NodeId]| {
                Ok(match label {
                    "relu" => g.relu(n[0]),
                    "gelu" => g.gelu(n[0]),
                    "sigmoid" => g.sigmoid(n[0]),
                    _ => g.tanh(n[0]),
                })
            })
        });
    }
}

#[test]
fn grad_layer_norm() {
    check_op("layer_norm", |round| {
        let mut rng = seeded_rng(round + 850);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 8));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        store.register("gain", smooth_param(&mut rng, vec![c])).unwrap();
        store.register("bias", smooth_param(&mut rng, vec![c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.layer_norm(n[0], n[1], n[2], 1e-5))
    });
}

#[test]
fn grad_softmax_and_log_softmax() {
    check_op("softmax", |round| {
        let mut rng = seeded_rng(round + 900);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 7));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.softmax(n[0]))
    });
    check_op("log_softmax", |round| {
        let mut rng = seeded_rng(round + 950);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 7));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.log_softmax(n[0]))
    });
}

#[test]
fn grad_cross_entropy_matches_finite_differences() {
    // The spec's reference case: random logits of shape [4, 7].
    check_op("cross_entropy", |round| {
        let mut rng = seeded_rng(round + 1000);
        let (r, c) = if round == 0 { (4, 7) } else { (dims(&mut rng, 1, 5), dims(&mut rng, 2, 9)) };
        let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        let mut store = ParamStore::new();
        store.register("logits", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.cross_entropy_sum(n[0], &targets))
    });
}

#[test]
fn grad_pooling_and_cosine() {
    check_op("mean_pool_rows", |round| {
        let mut rng = seeded_rng(round + 1050);
        let (r, c) = (dims(&mut rng, 2, 6), dims(&mut rng, 1, 5));
        let start = rng.gen_range(0..r - 1);
        let len = rng.gen_range(1..=r - start);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.mean_pool_rows(n[0], start, len))
    });
    check_op("l2_normalize_rows", |round| {
        let mut rng = seeded_rng(round + 1100);
        let (r, c) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 6));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.l2_normalize_rows(n[0]))
    });
    check_op("cosine_matrix", |round| {
        let mut rng = seeded_rng(round + 1150);
        let (n_rows, d) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 6));
        let mut store = ParamStore::new();
        store.register("a", smooth_param(&mut rng, vec![n_rows, d])).unwrap();
        store.register("b", smooth_param(&mut rng, vec![n_rows, d])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| blocks::cosine_matrix(g, n[0], n[1]))
    });
}

#[test]
fn grad_diag_and_max() {
    check_op("diag", |round| {
        let mut rng = seeded_rng(round + 1200);
        let n = dims(&mut rng, 2, 6);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![n, n])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.diag(n[0]))
    });
    check_op("max_last_dim", |round| {
        let mut rng = seeded_rng(round + 1250);
        let (r, c) = (dims(&mut rng, 1, 5), dims(&mut rng, 2, 6));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![r, c])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.max_last_dim(n[0]))
    });
}

#[test]
fn grad_conv2d() {
    check_op("conv2d_valid", |round| {
        let mut rng = seeded_rng(round + 1300);
        let (h, w) = (dims(&mut rng, 3, 7), dims(&mut rng, 3, 7));
        let (nf, fh, fw) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, h.min(3)), dims(&mut rng, 1, w.min(3)));
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![h, w])).unwrap();
        store.register("k", smooth_param(&mut rng, vec![nf, fh, fw])).unwrap();
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| g.conv2d_valid(n[0], n[1]))
    });
}

#[test]
fn grad_causal_attention_block() {
    check_op("causal_self_attention", |round| {
        let mut rng = seeded_rng(round + 1350);
        let d = 8;
        let len = dims(&mut rng, 1, 5);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![len, d])).unwrap();
        for nm in ["wq", "wk", "wv", "wo"] {
            store.register(nm, init::normal(&mut rng, vec![d, d], 0.3)).unwrap();
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            store.register(nm, init::normal(&mut rng, vec![d], 0.3)).unwrap();
        }
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| {
            let w = AttentionWeights {
                wq: n[1],
                wk: n[2],
                wv: n[3],
                wo: n[4],
                bq: n[5],
                bk: n[6],
                bv: n[7],
                bo: n[8],
            };
            let mask = blocks::causal_mask(g, len);
            blocks::causal_self_attention(g, n[0], &w, 2, mask)
        })
    });
}

#[test]
fn grad_gru_cell_block() {
    check_op("gru_cell", |round| {
        let mut rng = seeded_rng(round + 1400);
        let d = dims(&mut rng, 2, 6);
        let mut store = ParamStore::new();
        store.register("x", smooth_param(&mut rng, vec![1, d])).unwrap();
        store.register("h", smooth_param(&mut rng, vec![1, d])).unwrap();
        for nm in ["w_xz", "w_hz", "w_xr", "w_hr", "w_xn", "w_hn"] {
            store.register(nm, init::normal(&mut rng, vec![d, d], 0.4)).unwrap();
        }
        for nm in ["b_z", "b_r", "b_n"] {
            store.register(nm, init::normal(&mut rng, vec![d], 0.4)).unwrap();
        }
        (store, move |g: &mut Graph<f64>, n: &[NodeId]| {
            let w = GruWeights {
                w_xz: n[2],
                w_hz: n[3],
                w_xr: n[4],
                w_hr: n[5],
                w_xn: n[6],
                w_hn: n[7],
                b_z: n[8],
                b_r: n[9],
                b_n: n[10],
            };
            blocks::gru_cell(g, n[0], n[1], &w)
        })
    });
}

#[test]
fn dropout_scales_surviving_gradients() {
    // Not a finite-difference check (the mask is stochastic); verify the
    // backward rule directly: kept coordinates get grad 1/keep.
    let mut store: ParamStore = ParamStore::new();
    let id = store.register("x", init::normal(&mut seeded_rng(1), vec![64], 1.0)).unwrap();
    let mut g = Graph::new(33);
    g.set_train(true);
    let x = g.param(&store, id);
    let y = g.dropout(x, 0.25).unwrap();
    let loss = g.sum(y);
    g.backward(loss, &mut store).unwrap();
    let out = g.value(y).values().to_vec();
    let grad = store.grad(id).unwrap().values();
    for (o, gr) in out.iter().zip(grad) {
        if *o == 0.0 {
            assert_eq!(*gr, 0.0);
        } else {
            assert!((gr - 1.0 / 0.75).abs() < 1e-12);
        }
    }
}
