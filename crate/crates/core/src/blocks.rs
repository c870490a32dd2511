//! Composite differentiable blocks built from the primitive suite:
//! causal self-attention, the GRU cell, and small helpers shared by the
//! model crates. Their backward rules come from composition.

use crate::error::Error;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x · w + b` for row-major `x [r, k]`, `w [k, n]`, `b [n]`.
pub fn affine<S: Scalar>(g: &mut Graph<S>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, Error> {
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

/// Additive causal mask: zero on and below the diagonal, a large
/// negative constant above it. Kept finite so the non-finite debug
/// check stays meaningful.
pub fn causal_mask<S: Scalar>(g: &mut Graph<S>, len: usize) -> NodeId {
    let neg = S::of(-1e9);
    let mut values = vec![S::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            values[i * len + j] = neg;
        }
    }
    g.constant(Tensor::from_rows(len, len, values).expect("mask shape"))
}

pub struct AttentionWeights {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub bq: NodeId,
    pub bk: NodeId,
    pub bv: NodeId,
    pub bo: NodeId,
}

/// Multi-head causal self-attention over `x [len, d]`. `mask` must be
/// the additive causal mask for `len` — it is a required input, not a
/// default.
pub fn causal_self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    w: &AttentionWeights,
    heads: usize,
    mask: NodeId,
) -> Result<NodeId, Error> {
    let d = g.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArg(format!("{heads} heads do not divide model width {d}")));
    }
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());

    let q = affine(g, x, w.wq, w.bq)?;
    let k = affine(g, x, w.wk, w.bk)?;
    let v = affine(g, x, w.wv, w.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let masked = g.add(scaled, mask)?;
        let attn = g.softmax(masked)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    affine(g, merged, w.wo, w.bo)
}

pub struct GruWeights {
    pub w_xz: NodeId,
    pub w_hz: NodeId,
    pub b_z: NodeId,
    pub w_xr: NodeId,
    pub w_hr: NodeId,
    pub b_r: NodeId,
    pub w_xn: NodeId,
    pub w_hn: NodeId,
    pub b_n: NodeId,
}

/// One GRU step: `x [1, d_in]`, `h [1, d]` → new hidden `[1, d]`.
pub fn gru_cell<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    h: NodeId,
    w: &GruWeights,
) -> Result<NodeId, Error> {
    let xz = g.matmul(x, w.w_xz)?;
    let hz = g.matmul(h, w.w_hz)?;
    let zs = g.add(xz, hz)?;
    let zb = g.add_bias(zs, w.b_z)?;
    let z = g.sigmoid(zb);

    let xr = g.matmul(x, w.w_xr)?;
    let hr = g.matmul(h, w.w_hr)?;
    let rs = g.add(xr, hr)?;
    let rb = g.add_bias(rs, w.b_r)?;
    let r = g.sigmoid(rb);

    let rh = g.mul(r, h)?;
    let xn = g.matmul(x, w.w_xn)?;
    let hn = g.matmul(rh, w.w_hn)?;
    let ns = g.add(xn, hn)?;
    let nb = g.add_bias(ns, w.b_n)?;
    let n = g.tanh(nb);

    // h' = (1 − z) ⊙ h + z ⊙ n
    let zn = g.mul(z, n)?;
    let zh = g.mul(z, h)?;
    let h_keep = g.sub(h, zh)?;
    g.add(h_keep, zn)
}

/// All-pairs cosine matrix `C[i, j] = cos(a_i, b_j)` for `a [n, d]`,
/// `b [m, d]`. Zero-norm rows are rejected.
pub fn cosine_matrix<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

/// Cosine similarity between two single vectors shaped `[1, d]`.
pub fn cosine_pair<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
    let m = cosine_matrix(g, a, b)?;
    g.reshape(m, vec![])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::params::ParamStore;

    #[test]
    fn attention_is_causal() {
        // Perturbing position j must not change outputs before j.
        let d = 8;
        let len = 5;
        let mut rng = init::seeded_rng(5);
        let mut store: ParamStore = ParamStore::new();
        for name in ["wq", "wk", "wv", "wo"] {
            store.register(name, init::normal(&mut rng, vec![d, d], 0.2)).unwrap();
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.register(name, init::normal(&mut rng, vec![d], 0.2)).unwrap();
        }
        let x0: Tensor = init::normal(&mut init::seeded_rng(6), vec![len, d], 1.0);

        let run = |x: &Tensor| -> Vec<f64> {
            let mut g = Graph::new(0);
            let weights = AttentionWeights {
                wq: g.param(&store, store.id("wq").unwrap()),
                wk: g.param(&store, store.id("wk").unwrap()),
                wv: g.param(&store, store.id("wv").unwrap()),
                wo: g.param(&store, store.id("wo").unwrap()),
                bq: g.param(&store, store.id("bq").unwrap()),
                bk: g.param(&store, store.id("bk").unwrap()),
                bv: g.param(&store, store.id("bv").unwrap()),
                bo: g.param(&store, store.id("bo").unwrap()),
            };
            let xn = g.constant(x.clone());
            let mask = causal_mask(&mut g, len);
            let out = causal_self_attention(&mut g, xn, &weights, 2, mask).unwrap();
            g.value(out).values().to_vec()
        };

        let base = run(&x0);
        let j = 3;
        let mut bumped = x0.clone();
        bumped.values_mut()[j * d] += 0.5;
        let moved = run(&bumped);
        for pos in 0..j {
            for c in 0..d {
                assert_eq!(base[pos * d + c], moved[pos * d + c], "position {pos} changed");
            }
        }
        let tail_changed = (j..len).any(|p| (0..d).any(|c| base[p * d + c] != moved[p * d + c]));
        assert!(tail_changed);
    }

    #[test]
    fn gru_cell_shapes_and_gate_limits() {
        let d = 4;
        let mut rng = init::seeded_rng(8);
        let mut store: ParamStore = ParamStore::new();
        for name in ["w_xz", "w_hz", "w_xr", "w_hr", "w_xn", "w_hn"] {
            store.register(name, init::normal(&mut rng, vec![d, d], 0.3)).unwrap();
        }
        for name in ["b_z", "b_r", "b_n"] {
            store.register(name, init::normal(&mut rng, vec![d], 0.3)).unwrap();
        }
        let mut g = Graph::new(0);
        let w = GruWeights {
            w_xz: g.param(&store, store.id("w_xz").unwrap()),
            w_hz: g.param(&store, store.id("w_hz").unwrap()),
            b_z: g.param(&store, store.id("b_z").unwrap()),
            w_xr: g.param(&store, store.id("w_xr").unwrap()),
            w_hr: g.param(&store, store.id("w_hr").unwrap()),
            b_r: g.param(&store, store.id("b_r").unwrap()),
            w_xn: g.param(&store, store.id("w_xn").unwrap()),
            w_hn: g.param(&store, store.id("w_hn").unwrap()),
            b_n: g.param(&store, store.id("b_n").unwrap()),
        };
        let x = g.constant(init::normal(&mut init::seeded_rng(9), vec![1, d], 1.0));
        let h = g.constant(Tensor::zeros(vec![1, d]));
        let h1 = gru_cell(&mut g, x, h, &w).unwrap();
        assert_eq!(g.shape(h1), &[1, d]);
        // From h = 0, h' = z ⊙ tanh(...) stays in (−1, 1).
        for &v in g.value(h1).values() {
            assert!(v.abs() < 1.0);
        }
    }
}
