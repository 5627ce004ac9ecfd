//! Parameterized building blocks. Each layer lives under a name prefix in
//! a [`ParameterStore`]; `init_*` registers its tensors and the matching
//! forward function records it on a [`Graph`].

use super::{Graph, Init, ParameterStore, Scalar, Tensor, Var};
use crate::error::Result;

fn p<S: Scalar>(g: &mut Graph<S>, store: &ParameterStore<S>, prefix: &str, leaf: &str) -> Result<Var> {
    g.param(store, &format!("{prefix}.{leaf}"))
}

pub fn init_linear(
    store: &mut ParameterStore<f32>,
    init: &mut Init,
    prefix: &str,
    din: usize,
    dout: usize,
    zero: bool,
) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&[din, dout])
    } else {
        init.linear(din, dout)
    };
    store.insert(format!("{prefix}.weight"), w)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]))
}

pub fn linear<S: Scalar>(g: &mut Graph<S>, store: &ParameterStore<S>, prefix: &str, x: Var) -> Result<Var> {
    let w = p(g, store, prefix, "weight")?;
    let b = p(g, store, prefix, "bias")?;
    g.linear(x, w, Some(b))
}

pub fn init_layer_norm(store: &mut ParameterStore<f32>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = p(g, store, prefix, "gain")?;
    let bias = p(g, store, prefix, "bias")?;
    g.layer_norm(x, Some(gain), Some(bias))
}

/// Two-layer GELU perceptron `din -> hidden -> dout`.
pub fn init_mlp(
    store: &mut ParameterStore<f32>,
    init: &mut Init,
    prefix: &str,
    din: usize,
    hidden: usize,
    dout: usize,
) -> Result<()> {
    init_linear(store, init, &format!("{prefix}.fc1"), din, hidden, false)?;
    init_linear(store, init, &format!("{prefix}.fc2"), hidden, dout, false)
}

pub fn mlp<S: Scalar>(g: &mut Graph<S>, store: &ParameterStore<S>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Q/K/V/output projections of a multi-head attention layer. A zero output
/// projection makes the layer contribute exactly nothing at initialization.
pub fn init_attention(
    store: &mut ParameterStore<f32>,
    init: &mut Init,
    prefix: &str,
    d: usize,
    zero_out: bool,
) -> Result<()> {
    for name in ["q", "k", "v"] {
        init_linear(store, init, &format!("{prefix}.{name}"), d, d, false)?;
    }
    init_linear(store, init, &format!("{prefix}.o"), d, d, zero_out)
}

/// Multi-head attention of `queries: [B, Lq, d]` over `keys_values: [B, Lk, d]`.
/// No positional terms are added here, so output rows depend on the
/// key/value rows only as a set.
pub fn attention<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, store, &format!("{prefix}.q"), queries)?;
    let k = linear(g, store, &format!("{prefix}.k"), keys_values)?;
    let v = linear(g, store, &format!("{prefix}.v"), keys_values)?;
    let a = g.attention(q, k, v, heads)?;
    linear(g, store, &format!("{prefix}.o"), a)
}
