//! Parameterised building blocks assembled from tape ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nn::{NodeId, ParamStore, Tape, Tensor2};

/// Gaussian matrix with standard deviation `std`.
pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor2 {
    let normal = Normal::new(0.0, std).expect("finite std");
    let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, values).expect("sized buffer")
}

/// Registers `{prefix}.w` (`fan_in x fan_out`) and `{prefix}.b`.
pub fn register_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<()> {
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), gaussian(rng, fan_in, fan_out, std))?;
    store.insert(format!("{prefix}.b"), Tensor2::zeros(1, fan_out))?;
    Ok(())
}

/// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = tape.param_named(store, &format!("{prefix}.w"))?;
    let b = tape.param_named(store, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Registers the four `d x d` projections of a multi-head attention layer
/// under `{prefix}.q`, `.k`, `.v` and `.o`. The key projection has no bias:
/// a key bias adds the same amount to every score of a query, which the
/// softmax cancels, so it would never receive a gradient.
pub fn register_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_model: usize,
    out_gain: f64,
) -> Result<()> {
    let std = 1.0 / (d_model as f64).sqrt();
    register_linear(store, rng, &format!("{prefix}.q"), d_model, d_model, 1.0)?;
    store.insert(
        format!("{prefix}.k.w"),
        gaussian(rng, d_model, d_model, std),
    )?;
    register_linear(store, rng, &format!("{prefix}.v"), d_model, d_model, 1.0)?;
    register_linear(
        store,
        rng,
        &format!("{prefix}.o"),
        d_model,
        d_model,
        out_gain,
    )?;
    Ok(())
}

/// Overwrites the attention projections under `prefix` with identities and
/// zero biases.
pub fn set_identity_attention(store: &mut ParamStore, prefix: &str, d_model: usize) -> Result<()> {
    for name in ["q", "k", "v", "o"] {
        let w = store.id(&format!("{prefix}.{name}.w"))?;
        *store.get_mut(w) = Tensor2::identity(d_model);
        if name != "k" {
            let b = store.id(&format!("{prefix}.{name}.b"))?;
            *store.get_mut(b) = Tensor2::zeros(1, d_model);
        }
    }
    Ok(())
}

/// Multi-head attention: queries from `query`, keys and values from
/// `context`, with learnable input and output projections.
pub fn multi_head_attention<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    query: NodeId,
    context: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let q = linear(tape, store, &format!("{prefix}.q"), query)?;
    let kw = tape.param_named(store, &format!("{prefix}.k.w"))?;
    let k = tape.matmul(context, kw)?;
    let v = linear(tape, store, &format!("{prefix}.v"), context)?;
    let a = tape.attention(q, k, v, heads)?;
    linear(tape, store, &format!("{prefix}.o"), a)
}
