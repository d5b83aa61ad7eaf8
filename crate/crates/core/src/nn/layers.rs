//! Parameter registration and forward helpers shared by the victim models
//! and the attacker decoder. Parameters live in a flat [`ParamStore`] under
//! dotted names; the helpers here only agree on suffixes.

use rand::Rng;

use super::{AttnSpec, Graph, ParamStore, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

pub fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) {
    store.insert(format!("{name}.w"), Tensor::randn(d_in, d_out, INIT_STD, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(1, d_out));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(1, d, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(1, d));
}

pub fn linear(g: &mut Graph, name: &str, x: Var) -> Var {
    let w = g.named(&format!("{name}.w"));
    let b = g.named(&format!("{name}.b"));
    let h = g.matmul(x, w);
    g.add_bias(h, b)
}

pub fn layer_norm(g: &mut Graph, name: &str, x: Var) -> Var {
    let gamma = g.named(&format!("{name}.g"));
    let beta = g.named(&format!("{name}.b"));
    g.layer_norm(x, gamma, beta)
}

/// Self-attention sublayer parameters: `{name}.ln`, `.q`, `.k`, `.v`, `.proj`.
pub fn init_self_attention<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    init_layer_norm(store, &format!("{name}.ln"), d);
    init_linear(store, &format!("{name}.q"), d, d, rng);
    init_linear(store, &format!("{name}.k"), d, d, rng);
    init_linear(store, &format!("{name}.v"), d, d, rng);
    init_linear(store, &format!("{name}.proj"), d, d, rng);
}

/// Cross-attention sublayer: queries from the stream, keys/values from `memory`.
pub fn init_cross_attention<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    init_self_attention(store, name, d, rng);
}

pub fn init_ffn<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) {
    init_layer_norm(store, &format!("{name}.ln"), d);
    init_linear(store, &format!("{name}.fc1"), d, d_ff, rng);
    init_linear(store, &format!("{name}.fc2"), d_ff, d, rng);
}

/// Pre-norm self-attention: returns `x + attn(ln(x))`.
pub fn self_attention_residual(g: &mut Graph, name: &str, x: Var, spec: &AttnSpec) -> Var {
    let h = layer_norm(g, &format!("{name}.ln"), x);
    let q = linear(g, &format!("{name}.q"), h);
    let k = linear(g, &format!("{name}.k"), h);
    let v = linear(g, &format!("{name}.v"), h);
    let a = g.attention(q, k, v, spec);
    let o = linear(g, &format!("{name}.proj"), a);
    g.add(x, o)
}

/// Pre-norm cross-attention: returns `x + attn(ln(x), memory)`.
pub fn cross_attention_residual(
    g: &mut Graph,
    name: &str,
    x: Var,
    memory: Var,
    spec: &AttnSpec,
) -> Var {
    let h = layer_norm(g, &format!("{name}.ln"), x);
    let q = linear(g, &format!("{name}.q"), h);
    let k = linear(g, &format!("{name}.k"), memory);
    let v = linear(g, &format!("{name}.v"), memory);
    let a = g.attention(q, k, v, spec);
    let o = linear(g, &format!("{name}.proj"), a);
    g.add(x, o)
}

/// Raw feed-forward sublayer output `fc2(gelu(fc1(ln(x))))`, before the
/// residual add.
pub fn ffn_raw(g: &mut Graph, name: &str, x: Var) -> Var {
    let h = layer_norm(g, &format!("{name}.ln"), x);
    let h = linear(g, &format!("{name}.fc1"), h);
    let h = g.gelu(h);
    linear(g, &format!("{name}.fc2"), h)
}
