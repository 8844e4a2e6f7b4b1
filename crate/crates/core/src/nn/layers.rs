//! Transformer building blocks assembled from tape primitives.
//!
//! Every layer comes as a `register_*` function that allocates its
//! parameters in a [`ParameterStore`] and an `apply_*` function that
//! records the forward computation on a [`Tape`]. Pre-norm residual
//! blocks throughout; attention heads are column slices of a single
//! projection.

use rand::rngs::StdRng;

use crate::nn::params::ParameterStore;
use crate::nn::tape::{Tape, TensorId};

// ---- linear ----------------------------------------------------------

pub fn register_linear(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut StdRng,
) {
    store.add_linear(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.add_bias(&format!("{prefix}.b"), fan_out);
}

pub fn apply_linear(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
) -> TensorId {
    let w = tape.param(store, &format!("{prefix}.w"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

// ---- layer norm with affine -----------------------------------------

pub fn register_layer_norm(store: &mut ParameterStore, prefix: &str, dim: usize) {
    store.insert_raw(&format!("{prefix}.g"), (1, dim), vec![1.0; dim]);
    store.add_bias(&format!("{prefix}.b"), dim);
}

pub fn apply_layer_norm(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
) -> TensorId {
    let g = tape.param(store, &format!("{prefix}.g"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let n = tape.layer_norm(x);
    let scaled = tape.mul_row(n, g);
    tape.add_row(scaled, b)
}

// ---- attention -------------------------------------------------------

/// Output of one attention application; `attn` holds the per-head
/// probability matrices (rows = queries) for inspection.
pub struct AttnOut {
    pub out: TensorId,
    pub attn: Vec<TensorId>,
}

pub fn register_mha(store: &mut ParameterStore, prefix: &str, dim: usize, rng: &mut StdRng) {
    for name in ["q", "v", "o"] {
        register_linear(store, &format!("{prefix}.{name}"), dim, dim, rng);
    }
    // The key projection carries no bias: a constant added to every key
    // shifts all scores of a query row equally and cancels in softmax,
    // so such a parameter would be exactly gradient-free.
    store.add_linear(&format!("{prefix}.k.w"), dim, dim, rng);
}

/// Multi-head attention of `q_in` (Lq×d) over `kv_in` (Lk×d), with an
/// optional additive mask (Lq×Lk; 0 = visible, −∞ = excluded).
pub fn apply_mha(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    q_in: TensorId,
    kv_in: TensorId,
    n_heads: usize,
    mask: Option<TensorId>,
) -> AttnOut {
    let (_, dim) = tape.shape(q_in);
    assert_eq!(dim % n_heads, 0, "model dim {dim} not divisible by {n_heads} heads");
    let head = dim / n_heads;
    let scale = 1.0 / (head as f64).sqrt();

    let q = apply_linear(tape, store, &format!("{prefix}.q"), q_in);
    let kw = tape.param(store, &format!("{prefix}.k.w"));
    let k = tape.matmul(kv_in, kw);
    let v = apply_linear(tape, store, &format!("{prefix}.v"), kv_in);

    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head, (h + 1) * head);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.add(scores, m),
            None => scores,
        };
        let p = tape.softmax(scores);
        probs.push(p);
        heads.push(tape.matmul(p, vh));
    }
    let cat = tape.concat_cols(&heads);
    let out = apply_linear(tape, store, &format!("{prefix}.o"), cat);
    AttnOut { out, attn: probs }
}

/// Additive causal mask: position i sees positions ≤ i.
pub fn causal_mask(tape: &mut Tape, n: usize) -> TensorId {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = f64::NEG_INFINITY;
        }
    }
    tape.constant(n, n, m)
}

// ---- feed-forward ----------------------------------------------------

pub fn register_ffn(
    store: &mut ParameterStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut StdRng,
) {
    register_linear(store, &format!("{prefix}.1"), dim, hidden, rng);
    register_linear(store, &format!("{prefix}.2"), hidden, dim, rng);
}

pub fn apply_ffn(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: TensorId) -> TensorId {
    let h = apply_linear(tape, store, &format!("{prefix}.1"), x);
    let h = tape.gelu(h);
    apply_linear(tape, store, &format!("{prefix}.2"), h)
}

// ---- transformer blocks ---------------------------------------------

pub fn register_encoder_layer(
    store: &mut ParameterStore,
    prefix: &str,
    dim: usize,
    ff: usize,
    rng: &mut StdRng,
) {
    register_layer_norm(store, &format!("{prefix}.ln1"), dim);
    register_mha(store, &format!("{prefix}.attn"), dim, rng);
    register_layer_norm(store, &format!("{prefix}.ln2"), dim);
    register_ffn(store, &format!("{prefix}.ffn"), dim, ff, rng);
}

/// Pre-norm self-attention block — x + Attn(LN(x)), then
/// x + FFN(LN(x)) — with an optional attention mask. Shared by the
/// audio encoder (unmasked), the causal LM and the prefix tagger.
pub fn apply_self_attn_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
    n_heads: usize,
    mask: Option<TensorId>,
) -> TensorId {
    let normed = apply_layer_norm(tape, store, &format!("{prefix}.ln1"), x);
    let attn = apply_mha(tape, store, &format!("{prefix}.attn"), normed, normed, n_heads, mask);
    let x = tape.add(x, attn.out);
    let normed = apply_layer_norm(tape, store, &format!("{prefix}.ln2"), x);
    let ff = apply_ffn(tape, store, &format!("{prefix}.ffn"), normed);
    tape.add(x, ff)
}

/// Pre-norm encoder block: unmasked self-attention — block-level
/// causality is the caller's job.
pub fn apply_encoder_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
    n_heads: usize,
) -> TensorId {
    apply_self_attn_layer(tape, store, prefix, x, n_heads, None)
}

pub fn register_decoder_layer(
    store: &mut ParameterStore,
    prefix: &str,
    dim: usize,
    ff: usize,
    rng: &mut StdRng,
) {
    register_layer_norm(store, &format!("{prefix}.ln1"), dim);
    register_mha(store, &format!("{prefix}.self"), dim, rng);
    register_layer_norm(store, &format!("{prefix}.ln2"), dim);
    register_mha(store, &format!("{prefix}.cross"), dim, rng);
    register_layer_norm(store, &format!("{prefix}.ln3"), dim);
    register_ffn(store, &format!("{prefix}.ffn"), dim, ff, rng);
}

/// Pre-norm decoder block: causal self-attention, cross-attention over
/// `enc`, feed-forward. Returns the block output and the cross-attention
/// probabilities (for attention-based endpoint detection).
pub fn apply_decoder_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
    enc: TensorId,
    n_heads: usize,
    self_mask: TensorId,
) -> (TensorId, Vec<TensorId>) {
    let normed = apply_layer_norm(tape, store, &format!("{prefix}.ln1"), x);
    let sa = apply_mha(tape, store, &format!("{prefix}.self"), normed, normed, n_heads, Some(self_mask));
    let x = tape.add(x, sa.out);
    let normed = apply_layer_norm(tape, store, &format!("{prefix}.ln2"), x);
    let ca = apply_mha(tape, store, &format!("{prefix}.cross"), normed, enc, n_heads, None);
    let x = tape.add(x, ca.out);
    let normed = apply_layer_norm(tape, store, &format!("{prefix}.ln3"), x);
    let ff = apply_ffn(tape, store, &format!("{prefix}.ffn"), normed);
    (tape.add(x, ff), ca.attn)
}

// ---- positional encoding --------------------------------------------

/// Sinusoidal positional encoding rows for absolute positions
/// `[start, start+len)`.
pub fn sinusoidal_pe(start: usize, len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for (r, pos) in (start..start + len).enumerate() {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[r * dim + 2 * i] = angle.sin();
            pe[r * dim + 2 * i + 1] = angle.cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[r * dim + dim - 1] = angle.sin();
        }
    }
    pe
}

/// Add sinusoidal encodings for absolute positions starting at `start`.
pub fn add_positional(tape: &mut Tape, x: TensorId, start: usize) -> TensorId {
    let (len, dim) = tape.shape(x);
    let pe = sinusoidal_pe(start, len, dim);
    let pe = tape.constant(len, dim, pe);
    tape.add(x, pe)
}
