//! Attention and MLP building blocks, all single-head and pre-softmax scaled
//! by 1/sqrt(c). Parameters are addressed by dotted name prefixes.

use super::Session;
use crate::numerics::{Real, Tensor, Var};

/// x · {prefix}.w + {prefix}.b (bias broadcast over rows).
pub fn linear<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Var {
    let w = s.p(&format!("{prefix}.w"));
    let b = s.p(&format!("{prefix}.b"));
    let xw = s.g.matmul(x, w);
    s.g.add_row(xw, b)
}

/// Single-head attention of `queries` over `context`.
/// Returns (output rows, attention probabilities).
pub fn attn<T: Real>(s: &mut Session<T>, prefix: &str, queries: Var, context: Var) -> (Var, Var) {
    let q = linear(s, &format!("{prefix}.q"), queries);
    let k = linear(s, &format!("{prefix}.k"), context);
    let v = linear(s, &format!("{prefix}.v"), context);
    let width = s.g.value(q).cols();
    let scores = s.g.matmul_nt(q, k);
    let scaled = s.g.scale(scores, T::one() / T::cast(width as f64).sqrt());
    let probs = s.g.softmax_rows(scaled);
    let mixed = s.g.matmul(probs, v);
    (linear(s, &format!("{prefix}.o"), mixed), probs)
}

/// ln({prefix}.ln*) applied to x + delta.
pub fn residual_ln<T: Real>(s: &mut Session<T>, ln_prefix: &str, x: Var, delta: Var) -> Var {
    let gain = s.p(&format!("{ln_prefix}.g"));
    let bias = s.p(&format!("{ln_prefix}.b"));
    let sum = s.g.add(x, delta);
    s.g.layer_norm(sum, gain, bias)
}

/// Cross/self attention block: t := ln2(t' + mlp(t')) where
/// t' = ln1(t + attn(t, ctx)).
pub fn attn_block<T: Real>(s: &mut Session<T>, prefix: &str, t: Var, ctx: Var) -> (Var, Var) {
    let (a, probs) = attn(s, &format!("{prefix}.attn"), t, ctx);
    let t = residual_ln(s, &format!("{prefix}.ln1"), t, a);
    let m = mlp(s, &format!("{prefix}.ffn"), t);
    (residual_ln(s, &format!("{prefix}.ln2"), t, m), probs)
}

/// ReLU MLP: relu(x·w1 + b1)·w2 + b2.
pub fn mlp<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Var {
    let h = linear(s, &format!("{prefix}.l1"), x);
    let h = s.g.relu(h);
    linear(s, &format!("{prefix}.l2"), h)
}

/// Decoder block with token self-attention, token→image cross-attention and
/// an MLP. Image state is read-only here. Returns the cross-attention probs.
pub fn one_way_block<T: Real>(s: &mut Session<T>, prefix: &str, t: Var, img: Var) -> (Var, Var) {
    let (sa, _) = attn(s, &format!("{prefix}.self"), t, t);
    let t = residual_ln(s, &format!("{prefix}.ln1"), t, sa);
    let (ca, probs) = attn(s, &format!("{prefix}.t2i"), t, img);
    let t = residual_ln(s, &format!("{prefix}.ln2"), t, ca);
    let m = mlp(s, &format!("{prefix}.ffn"), t);
    let t = residual_ln(s, &format!("{prefix}.ln3"), t, m);
    (t, probs)
}

/// Two-way variant: additionally updates the image state by attending back
/// to the tokens (used by the mask decoder).
pub fn two_way_block<T: Real>(
    s: &mut Session<T>,
    prefix: &str,
    t: Var,
    img: Var,
) -> (Var, Var, Var) {
    let (t, probs) = one_way_block(s, prefix, t, img);
    let (ia, _) = attn(s, &format!("{prefix}.i2t"), img, t);
    let img = residual_ln(s, &format!("{prefix}.ln4"), img, ia);
    (t, img, probs)
}

/// The box head f_Φ: two-layer MLP to 4 raw coordinates.
pub fn f_phi<T: Real>(s: &mut Session<T>, prefix: &str, x: Var) -> Var {
    mlp(s, prefix, x)
}

/// Map 4 raw head outputs through sigmoid-(cx,cy,w,h) to clamped corners.
/// Output is a 1×4 row (x1, y1, x2, y2), always a valid box: w and h are
/// floored at 1e-3 and the corners clamped to [0,1].
pub fn box_transform<T: Real>(s: &mut Session<T>, logits: Var) -> Var {
    assert_eq!(s.g.value(logits).shape(), (1, 4), "box head must emit 1x4");
    let sig = s.g.sigmoid(logits);
    let cxy = s.g.slice_cols(sig, 0, 2);
    let wh0 = s.g.slice_cols(sig, 2, 4);
    let wh = s.g.max_const(wh0, T::cast(1e-3));
    let half = s.g.scale(wh, T::cast(0.5));
    let tl0 = s.g.sub(cxy, half);
    let br0 = s.g.add(cxy, half);
    let tl = s.g.max_const(tl0, T::zero());
    let br = s.g.min_const(br0, T::one());
    // horizontal concat via constant selection matrices
    let e_tl = s.input(Tensor::new(2, 4, vec![
        T::one(), T::zero(), T::zero(), T::zero(),
        T::zero(), T::one(), T::zero(), T::zero(),
    ]).expect("static shape"));
    let e_br = s.input(Tensor::new(2, 4, vec![
        T::zero(), T::zero(), T::one(), T::zero(),
        T::zero(), T::zero(), T::zero(), T::one(),
    ]).expect("static shape"));
    let a = s.g.matmul(tl, e_tl);
    let b = s.g.matmul(br, e_br);
    s.g.add(a, b)
}
