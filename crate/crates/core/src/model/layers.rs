use crate::error::{shape_err, Result};
use crate::grouped_gemm::{
    grouped_gemm, linear, linear_f32, make_grouped_problems, Activation, ExpertLinear, GemmOptions, TrafficCounter,
};
use crate::half_float::{half_add, Half};
use crate::router::{build_routing_plan, gate_top1, permute_rows, unpermute_and_scale};
use crate::tensor::HalfMatrix;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<Half>,
    pub beta: Vec<Half>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm { gamma: vec![Half::ONE; d], beta: vec![Half::ZERO; d] }
    }
}

/// `x . weight + bias` with `weight` stored `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: HalfMatrix,
    pub bias: Vec<Half>,
}

impl Linear {
    pub fn forward(&self, x: &HalfMatrix, act: Activation) -> Result<HalfMatrix> {
        linear(x, &self.weight, &self.bias, act)
    }
}

/// Pre-norm multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub n_heads: usize,
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseFfn {
    pub norm: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeFfn {
    pub norm: LayerNorm,
    /// `(d_model, E)` router projection.
    pub gate: Linear,
    pub w1: ExpertLinear,
    pub w2: ExpertLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnWeights {
    Dense(DenseFfn),
    Moe(MoeFfn),
}

impl FfnWeights {
    /// `finished[r]` rows are pruned from MoE layers; dense layers ignore it.
    pub fn forward(
        &self,
        x: &HalfMatrix,
        finished: &[bool],
        opts: &GemmOptions,
        traffic: &mut TrafficCounter,
    ) -> Result<HalfMatrix> {
        match self {
            FfnWeights::Dense(d) => dense_ffn_forward(x, d),
            FfnWeights::Moe(m) => moe_ffn_forward_with(x, m, finished, opts, traffic),
        }
    }
}

/// Per-row layer norm computed in f32, narrowed to FP16.
pub fn layer_norm(x: &HalfMatrix, ln: &LayerNorm) -> HalfMatrix {
    let d = x.cols();
    let mut out = HalfMatrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row: Vec<f32> = x.row(r).iter().map(|h| h.to_f32()).collect();
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = Half::from_f32((row[c] - mean) * inv * ln.gamma[c].to_f32() + ln.beta[c].to_f32());
        }
    }
    out
}

pub(crate) fn residual_add(x: &HalfMatrix, y: &HalfMatrix) -> HalfMatrix {
    let data = x.as_slice().iter().zip(y.as_slice()).map(|(&a, &b)| half_add(a, b)).collect();
    HalfMatrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// Scaled dot-product attention of one query row over `keys`/`values`
/// (row-major, `len x d`). Heads split `d` evenly. Scores, softmax and the
/// weighted sum are f32; the context row is narrowed to FP16.
pub fn attend(query: &[Half], keys: &[Half], values: &[Half], n_heads: usize) -> Vec<Half> {
    let d = query.len();
    let dh = d / n_heads;
    let len = keys.len() / d;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = vec![Half::ZERO; d];
    let mut scores = vec![0.0f32; len];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let key = &keys[j * d..(j + 1) * d];
            let mut dot = 0.0f32;
            for c in cols.clone() {
                dot += query[c].to_f32() * key[c].to_f32();
            }
            *s = dot * scale;
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for c in cols {
            let mut acc = 0.0f32;
            for (j, s) in scores.iter().enumerate() {
                acc += (s / sum) * values[j * d + c].to_f32();
            }
            ctx[c] = Half::from_f32(acc);
        }
    }
    ctx
}

/// Pre-norm attention with residual: `x + O(attn(Q(ln x), K(src), V(src)))`
/// where `src` is `ln x` for self-attention or `memory` for cross-attention.
/// With `causal`, row `i` only sees rows `0..=i`.
pub fn attention_forward(
    x: &HalfMatrix,
    w: &AttentionWeights,
    memory: Option<&HalfMatrix>,
    causal: bool,
) -> Result<HalfMatrix> {
    if x.rows() == 0 {
        return Err(shape_err("attention needs at least one row"));
    }
    let d = x.cols();
    let n_heads = heads_for(w, d)?;
    let h = layer_norm(x, &w.norm);
    let q = w.q.forward(&h, Activation::None)?;
    let src = memory.unwrap_or(&h);
    if src.cols() != d {
        return Err(shape_err(format!("attention memory width {} != {d}", src.cols())));
    }
    let k = w.k.forward(src, Activation::None)?;
    let v = w.v.forward(src, Activation::None)?;
    let mut ctx = HalfMatrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let visible = if causal { (i + 1).min(k.rows()) } else { k.rows() };
        let row = attend(q.row(i), &k.as_slice()[..visible * d], &v.as_slice()[..visible * d], n_heads);
        ctx.row_mut(i).copy_from_slice(&row);
    }
    let out = w.o.forward(&ctx, Activation::None)?;
    Ok(residual_add(x, &out))
}

pub(crate) fn heads_for(w: &AttentionWeights, d: usize) -> Result<usize> {
    if w.q.weight.shape() != (d, d) || w.n_heads == 0 || !d.is_multiple_of(w.n_heads) {
        return Err(shape_err(format!("{} heads over {:?} weights for width {d}", w.n_heads, w.q.weight.shape())));
    }
    Ok(w.n_heads)
}

/// `x + W2(relu(W1(ln x)))`.
pub fn dense_ffn_forward(x: &HalfMatrix, w: &DenseFfn) -> Result<HalfMatrix> {
    if x.cols() != w.w1.weight.rows() {
        return Err(shape_err(format!("dense FFN expects width {}, got {}", w.w1.weight.rows(), x.cols())));
    }
    let h = layer_norm(x, &w.norm);
    let a = w.w1.forward(&h, Activation::Relu)?;
    let y = w.w2.forward(&a, Activation::None)?;
    Ok(residual_add(x, &y))
}

pub fn moe_ffn_forward(
    x: &HalfMatrix,
    w: &MoeFfn,
    finished: &[bool],
    traffic: &mut TrafficCounter,
) -> Result<HalfMatrix> {
    moe_ffn_forward_with(x, w, finished, &GemmOptions::default(), traffic)
}

/// MoE feed-forward with residual. Gate, route, grouped expert GEMMs
/// (`d_model -> d_ffn` with ReLU, then `d_ffn -> d_model`), un-permute and
/// scale by the gate probability, residual add. Finished rows skip the
/// experts entirely and come out equal to their input.
pub fn moe_ffn_forward_with(
    x: &HalfMatrix,
    w: &MoeFfn,
    finished: &[bool],
    opts: &GemmOptions,
    traffic: &mut TrafficCounter,
) -> Result<HalfMatrix> {
    let (experts, d_in, _) = w.w1.weights.shape();
    if x.cols() != d_in || finished.len() != x.rows() {
        return Err(shape_err(format!(
            "MoE layer expects width {d_in} and {} finished flags, got {}x{} and {}",
            x.rows(),
            x.rows(),
            x.cols(),
            finished.len()
        )));
    }
    let h = layer_norm(x, &w.norm);
    let logits = linear_f32(&h, &w.gate.weight, &w.gate.bias)?;
    let decisions = gate_top1(&logits)?;
    let plan = build_routing_plan(&decisions, finished, experts)?;
    let h_perm = permute_rows(&h, &plan)?;
    let up = grouped_gemm(&h_perm, &make_grouped_problems(&plan, &w.w1)?, Activation::Relu, opts, traffic)?;
    let up = if up.cols() == 0 { HalfMatrix::zeros(x.rows(), w.w1.weights.shape().2) } else { up };
    let down = grouped_gemm(&up, &make_grouped_problems(&plan, &w.w2)?, Activation::None, opts, traffic)?;
    let down = if down.cols() == 0 { HalfMatrix::zeros(x.rows(), x.cols()) } else { down };
    let scaled = unpermute_and_scale(&down, &plan, x)?;
    let mut out = scaled;
    for r in 0..x.rows() {
        if !plan.is_pruned(r) {
            for (o, &xi) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = half_add(xi, *o);
            }
        }
    }
    Ok(out)
}
