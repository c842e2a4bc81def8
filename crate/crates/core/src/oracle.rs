//! Slow reference implementations used by the verify suites and tests.
//!
//! Nothing here sorts, groups, tiles or runs in parallel: each output row is
//! a plain loop over its own token. Accumulation is f32 in ascending `k`,
//! the same order the fast kernels use, so results compare bit-exactly.

use crate::dequant::dequantize_value_naive;
use crate::error::{shape_err, Result};
use crate::grouped_gemm::{Activation, ExpertLinear, ExpertStore};
use crate::half_float::{half_add, half_mul, Half};
use crate::model::{layer_norm, LayerNorm, MoeFfn};
use crate::quantizer::{unpack, Bits};
use crate::tensor::HalfMatrix;

/// One output row of `x . W + b` for row-major `W` of shape `(x.len(), N)`.
pub fn matvec(x: &[Half], w: &[Half], bias: &[Half], act: Activation) -> Vec<Half> {
    matvec_f32(x, w, bias).into_iter().map(|v| Half::from_f32(act.apply(v))).collect()
}

pub fn matvec_f32(x: &[Half], w: &[Half], bias: &[Half]) -> Vec<f32> {
    let n = bias.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc = 0.0f32;
        for (k, xv) in x.iter().enumerate() {
            acc += xv.to_f32() * w[k * n + j].to_f32();
        }
        out.push(acc + bias[j].to_f32());
    }
    out
}

/// Expert `e`'s FP16 weight matrix, dequantized one value at a time with the
/// native conversion when the store is quantized.
pub fn expert_matrix(store: &ExpertStore, e: usize) -> Vec<Half> {
    match store {
        ExpertStore::Half(w) => w.expert(e).to_vec(),
        ExpertStore::Quant(q) => {
            let logical = unpack(q, e).expect("expert in range");
            let scales = q.expert_scales(e);
            let n = q.cols();
            let bits: Bits = q.bits();
            logical
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| dequantize_value_naive(v, scales[i % n], bits))
                .collect()
        }
    }
}

pub fn expert_linear_row(x: &[Half], layer: &ExpertLinear, e: usize, act: Activation) -> Vec<Half> {
    matvec(x, &expert_matrix(&layer.weights, e), layer.bias.row(e), act)
}

/// Per-token grouped GEMM oracle: row `r` goes through expert `assign[r]`,
/// `None` rows stay zero.
pub fn grouped_gemm_oracle(
    x: &HalfMatrix,
    assign: &[Option<usize>],
    layer: &ExpertLinear,
    act: Activation,
) -> HalfMatrix {
    let n = layer.bias.cols();
    let mut out = HalfMatrix::zeros(x.rows(), n);
    for (r, a) in assign.iter().enumerate() {
        if let Some(e) = a {
            out.row_mut(r).copy_from_slice(&expert_linear_row(x.row(r), layer, *e, act));
        }
    }
    out
}

/// Top-1 softmax gate for one row of logits: `(expert, probability)`.
pub fn gate_row(logits: &[f32]) -> (usize, Half) {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best];
    let mut sum = 0.0f32;
    for &v in logits {
        sum += (v - max).exp();
    }
    (best, Half::from_f32(1.0 / sum))
}

fn norm_row(x: &[Half], ln: &LayerNorm) -> Vec<Half> {
    let m = HalfMatrix::from_vec(1, x.len(), x.to_vec()).expect("one row");
    layer_norm(&m, ln).into_vec()
}

/// MoE feed-forward one token at a time: norm, gate, the chosen expert's two
/// projections, scale, residual. Finished rows are returned unchanged.
pub fn moe_ffn_oracle(x: &HalfMatrix, w: &MoeFfn, finished: &[bool]) -> Result<HalfMatrix> {
    if finished.len() != x.rows() {
        return Err(shape_err("one finished flag per row"));
    }
    let mut out = x.clone();
    for (r, &done) in finished.iter().enumerate() {
        if done {
            continue;
        }
        let h = norm_row(x.row(r), &w.norm);
        let logits = matvec_f32(&h, w.gate.weight.as_slice(), &w.gate.bias);
        let (e, scale) = gate_row(&logits);
        let up = expert_linear_row(&h, &w.w1, e, Activation::Relu);
        let down = expert_linear_row(&up, &w.w2, e, Activation::None);
        for (o, (&xi, &y)) in out.row_mut(r).iter_mut().zip(x.row(r).iter().zip(&down)) {
            *o = half_add(xi, half_mul(y, scale));
        }
    }
    Ok(out)
}
