//! Grouped matrix multiply over variable-size per-expert row blocks.
//!
//! Every output element is `act(sum_k x[r, k] * w[k, n] + bias[n])` with the
//! sum accumulated in f32 sequentially over `k`, then narrowed to FP16 once.
//! Row tiling changes how work is split and how often weights are streamed,
//! never the arithmetic.

use std::ops::{Add, AddAssign, Range};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dequant::{dequantize_row_fast, MagicConstants};
use crate::error::{shape_err, Error, Result};
use crate::half_float::Half;
use crate::quantizer::{Bits, QuantizedExpertWeights};
use crate::router::RoutingPlan;
use crate::tensor::{ExpertWeights, F32Matrix, HalfMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
        }
    }
}

/// Byte traffic of the expert GEMMs.
///
/// `weight_bytes_read` covers weight matrices only (FP16 elements, or packed
/// bytes plus FP16 scales). Bias vectors are counted with the activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficCounter {
    pub weight_bytes_read: u64,
    pub activation_bytes_read: u64,
    pub bytes_written: u64,
}

impl TrafficCounter {
    pub fn total_read(&self) -> u64 {
        self.weight_bytes_read + self.activation_bytes_read
    }
}

impl AddAssign for TrafficCounter {
    fn add_assign(&mut self, o: Self) {
        self.weight_bytes_read += o.weight_bytes_read;
        self.activation_bytes_read += o.activation_bytes_read;
        self.bytes_written += o.bytes_written;
    }
}

impl Add for TrafficCounter {
    type Output = TrafficCounter;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Int8,
    Int4,
}

impl Precision {
    pub fn from_bits(bits: Bits) -> Self {
        match bits {
            Bits::Int4 => Precision::Int4,
            Bits::Int8 => Precision::Int8,
        }
    }

    pub fn bits(self) -> Option<Bits> {
        match self {
            Precision::Fp16 => None,
            Precision::Int8 => Some(Bits::Int8),
            Precision::Int4 => Some(Bits::Int4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            "int4" => Ok(Precision::Int4),
            other => Err(Error::Invalid(format!("unknown precision {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Expert weight storage of shape `(E, M, N)`.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpertStore {
    Half(ExpertWeights),
    Quant(QuantizedExpertWeights),
}

impl ExpertStore {
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            ExpertStore::Half(w) => w.shape(),
            ExpertStore::Quant(q) => q.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            ExpertStore::Half(_) => Precision::Fp16,
            ExpertStore::Quant(q) => Precision::from_bits(q.bits()),
        }
    }

    /// Bytes a kernel must stream to read one expert's weight matrix.
    pub fn expert_weight_bytes(&self) -> usize {
        match self {
            ExpertStore::Half(w) => 2 * w.rows() * w.cols(),
            ExpertStore::Quant(q) => q.expert_payload_bytes(),
        }
    }

    pub fn view(&self, e: usize) -> WeightView<'_> {
        match self {
            ExpertStore::Half(w) => WeightView::Half(w.expert(e)),
            ExpertStore::Quant(q) => WeightView::Quant { weights: q, expert: e },
        }
    }
}

/// One expert projection: weights `(E, M, N)` and FP16 biases `(E, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLinear {
    pub weights: ExpertStore,
    pub bias: HalfMatrix,
}

impl ExpertLinear {
    pub fn new(weights: ExpertStore, bias: HalfMatrix) -> Result<Self> {
        let (e, _, n) = weights.shape();
        if bias.shape() != (e, n) {
            return Err(shape_err(format!("expert bias {:?} does not match ({e}, {n})", bias.shape())));
        }
        Ok(ExpertLinear { weights, bias })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum WeightView<'a> {
    /// Row-major `(M, N)` FP16 slab.
    Half(&'a [Half]),
    Quant {
        weights: &'a QuantizedExpertWeights,
        expert: usize,
    },
}

/// One expert's sub-matrix of the permuted activations.
#[derive(Clone, Copy, Debug)]
pub struct GroupedProblem<'a> {
    pub expert_idx: usize,
    pub row_begin: usize,
    pub row_end: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: WeightView<'a>,
    pub bias: &'a [Half],
}

impl GroupedProblem<'_> {
    pub fn rows(&self) -> Range<usize> {
        self.row_begin..self.row_end
    }
}

/// One problem per expert with at least one active row, in expert order.
pub fn make_grouped_problems<'a>(plan: &RoutingPlan, layer: &'a ExpertLinear) -> Result<Vec<GroupedProblem<'a>>> {
    let (experts, in_dim, out_dim) = layer.weights.shape();
    if plan.num_experts() != experts {
        return Err(shape_err(format!("plan routes to {} experts, layer has {experts}", plan.num_experts())));
    }
    Ok((0..experts)
        .filter(|&e| !plan.expert_rows(e).is_empty())
        .map(|e| {
            let rows = plan.expert_rows(e);
            GroupedProblem {
                expert_idx: e,
                row_begin: rows.start,
                row_end: rows.end,
                in_dim,
                out_dim,
                weight: layer.weights.view(e),
                bias: layer.bias.row(e),
            }
        })
        .collect())
}

/// How quantized weights reach the GEMM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DequantMode {
    /// Dequantize weight rows inside the GEMM main loop.
    #[default]
    Fused,
    /// Materialize the FP16 expert matrix first, then run the FP16 GEMM on it.
    SeparatePass,
}

#[derive(Clone, Copy, Debug)]
pub struct GemmOptions {
    /// Rows handled per work unit; each unit streams the full expert weight.
    pub row_tile: usize,
    pub dequant: DequantMode,
    pub constants: MagicConstants,
}

impl Default for GemmOptions {
    fn default() -> Self {
        GemmOptions { row_tile: 64, dequant: DequantMode::Fused, constants: MagicConstants::EXACT }
    }
}

/// Accumulates `x[rows] . W` for one weight source, k-sequential.
/// `weight_row(k, buf)` must fill `buf` (length N) with row `k` of W.
fn accumulate_tile(
    x: &HalfMatrix,
    rows: Range<usize>,
    in_dim: usize,
    out_dim: usize,
    mut weight_row: impl FnMut(usize, &mut [f32]),
) -> Vec<f32> {
    let n_rows = rows.len();
    let mut acc = vec![0.0f32; n_rows * out_dim];
    let mut w = vec![0.0f32; out_dim];
    for k in 0..in_dim {
        weight_row(k, &mut w);
        for (i, r) in rows.clone().enumerate() {
            let xv = x.get(r, k).to_f32();
            let dst = &mut acc[i * out_dim..(i + 1) * out_dim];
            for (a, &wv) in dst.iter_mut().zip(&w) {
                *a += xv * wv;
            }
        }
    }
    acc
}

fn epilogue(acc: Vec<f32>, bias: &[Half], act: Activation) -> Vec<Half> {
    let n = bias.len();
    acc.into_iter().enumerate().map(|(i, a)| Half::from_f32(act.apply(a + bias[i % n].to_f32()))).collect()
}

fn half_row_source(slab: &[Half], out_dim: usize) -> impl FnMut(usize, &mut [f32]) + '_ {
    move |k, buf| {
        for (b, h) in buf.iter_mut().zip(&slab[k * out_dim..(k + 1) * out_dim]) {
            *b = h.to_f32();
        }
    }
}

fn check_problems(x: &HalfMatrix, problems: &[GroupedProblem<'_>]) -> Result<Option<usize>> {
    let mut out_dim = None;
    let mut prev_end = 0;
    let mut prev_expert = None;
    for p in problems {
        if p.in_dim != x.cols() {
            return Err(shape_err(format!(
                "expert {} expects {} inputs, activations have {}",
                p.expert_idx,
                p.in_dim,
                x.cols()
            )));
        }
        if p.row_begin > p.row_end || p.row_end > x.rows() || p.row_begin < prev_end {
            return Err(shape_err(format!(
                "expert {} rows {:?} overlap or exceed {}",
                p.expert_idx,
                p.rows(),
                x.rows()
            )));
        }
        if prev_expert.is_some_and(|e| e >= p.expert_idx) {
            return Err(Error::Invalid("grouped problems must be ordered by expert".into()));
        }
        if *out_dim.get_or_insert(p.out_dim) != p.out_dim || p.bias.len() != p.out_dim {
            return Err(shape_err("grouped problems disagree on output width"));
        }
        prev_end = p.row_end;
        prev_expert = Some(p.expert_idx);
    }
    Ok(out_dim)
}

/// Runs every problem and writes its rows into a `(T, N)` output. Rows not
/// covered by any problem are zero.
pub fn grouped_gemm(
    x: &HalfMatrix,
    problems: &[GroupedProblem<'_>],
    act: Activation,
    opts: &GemmOptions,
    traffic: &mut TrafficCounter,
) -> Result<HalfMatrix> {
    let Some(out_dim) = check_problems(x, problems)? else {
        return Ok(HalfMatrix::zeros(x.rows(), 0));
    };
    let tile = opts.row_tile.max(1);

    // Separate-pass mode materializes each active expert's FP16 matrix.
    let materialized: Vec<Option<Vec<Half>>> = problems
        .par_iter()
        .map(|p| match (p.weight, opts.dequant) {
            (WeightView::Quant { weights, expert }, DequantMode::SeparatePass) => {
                let mut slab = vec![Half::ZERO; p.in_dim * p.out_dim];
                for (m, row) in slab.chunks_exact_mut(p.out_dim).enumerate() {
                    dequantize_row_fast(weights, expert, m, &opts.constants, row);
                }
                Some(slab)
            }
            _ => None,
        })
        .collect();

    let units: Vec<(usize, Range<usize>)> = problems
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (p.row_begin..p.row_end).step_by(tile).map(move |s| (i, s..(s + tile).min(p.row_end))))
        .collect();

    let results: Vec<Vec<Half>> = units
        .par_iter()
        .map(|(i, rows)| {
            let p = &problems[*i];
            let acc = match (p.weight, materialized[*i].as_deref()) {
                (_, Some(slab)) | (WeightView::Half(slab), None) => {
                    accumulate_tile(x, rows.clone(), p.in_dim, p.out_dim, half_row_source(slab, p.out_dim))
                }
                (WeightView::Quant { weights, expert }, None) => {
                    let mut hrow = vec![Half::ZERO; p.out_dim];
                    accumulate_tile(x, rows.clone(), p.in_dim, p.out_dim, |k, buf| {
                        dequantize_row_fast(weights, expert, k, &opts.constants, &mut hrow);
                        for (b, h) in buf.iter_mut().zip(&hrow) {
                            *b = h.to_f32();
                        }
                    })
                }
            };
            epilogue(acc, p.bias, act)
        })
        .collect();

    let mut out = HalfMatrix::zeros(x.rows(), out_dim);
    for ((_, rows), vals) in units.iter().zip(results) {
        out.as_mut_slice()[rows.start * out_dim..rows.end * out_dim].copy_from_slice(&vals);
    }

    for p in problems {
        let n_rows = (p.row_end - p.row_begin) as u64;
        let tiles = n_rows.div_ceil(tile as u64);
        let fp16_matrix = 2 * (p.in_dim * p.out_dim) as u64;
        let stored = match p.weight {
            WeightView::Half(_) => fp16_matrix,
            WeightView::Quant { weights, .. } => weights.expert_payload_bytes() as u64,
        };
        let mut c = TrafficCounter {
            weight_bytes_read: tiles * stored,
            activation_bytes_read: n_rows * 2 * p.in_dim as u64 + tiles * 2 * p.out_dim as u64,
            bytes_written: n_rows * 2 * p.out_dim as u64,
        };
        if matches!(p.weight, WeightView::Quant { .. }) && opts.dequant == DequantMode::SeparatePass {
            // Dequantize kernel reads the packed weights once and writes W_dq;
            // the GEMM then streams W_dq per tile.
            c.weight_bytes_read = stored + tiles * fp16_matrix;
            c.bytes_written += fp16_matrix;
        }
        *traffic += c;
    }
    Ok(out)
}

/// [`grouped_gemm`] restricted to FP16 expert weights.
pub fn grouped_gemm_f16(
    x: &HalfMatrix,
    problems: &[GroupedProblem<'_>],
    act: Activation,
    traffic: &mut TrafficCounter,
) -> Result<HalfMatrix> {
    if problems.iter().any(|p| !matches!(p.weight, WeightView::Half(_))) {
        return Err(Error::Invalid("grouped_gemm_f16 given quantized weights".into()));
    }
    grouped_gemm(x, problems, act, &GemmOptions::default(), traffic)
}

/// [`grouped_gemm`] over quantized expert weights with dequantization fused
/// into the main loop.
pub fn grouped_gemm_quant(
    x: &HalfMatrix,
    problems: &[GroupedProblem<'_>],
    act: Activation,
    traffic: &mut TrafficCounter,
) -> Result<HalfMatrix> {
    if problems.iter().any(|p| !matches!(p.weight, WeightView::Quant { .. })) {
        return Err(Error::Invalid("grouped_gemm_quant given FP16 weights".into()));
    }
    grouped_gemm(x, problems, act, &GemmOptions::default(), traffic)
}

/// Dense `x . W + b` with the same accumulation rules, narrowed to FP16.
pub fn linear(x: &HalfMatrix, weight: &HalfMatrix, bias: &[Half], act: Activation) -> Result<HalfMatrix> {
    let acc = linear_accumulate(x, weight, bias)?;
    let (rows, cols) = acc.shape();
    Ok(HalfMatrix::from_vec(rows, cols, acc.into_vec().into_iter().map(|v| Half::from_f32(act.apply(v))).collect())
        .expect("shape preserved"))
}

/// Dense `x . W + b` kept in f32 (used for gate and vocabulary logits).
pub fn linear_f32(x: &HalfMatrix, weight: &HalfMatrix, bias: &[Half]) -> Result<F32Matrix> {
    linear_accumulate(x, weight, bias)
}

fn linear_accumulate(x: &HalfMatrix, weight: &HalfMatrix, bias: &[Half]) -> Result<F32Matrix> {
    let (in_dim, out_dim) = weight.shape();
    if x.cols() != in_dim || bias.len() != out_dim {
        return Err(shape_err(format!(
            "linear: input width {} / bias {} vs weight {in_dim}x{out_dim}",
            x.cols(),
            bias.len()
        )));
    }
    let rows = x.rows();
    let mut data = vec![0.0f32; rows * out_dim];
    data.par_chunks_mut(out_dim.max(1)).enumerate().for_each(|(r, dst)| {
        let mut acc = accumulate_tile(x, r..r + 1, in_dim, out_dim, half_row_source(weight.as_slice(), out_dim));
        for (a, b) in acc.iter_mut().zip(bias) {
            *a += b.to_f32();
        }
        dst.copy_from_slice(&acc);
    });
    F32Matrix::from_vec(rows, out_dim, data)
}
