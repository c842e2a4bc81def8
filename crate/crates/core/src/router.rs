//! Top-1 gating and sort-based token routing.
//!
//! Each row's `(expert_scale, expert_idx, row_idx)` decision is sorted by
//! expert index with a stable LSD radix sort. The resulting permutation lays
//! every expert's rows out contiguously, so each expert becomes one
//! sub-matrix of the permuted activations. Rows of finished sentences are
//! keyed with the sentinel `E`, which sorts them past every live group; only
//! the first `active_rows` permuted rows are ever computed.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::half_float::{half_mul, Half};
use crate::tensor::{F32Matrix, HalfMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateDecision {
    pub expert_scale: Half,
    /// Chosen expert, or the sentinel `E` for a pruned row.
    pub expert_idx: u32,
    pub row_idx: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingPlan {
    sorted: Vec<GateDecision>,
    permutation: Vec<usize>,
    inverse: Vec<usize>,
    offsets: Vec<usize>,
    active_rows: usize,
}

impl RoutingPlan {
    /// Decisions in permuted order; pruned rows carry `expert_idx == E`.
    pub fn sorted_decisions(&self) -> &[GateDecision] {
        &self.sorted
    }

    /// `permutation[i]` is the original row placed at permuted position `i`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// `inverse_permutation()[r]` is the permuted position of original row `r`.
    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inverse
    }

    /// Length `E + 1`; expert `e` owns permuted rows `offsets[e]..offsets[e + 1]`.
    pub fn expert_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn active_rows(&self) -> usize {
        self.active_rows
    }

    pub fn num_experts(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        self.permutation.len()
    }

    pub fn expert_rows(&self, e: usize) -> std::ops::Range<usize> {
        self.offsets[e]..self.offsets[e + 1]
    }

    /// Whether original row `r` was excluded by pruning.
    pub fn is_pruned(&self, r: usize) -> bool {
        self.inverse[r] >= self.active_rows
    }
}

/// Softmax over each row of `logits` (shape `(T, E)`) and top-1 selection.
///
/// Ties go to the lowest expert index. The scale is the argmax probability,
/// computed in f32 and narrowed to FP16.
pub fn gate_top1(logits: &F32Matrix) -> Result<Vec<GateDecision>> {
    let (rows, experts) = logits.shape();
    if experts == 0 {
        return Err(Error::Invalid("gating needs at least one expert".into()));
    }
    let mut out = Vec::with_capacity(rows);
    for (r, row) in logits.iter_rows().enumerate() {
        if let Some(e) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit { row: r, expert: e });
        }
        let (best, max) =
            row.iter()
                .copied()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
        let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
        // exp(max - max) == 1 exactly.
        let p = 1.0 / sum;
        out.push(GateDecision { expert_scale: Half::from_f32(p), expert_idx: best as u32, row_idx: r as u32 });
    }
    Ok(out)
}

/// Stable LSD radix sort of `(key, value)` pairs, 8 bits per pass. Passes
/// above the highest set bit of the largest key are skipped.
pub fn radix_sort_pairs(keys: &[u32], values: &[u32]) -> (Vec<u32>, Vec<u32>) {
    assert_eq!(keys.len(), values.len());
    let mut k = keys.to_vec();
    let mut v = values.to_vec();
    let max = keys.iter().copied().max().unwrap_or(0);
    let mut k_tmp = vec![0u32; k.len()];
    let mut v_tmp = vec![0u32; v.len()];
    let mut shift = 0u32;
    while shift < 32 && (shift == 0 || max >> shift != 0) {
        let mut counts = [0usize; 257];
        for &key in &k {
            counts[((key >> shift) & 0xff) as usize + 1] += 1;
        }
        for d in 0..256 {
            counts[d + 1] += counts[d];
        }
        for (&key, &val) in k.iter().zip(&v) {
            let d = ((key >> shift) & 0xff) as usize;
            k_tmp[counts[d]] = key;
            v_tmp[counts[d]] = val;
            counts[d] += 1;
        }
        std::mem::swap(&mut k, &mut k_tmp);
        std::mem::swap(&mut v, &mut v_tmp);
        shift += 8;
    }
    (k, v)
}

/// Builds the routing plan for one batch of `T` decisions.
///
/// Rows with `finished[row_idx]` are re-keyed to the sentinel `E` and end up
/// in the tail, outside every expert group and outside `active_rows`.
pub fn build_routing_plan(decisions: &[GateDecision], finished: &[bool], num_experts: usize) -> Result<RoutingPlan> {
    let t = decisions.len();
    if finished.len() != t {
        return Err(shape_err(format!("{t} decisions but {} finished flags", finished.len())));
    }
    let mut seen = vec![false; t];
    for d in decisions {
        let r = d.row_idx as usize;
        if r >= t || std::mem::replace(&mut seen[r], true) {
            return Err(Error::Invalid(format!("row index {r} is out of range or repeated")));
        }
        if d.expert_idx as usize > num_experts {
            return Err(Error::Invalid(format!("expert index {} exceeds {num_experts}", d.expert_idx)));
        }
    }

    let sentinel = num_experts as u32;
    let keys: Vec<u32> =
        decisions.iter().map(|d| if finished[d.row_idx as usize] { sentinel } else { d.expert_idx }).collect();
    let positions: Vec<u32> = (0..t as u32).collect();
    let (sorted_keys, order) = radix_sort_pairs(&keys, &positions);

    let mut offsets = vec![0usize; num_experts + 1];
    for &k in &sorted_keys {
        if k < sentinel {
            offsets[k as usize + 1] += 1;
        }
    }
    for e in 0..num_experts {
        offsets[e + 1] += offsets[e];
    }
    let active_rows = offsets[num_experts];

    let sorted: Vec<GateDecision> = order
        .iter()
        .zip(&sorted_keys)
        .map(|(&i, &k)| GateDecision { expert_idx: k, ..decisions[i as usize] })
        .collect();
    let permutation: Vec<usize> = sorted.iter().map(|d| d.row_idx as usize).collect();
    let mut inverse = vec![0usize; t];
    for (i, &r) in permutation.iter().enumerate() {
        inverse[r] = i;
    }
    Ok(RoutingPlan { sorted, permutation, inverse, offsets, active_rows })
}

/// Output row `i` is input row `permutation[i]`. Rows past `active_rows` are
/// carried along but never read by the expert GEMMs.
pub fn permute_rows(x: &HalfMatrix, plan: &RoutingPlan) -> Result<HalfMatrix> {
    if x.rows() != plan.num_rows() {
        return Err(shape_err(format!("{} rows for a {}-row plan", x.rows(), plan.num_rows())));
    }
    Ok(x.gather_rows(&plan.permutation))
}

/// Inverse of [`permute_rows`], without scaling.
pub fn unpermute_rows(y_perm: &HalfMatrix, plan: &RoutingPlan) -> Result<HalfMatrix> {
    if y_perm.rows() != plan.num_rows() {
        return Err(shape_err(format!("{} rows for a {}-row plan", y_perm.rows(), plan.num_rows())));
    }
    Ok(y_perm.gather_rows(&plan.inverse))
}

/// Restores original row order and multiplies each live row by its gate
/// scale (FP16 multiply per element). Pruned rows are copied from
/// `passthrough`, which the caller fills with the rows' pre-layer values.
pub fn unpermute_and_scale(y_perm: &HalfMatrix, plan: &RoutingPlan, passthrough: &HalfMatrix) -> Result<HalfMatrix> {
    let t = plan.num_rows();
    if y_perm.rows() != t || passthrough.rows() != t {
        return Err(shape_err(format!(
            "unpermute: plan has {t} rows, got {} expert rows and {} passthrough rows",
            y_perm.rows(),
            passthrough.rows()
        )));
    }
    if y_perm.cols() != passthrough.cols() {
        return Err(shape_err("unpermute: expert output and passthrough widths differ"));
    }
    let cols = y_perm.cols();
    let mut out = HalfMatrix::zeros(t, cols);
    out.as_mut_slice().par_chunks_mut(cols.max(1)).enumerate().for_each(|(r, dst)| {
        let p = plan.inverse[r];
        if p >= plan.active_rows {
            dst.copy_from_slice(passthrough.row(r));
        } else {
            let scale = plan.sorted[p].expert_scale;
            for (d, &y) in dst.iter_mut().zip(y_perm.row(p)) {
                *d = half_mul(y, scale);
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decisions(indices: &[u32]) -> Vec<GateDecision> {
        indices
            .iter()
            .enumerate()
            .map(|(r, &e)| GateDecision { expert_scale: Half::ONE, expert_idx: e, row_idx: r as u32 })
            .collect()
    }

    #[test]
    fn gate_examples() {
        let logits = F32Matrix::from_vec(3, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 0.5, 10.0, 0.0, 0.0]).unwrap();
        let d = gate_top1(&logits).unwrap();
        assert_eq!(d[0].expert_idx, 0);
        assert_eq!(d[0].expert_scale, Half::from_f32(1.0 / 3.0));
        assert_eq!(d[1].expert_idx, 1);
        // f64 oracle: e^2 / (e^1 + e^2 + e^0.5) = 0.62853...
        let oracle = 2f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp());
        assert!((oracle - 0.628_53).abs() < 1e-5);
        assert_eq!(d[1].expert_scale, Half::from_f32(oracle as f32));
        // 0.99991 is closer to 1.0 than to the FP16 value below it.
        assert_eq!(d[2].expert_idx, 0);
        assert_eq!(d[2].expert_scale, Half::ONE);

        let four = F32Matrix::from_vec(1, 4, vec![0.0; 4]).unwrap();
        let d = gate_top1(&four).unwrap();
        assert_eq!(d[0].expert_idx, 0);
        assert_eq!(d[0].expert_scale.to_f32(), 0.25);
    }

    #[test]
    fn gate_rejects_nan() {
        let logits = F32Matrix::from_vec(2, 2, vec![0.0, 1.0, f32::NAN, 0.0]).unwrap();
        assert!(matches!(gate_top1(&logits), Err(Error::NonFiniteLogit { row: 1, expert: 0 })));
    }

    #[test]
    fn plan_examples() {
        let d = decisions(&[2, 0, 2, 1]);
        let plan = build_routing_plan(&d, &[false; 4], 4).unwrap();
        assert_eq!(plan.permutation(), &[1, 3, 0, 2]);
        assert_eq!(plan.expert_offsets(), &[0, 1, 2, 4, 4]);
        assert_eq!(plan.active_rows(), 4);

        let plan = build_routing_plan(&d, &[false, true, false, false], 4).unwrap();
        assert_eq!(plan.permutation(), &[3, 0, 2, 1]);
        assert_eq!(plan.expert_offsets(), &[0, 0, 1, 3, 3]);
        assert_eq!(plan.active_rows(), 3);
        assert!(plan.is_pruned(1));
        assert_eq!(plan.sorted_decisions()[3].expert_idx, 4);

        let plan = build_routing_plan(&decisions(&[0; 5]), &[false; 5], 3).unwrap();
        assert_eq!(plan.permutation(), &[0, 1, 2, 3, 4]);
        assert_eq!(plan.expert_offsets(), &[0, 5, 5, 5]);
    }

    #[test]
    fn plan_rejects_bad_input() {
        assert!(build_routing_plan(&decisions(&[5]), &[false], 4).is_err());
        assert!(build_routing_plan(&decisions(&[0, 1]), &[false], 4).is_err());
        let mut d = decisions(&[0, 1]);
        d[1].row_idx = 0;
        assert!(build_routing_plan(&d, &[false, false], 4).is_err());
        // The sentinel itself is a legal input key.
        assert!(build_routing_plan(&decisions(&[4]), &[false], 4).is_ok());
    }

    #[test]
    fn radix_sort_multi_pass() {
        let keys = [70000u32, 3, 256, 3, 0, 70000, 255];
        let vals: Vec<u32> = (0..keys.len() as u32).collect();
        let (k, v) = radix_sort_pairs(&keys, &vals);
        assert_eq!(k, [0, 3, 3, 255, 256, 70000, 70000]);
        assert_eq!(v, [4, 1, 3, 6, 2, 0, 5]);
    }

    #[test]
    fn permute_and_restore() {
        let x = HalfMatrix::from_f32(4, 2, &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]).unwrap();
        let plan = build_routing_plan(&decisions(&[2, 0, 2, 1]), &[false; 4], 4).unwrap();
        let p = permute_rows(&x, &plan).unwrap();
        assert_eq!(p.row(0), x.row(1));
        assert_eq!(p.row(1), x.row(3));
        assert!(unpermute_rows(&p, &plan).unwrap().bit_eq(&x));

        let id = build_routing_plan(&decisions(&[0; 4]), &[false; 4], 2).unwrap();
        assert!(permute_rows(&x, &id).unwrap().bit_eq(&x));
        assert!(permute_rows(&HalfMatrix::zeros(3, 2), &plan).is_err());
    }

    #[test]
    fn scale_and_passthrough() {
        let x = HalfMatrix::from_f32(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut d = decisions(&[1, 0, 1]);
        d[2].expert_scale = Half::from_f32(0.5);
        let plan = build_routing_plan(&d, &[false; 3], 2).unwrap();
        let y_perm = permute_rows(&x, &plan).unwrap();
        let out = unpermute_and_scale(&y_perm, &plan, &x).unwrap();
        assert_eq!(out.row(0), x.row(0));
        assert_eq!(out.row(1), x.row(1));
        assert_eq!(out.to_f32().row(2), &[2.5, 3.0]);

        let resid = HalfMatrix::from_f32(3, 2, &[9.0; 6]).unwrap();
        let plan = build_routing_plan(&d, &[false, true, false], 2).unwrap();
        let y_perm = permute_rows(&x, &plan).unwrap();
        let out = unpermute_and_scale(&y_perm, &plan, &resid).unwrap();
        assert_eq!(out.to_f32().row(1), &[9.0, 9.0]);
        assert_eq!(out.row(0), x.row(0));
    }
}
