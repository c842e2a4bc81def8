//! Oracle suites run by `moebench verify` and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::dequant::{
    dequantize_fast_with, dequantize_naive, dequantize_value_naive, i2f_magic_u4_with, i2f_magic_u8_with,
    int4_storage_slot, MagicConstants,
};
use crate::error::{Error, Result};
use crate::grouped_gemm::{
    grouped_gemm, make_grouped_problems, Activation, DequantMode, ExpertLinear, ExpertStore, GemmOptions, Precision,
    TrafficCounter,
};
use crate::half_float::{compose_magic, half_mul, half_sub, Half};
use crate::model::{
    beam_search_decode, moe_ffn_forward_with, DecodeOptions, LayerNorm, Linear, Model, ModelConfig, MoeFfn, EOS,
};
use crate::oracle::{grouped_gemm_oracle, moe_ffn_oracle};
use crate::quantizer::{quantize, Bits};
use crate::router::{build_routing_plan, gate_top1, permute_rows, radix_sort_pairs, unpermute_rows, GateDecision};
use crate::tensor::{ExpertWeights, F32Matrix, HalfMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Dequant,
    Routing,
    Gemm,
    E2e,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["dequant", "routing", "gemm", "e2e", "all"];

    pub fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Dequant, Suite::Routing, Suite::Gemm, Suite::E2e],
            s => vec![s],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Dequant => "dequant",
            Suite::Routing => "routing",
            Suite::Gemm => "gemm",
            Suite::E2e => "e2e",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dequant" => Ok(Suite::Dequant),
            "routing" => Ok(Suite::Routing),
            "gemm" => Ok(Suite::Gemm),
            "e2e" => Ok(Suite::E2e),
            "all" => Ok(Suite::All),
            other => {
                Err(Error::Invalid(format!("unknown suite {other:?}, expected one of {}", Self::NAMES.join(", "))))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyConfig {
    pub seed: u64,
    pub constants: MagicConstants,
    /// Random FP16 scales per dequant sweep.
    pub scales: usize,
    pub routing_cases: usize,
    pub gemm_cases: usize,
    pub e2e_cases: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0x5eed,
            constants: MagicConstants::EXACT,
            scales: 1000,
            routing_cases: 10_000,
            gemm_cases: 1000,
            e2e_cases: 100,
        }
    }
}

impl VerifyConfig {
    /// Default sizes with the dequant constants taken from the environment.
    pub fn from_env() -> Self {
        VerifyConfig { constants: MagicConstants::from_env(), ..Default::default() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// The first few failure descriptions.
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport { name: name.into(), ..Default::default() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.failures.len() < 5 {
            self.failures.push(what());
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8} {:>7}/{:<7} {}", self.name, self.passed, self.total, if self.ok() { "ok" } else { "FAILED" })?;
        for msg in &self.failures {
            write!(f, "\n    {msg}")?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> Vec<SuiteReport> {
    suite
        .expand()
        .into_iter()
        .map(|s| match s {
            Suite::Dequant => dequant_suite(cfg),
            Suite::Routing => routing_suite(cfg),
            Suite::Gemm => gemm_suite(cfg),
            Suite::E2e => e2e_suite(cfg),
            Suite::All => unreachable!("expanded"),
        })
        .collect()
}

/// Finite positive FP16 values spread over the normal and subnormal range.
pub fn random_scales(rng: &mut impl Rng, n: usize) -> Vec<Half> {
    (0..n).map(|_| Half::from_bits(rng.random_range(0x0001..0x7c00))).collect()
}

pub fn random_half_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> HalfMatrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    HalfMatrix::from_fn(rows, cols, |_, _| Half::from_f32(normal.sample(rng)))
}

pub fn random_expert_linear(
    rng: &mut impl Rng,
    experts: usize,
    m: usize,
    n: usize,
    precision: Precision,
) -> Result<ExpertLinear> {
    let w = random_half_matrix(rng, experts * m, n, 0.3);
    let w = ExpertWeights::from_vec(experts, m, n, w.into_vec())?;
    let bias = random_half_matrix(rng, experts, n, 0.1);
    let store = match precision.bits() {
        None => ExpertStore::Half(w),
        Some(bits) => ExpertStore::Quant(quantize(&w, bits)?),
    };
    ExpertLinear::new(store, bias)
}

pub fn random_moe_ffn(rng: &mut impl Rng, d: usize, f: usize, experts: usize, precision: Precision) -> Result<MoeFfn> {
    let norm = LayerNorm {
        gamma: random_half_matrix(rng, 1, d, 0.2)
            .into_vec()
            .into_iter()
            .map(|g| Half::from_f32(1.0 + g.to_f32()))
            .collect(),
        beta: random_half_matrix(rng, 1, d, 0.1).into_vec(),
    };
    Ok(MoeFfn {
        norm,
        gate: Linear {
            weight: random_half_matrix(rng, d, experts, 0.5),
            bias: random_half_matrix(rng, 1, experts, 0.1).into_vec(),
        },
        w1: random_expert_linear(rng, experts, d, f, precision)?,
        w2: random_expert_linear(rng, experts, f, d, precision)?,
    })
}

fn random_precision(rng: &mut impl Rng) -> Precision {
    [Precision::Fp16, Precision::Int8, Precision::Int4][rng.random_range(0..3)]
}

/// Exhaustive lane-level sweep of the magic I2F path against the native
/// conversion, for every stored value, lane position and scale.
pub fn dequant_sweep(scales: &[Half], k: &MagicConstants, report: &mut SuiteReport) {
    for v in 0..=255u8 {
        for lane in 0..4 {
            let mut bytes = [0u8; 4];
            for (i, b) in bytes.iter_mut().enumerate() {
                *b = v.wrapping_add((97 * i + 31) as u8);
            }
            bytes[lane] = v;
            let fast = i2f_magic_u8_with(bytes, k)[lane];
            report.check(fast.to_bits() == Half::from_f32(v as f32 - 128.0).to_bits(), || {
                format!("int8 I2F of {v} in lane {lane} gave {fast:?}")
            });
            let bad = scales
                .iter()
                .find(|&&s| half_mul(fast, s).to_bits() != dequantize_value_naive(v, s, Bits::Int8).to_bits());
            report.check(bad.is_none(), || format!("int8 value {v} lane {lane} differs at scale {:?}", bad.unwrap()));
        }
    }
    for v in 0..16u32 {
        for pos in 0..8 {
            let mut word = 0u32;
            for slot in 0..8 {
                word |= ((v + 5 * slot as u32 + 3) & 0xf) << (4 * slot);
            }
            let slot = int4_storage_slot(pos);
            word = (word & !(0xf << (4 * slot))) | (v << (4 * slot));
            let fast = i2f_magic_u4_with(word, k)[pos];
            report.check(fast.to_bits() == Half::from_f32(v as f32 - 8.0).to_bits(), || {
                format!("int4 I2F of {v} at position {pos} gave {fast:?}")
            });
            let bad = scales
                .iter()
                .find(|&&s| half_mul(fast, s).to_bits() != dequantize_value_naive(v as u8, s, Bits::Int4).to_bits());
            report
                .check(bad.is_none(), || format!("int4 value {v} position {pos} differs at scale {:?}", bad.unwrap()));
        }
    }
}

fn dequant_suite(cfg: &VerifyConfig) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut r = SuiteReport::new("dequant");
    r.check(compose_magic(3).to_bits() == 0x6403 && compose_magic(3).to_f32() == 1027.0, || {
        "compose_magic(3) != 0x6403".into()
    });
    for y in 0..1024u16 {
        r.check(compose_magic(y).to_f32() == 1024.0 + y as f32, || format!("compose_magic({y}) wrong"));
    }
    let int8_k = Half::from_bits((cfg.constants.int8_bias & 0xffff) as u16);
    let int4_k = Half::from_bits((cfg.constants.int4_bias & 0xffff) as u16);
    for v in 0..256u16 {
        let got = half_sub(compose_magic(v), int8_k).to_f32();
        r.check(got == v as f32 - 128.0, || format!("int8 subtraction of {v} gave {got}"));
    }
    for v in 0..16u16 {
        let got = half_sub(compose_magic(v), int4_k).to_f32();
        r.check(got == v as f32 - 8.0, || format!("int4 subtraction of {v} gave {got}"));
    }
    let scales = random_scales(&mut rng, cfg.scales);
    dequant_sweep(&scales, &cfg.constants, &mut r);
    for case in 0..20 {
        let bits = if case % 2 == 0 { Bits::Int8 } else { Bits::Int4 };
        let n = 8 * rng.random_range(1..9);
        let w = random_half_matrix(&mut rng, 3 * 5, n, 1.0);
        let w = ExpertWeights::from_vec(3, 5, n, w.into_vec()).expect("sized");
        let q = quantize(&w, bits).expect("finite");
        let ok = dequantize_fast_with(&q, &cfg.constants).bit_eq(&dequantize_naive(&q));
        r.check(ok, || format!("{bits:?} matrix dequantize mismatch (case {case})"));
    }
    r
}

fn routing_suite(cfg: &VerifyConfig) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 1);
    let mut r = SuiteReport::new("routing");
    for case in 0..cfg.routing_cases {
        let t = rng.random_range(0..=256);
        let e = rng.random_range(1..=64);
        let logits = F32Matrix::from_fn(t, e, |_, _| rng.random_range(-4.0..4.0));
        let finished: Vec<bool> = (0..t).map(|_| rng.random_bool(0.2)).collect();
        let problems = check_routing_instance(&logits, &finished, &mut rng);
        r.check(problems.is_none(), || format!("case {case} (T={t}, E={e}): {}", problems.unwrap()));
    }
    for case in 0..100 {
        let n = rng.random_range(0..300);
        let width: u32 = rng.random_range(1..32);
        let keys: Vec<u32> = (0..n).map(|_| rng.random_range(0..1u32 << width)).collect();
        let vals: Vec<u32> = (0..n as u32).collect();
        let (k, v) = radix_sort_pairs(&keys, &vals);
        let mut want: Vec<(u32, u32)> = keys.iter().copied().zip(vals).collect();
        want.sort_by_key(|p| p.0);
        let got: Vec<(u32, u32)> = k.into_iter().zip(v).collect();
        r.check(got == want, || format!("radix sort case {case} differs from a stable sort"));
    }
    r
}

/// Checks one routing instance; returns a description of the first broken
/// invariant.
pub fn check_routing_instance(logits: &F32Matrix, finished: &[bool], rng: &mut impl Rng) -> Option<String> {
    let (t, e) = logits.shape();
    let decisions = match gate_top1(logits) {
        Ok(d) => d,
        Err(err) => return Some(format!("gate failed: {err}")),
    };
    let plan = match build_routing_plan(&decisions, finished, e) {
        Ok(p) => p,
        Err(err) => return Some(format!("plan failed: {err}")),
    };
    let perm = plan.permutation();
    let mut seen = vec![false; t];
    for &p in perm {
        if p >= t || std::mem::replace(&mut seen[p], true) {
            return Some("permutation is not a bijection".into());
        }
    }
    if (0..t).any(|i| plan.inverse_permutation()[perm[i]] != i) {
        return Some("inverse permutation wrong".into());
    }
    let key = |row: usize| if finished[row] { e } else { decisions[row].expert_idx as usize };
    for w in perm.windows(2) {
        let (a, b) = (key(w[0]), key(w[1]));
        if a > b || (a == b && w[0] > w[1]) {
            return Some(format!("order not sorted/stable at rows {} {}", w[0], w[1]));
        }
    }
    let offsets = plan.expert_offsets();
    if offsets.len() != e + 1 || offsets[0] != 0 || offsets[e] != plan.active_rows() {
        return Some(format!("bad offsets {offsets:?}"));
    }
    if plan.active_rows() != finished.iter().filter(|&&f| !f).count() {
        return Some("active rows != unfinished rows".into());
    }
    for x in 0..e {
        if plan.expert_rows(x).any(|i| key(perm[i]) != x) {
            return Some(format!("expert {x} group holds foreign rows"));
        }
    }
    if (0..t).any(|row| plan.is_pruned(row) != finished[row]) {
        return Some("pruned rows differ from finished flags".into());
    }
    let x = HalfMatrix::from_fn(t, 3, |_, _| Half::from_bits(rng.random()));
    match permute_rows(&x, &plan).and_then(|p| unpermute_rows(&p, &plan)) {
        Ok(back) if back.bit_eq(&x) => None,
        Ok(_) => Some("unpermute(permute(x)) != x".into()),
        Err(err) => Some(format!("permute failed: {err}")),
    }
}

/// One random grouped-GEMM instance against the per-token oracle.
pub fn check_gemm_instance(rng: &mut impl Rng, constants: MagicConstants) -> std::result::Result<(), String> {
    let experts = rng.random_range(1..=8);
    let t = rng.random_range(0..=64);
    let k = rng.random_range(1..=64);
    let n = 8 * rng.random_range(1..=8);
    let precision = random_precision(rng);
    let layer = random_expert_linear(rng, experts, k, n, precision).map_err(|e| e.to_string())?;
    let x = random_half_matrix(rng, t, k, 1.0);
    let decisions: Vec<GateDecision> = (0..t)
        .map(|r| GateDecision {
            expert_scale: Half::ONE,
            expert_idx: rng.random_range(0..experts) as u32,
            row_idx: r as u32,
        })
        .collect();
    let finished: Vec<bool> = (0..t).map(|_| rng.random_bool(0.15)).collect();
    let plan = build_routing_plan(&decisions, &finished, experts).map_err(|e| e.to_string())?;
    let x_perm = permute_rows(&x, &plan).map_err(|e| e.to_string())?;
    let assign: Vec<Option<usize>> = (0..t)
        .map(|i| {
            let d = plan.sorted_decisions()[i];
            (i < plan.active_rows()).then_some(d.expert_idx as usize)
        })
        .collect();
    let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::None };
    let want = grouped_gemm_oracle(&x_perm, &assign, &layer, act);
    let problems = make_grouped_problems(&plan, &layer).map_err(|e| e.to_string())?;
    for dequant in [DequantMode::Fused, DequantMode::SeparatePass] {
        let opts = GemmOptions { row_tile: rng.random_range(1..=64), dequant, constants };
        let got =
            grouped_gemm(&x_perm, &problems, act, &opts, &mut TrafficCounter::default()).map_err(|e| e.to_string())?;
        let got = if got.cols() == 0 { HalfMatrix::zeros(t, n) } else { got };
        if !got.bit_eq(&want) {
            return Err(format!("{precision} E={experts} T={t} K={k} N={n} {dequant:?}: output differs from oracle"));
        }
    }
    Ok(())
}

fn gemm_suite(cfg: &VerifyConfig) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 2);
    let mut r = SuiteReport::new("gemm");
    for _ in 0..cfg.gemm_cases {
        let res = check_gemm_instance(&mut rng, cfg.constants);
        r.check(res.is_ok(), || res.unwrap_err());
    }
    r
}

/// One random MoE layer instance against the per-token oracle.
pub fn check_moe_instance(rng: &mut impl Rng, constants: MagicConstants) -> std::result::Result<(), String> {
    let d = 8 * rng.random_range(1..=4);
    let f = 8 * rng.random_range(1..=8);
    let experts = rng.random_range(1..=8);
    let t = rng.random_range(1..=48);
    let precision = random_precision(rng);
    let w = random_moe_ffn(rng, d, f, experts, precision).map_err(|e| e.to_string())?;
    let x = random_half_matrix(rng, t, d, 1.0);
    let finished: Vec<bool> = (0..t).map(|_| rng.random_bool(0.2)).collect();
    let want = moe_ffn_oracle(&x, &w, &finished).map_err(|e| e.to_string())?;
    let opts = GemmOptions { constants, ..Default::default() };
    let got =
        moe_ffn_forward_with(&x, &w, &finished, &opts, &mut TrafficCounter::default()).map_err(|e| e.to_string())?;
    if got.bit_eq(&want) {
        Ok(())
    } else {
        Err(format!("{precision} d={d} f={f} E={experts} T={t}: MoE layer differs from per-token oracle"))
    }
}

fn e2e_suite(cfg: &VerifyConfig) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 3);
    let mut r = SuiteReport::new("e2e");
    for _ in 0..cfg.e2e_cases {
        let res = check_moe_instance(&mut rng, cfg.constants);
        r.check(res.is_ok(), || res.unwrap_err());
    }
    let small = ModelConfig {
        d_model: 16,
        d_ffn: 32,
        n_enc_layers: 2,
        n_dec_layers: 1,
        n_experts: 4,
        n_heads: 2,
        vocab_size: 16,
        moe_every: 2,
        max_positions: 16,
    };
    for seed in 0..4 {
        let mut model = Model::random(small, cfg.seed + seed).expect("valid config");
        model.set_output_bias(EOS, 0.05).expect("EOS in vocab");
        for precision in [Precision::Fp16, Precision::Int8, Precision::Int4] {
            let m = match precision.bits() {
                None => model.clone(),
                Some(b) => model.quantize_experts(b).expect("fp16 experts"),
            };
            let bytes = m.to_checkpoint().to_bytes();
            let round = Checkpoint::from_bytes(&bytes).and_then(|c| Model::from_checkpoint(&c));
            r.check(round.as_ref().is_ok_and(|b| *b == m && b.to_checkpoint().to_bytes() == bytes), || {
                format!("{precision} checkpoint round trip failed (seed {seed})")
            });
            let src: Vec<Vec<u32>> =
                (0..3).map(|_| (0..rng.random_range(2..8)).map(|_| rng.random_range(3..16)).collect()).collect();
            for beam in [1, 2] {
                let mut opts = DecodeOptions { beam, prune: true, max_len: 8, ..Default::default() };
                opts.gemm.constants = cfg.constants;
                let on = beam_search_decode(&m, &src, &opts);
                opts.prune = false;
                let off = beam_search_decode(&m, &src, &opts);
                let ok = match (&on, &off) {
                    (Ok(a), Ok(b)) => {
                        a.sequences == b.sequences && a.traffic().weight_bytes_read <= b.traffic().weight_bytes_read
                    }
                    _ => false,
                };
                r.check(ok, || format!("{precision} beam {beam}: pruning changed the output (seed {seed})"));
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyConfig {
        VerifyConfig { scales: 20, routing_cases: 300, gemm_cases: 40, e2e_cases: 10, ..Default::default() }
    }

    #[test]
    fn suites_pass_with_exact_constants() {
        for r in run_suite(Suite::All, &quick()) {
            assert!(r.ok(), "{r}");
            assert!(r.total > 0);
        }
    }

    #[test]
    fn faulty_constants_fail_dequant() {
        let cfg = VerifyConfig { constants: MagicConstants::FAULTY, ..quick() };
        let r = run_suite(Suite::Dequant, &cfg).pop().unwrap();
        assert!(!r.ok());
        assert!(!r.failures.is_empty());
    }

    #[test]
    fn suite_names() {
        for n in Suite::NAMES {
            assert_eq!(n.parse::<Suite>().unwrap().name(), n);
        }
        assert!("dequantize".parse::<Suite>().is_err());
        assert_eq!(Suite::All.expand().len(), 4);
    }
}
