//! Binary checkpoint format.
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "MOEC"
//! version      u32      1
//! config       9 x u32  d_model d_ffn n_enc_layers n_dec_layers n_experts
//!                       n_heads vocab_size moe_every max_positions
//! groups       u8 count, then count x (u8 group, u8 dtype)
//!                       group 0 = dense tensors, 1 = expert matrices
//! tensors      u32 count, then count records:
//!   name_len   u16, name (utf-8)
//!   dtype      u8   0 = f16, 1 = u8-offset, 2 = u4-interleaved
//!   layout     u8   0 = linear, 1 = int4_interleaved
//!   ndim       u8, ndim x u32 dims
//!   data_len   u64, data bytes
//!   has_scales u8, then if 1: u32 count, count x u16 (f16 bits)
//! ```
//!
//! Expert matrices are `(E, M, N)`; their scales are `(E, 1, N)` flattened.
//! f16 data is stored as the raw little-endian bit patterns.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grouped_gemm::{ExpertLinear, ExpertStore, Precision};
use crate::half_float::Half;
use crate::model::{
    AttentionWeights, DecoderLayer, DenseFfn, EncoderLayer, FfnWeights, LayerNorm, Linear, Model, ModelConfig, MoeFfn,
};
use crate::quantizer::{Bits, Layout, QuantizedExpertWeights};
use crate::tensor::{ExpertWeights, HalfMatrix};

pub const MAGIC: [u8; 4] = *b"MOEC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F16 = 0,
    U8Offset = 1,
    U4Interleaved = 2,
}

impl DType {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DType::F16),
            1 => Ok(DType::U8Offset),
            2 => Ok(DType::U4Interleaved),
            _ => Err(Error::Format(format!("unknown dtype tag {v}"))),
        }
    }

    pub fn precision(self) -> Precision {
        match self {
            DType::F16 => Precision::Fp16,
            DType::U8Offset => Precision::Int8,
            DType::U4Interleaved => Precision::Int4,
        }
    }

    fn data_len(self, elements: usize) -> usize {
        match self {
            DType::F16 => 2 * elements,
            DType::U8Offset => elements,
            DType::U4Interleaved => elements / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorGroup {
    Dense = 0,
    Experts = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub layout: Layout,
    pub shape: Vec<u32>,
    pub data: Vec<u8>,
    pub scales: Option<Vec<Half>>,
}

impl TensorRecord {
    pub fn elements(&self) -> usize {
        self.shape.iter().map(|&d| d as usize).product()
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Format(format!("tensor {}: {m}", self.name)));
        let want = self.dtype.data_len(self.elements());
        if self.data.len() != want {
            return fail(format!("{} data bytes, {:?} x {:?} needs {want}", self.data.len(), self.dtype, self.shape));
        }
        let want_layout = if self.dtype == DType::U4Interleaved { Layout::Int4Interleaved } else { Layout::Linear };
        if self.layout != want_layout {
            return fail(format!("{:?} tensor with {:?} layout", self.dtype, self.layout));
        }
        match (self.dtype, &self.scales) {
            (DType::F16, None) => Ok(()),
            (DType::F16, Some(_)) => fail("f16 tensor carries scales".into()),
            (_, None) => fail("quantized tensor without scales".into()),
            (_, Some(s)) => {
                if self.shape.len() != 3 {
                    return fail(format!("quantized tensor must be 3-d, got {:?}", self.shape));
                }
                let channels = (self.shape[0] * self.shape[2]) as usize;
                if s.len() != channels {
                    return fail(format!("{} scales for {channels} channels", s.len()));
                }
                Ok(())
            }
        }
    }

    fn f16(name: String, shape: Vec<u32>, values: &[Half]) -> Self {
        let data = values.iter().flat_map(|h| h.to_bits().to_le_bytes()).collect();
        TensorRecord { name, dtype: DType::F16, layout: Layout::Linear, shape, data, scales: None }
    }

    fn half_values(&self) -> Result<Vec<Half>> {
        if self.dtype != DType::F16 {
            return Err(Error::Format(format!("tensor {} is {:?}, expected f16", self.name, self.dtype)));
        }
        Ok(self.data.chunks_exact(2).map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]]))).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub groups: Vec<(TensorGroup, DType)>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn expert_precision(&self) -> Precision {
        self.groups
            .iter()
            .find(|(g, _)| *g == TensorGroup::Experts)
            .map(|(_, d)| d.precision())
            .unwrap_or(Precision::Fp16)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        for v in config_fields(&self.config) {
            put_u32(&mut out, v as u32);
        }
        out.push(self.groups.len() as u8);
        for &(g, d) in &self.groups {
            out.push(g as u8);
            out.push(d as u8);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype as u8);
            out.push(match t.layout {
                Layout::Linear => 0,
                Layout::Int4Interleaved => 1,
            });
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.data);
            match &t.scales {
                None => out.push(0),
                Some(s) => {
                    out.push(1);
                    put_u32(&mut out, s.len() as u32);
                    for h in s {
                        out.extend_from_slice(&h.to_bits().to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a MOEC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut f = [0usize; 9];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            d_model: f[0],
            d_ffn: f[1],
            n_enc_layers: f[2],
            n_dec_layers: f[3],
            n_experts: f[4],
            n_heads: f[5],
            vocab_size: f[6],
            moe_every: f[7],
            max_positions: f[8],
        };
        config.validate().map_err(|e| Error::Format(format!("header config: {e}")))?;
        let n_groups = r.u8()?;
        let mut groups = Vec::with_capacity(n_groups as usize);
        for _ in 0..n_groups {
            let g = match r.u8()? {
                0 => TensorGroup::Dense,
                1 => TensorGroup::Experts,
                v => return Err(Error::Format(format!("unknown tensor group {v}"))),
            };
            groups.push((g, DType::from_u8(r.u8()?)?));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let dtype = DType::from_u8(r.u8()?)?;
            let layout = match r.u8()? {
                0 => Layout::Linear,
                1 => Layout::Int4Interleaved,
                v => return Err(Error::Format(format!("tensor {name}: unknown layout {v}"))),
            };
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let data_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("data length overflow".into()))?;
            let data = r.take(data_len)?.to_vec();
            let scales = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.u32()? as usize;
                    let raw = r.take(n.checked_mul(2).ok_or_else(|| Error::Format("scale count overflow".into()))?)?;
                    Some(raw.chunks_exact(2).map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]]))).collect())
                }
                v => return Err(Error::Format(format!("tensor {name}: bad has_scales flag {v}"))),
            };
            let t = TensorRecord { name, dtype, layout, shape, data, scales };
            t.validate()?;
            tensors.push(t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, groups, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn config_fields(c: &ModelConfig) -> [usize; 9] {
    [
        c.d_model,
        c.d_ffn,
        c.n_enc_layers,
        c.n_dec_layers,
        c.n_experts,
        c.n_heads,
        c.vocab_size,
        c.moe_every,
        c.max_positions,
    ]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Collect(Vec<TensorRecord>);

impl Collect {
    fn half(&mut self, name: String, shape: &[usize], values: &[Half]) {
        self.0.push(TensorRecord::f16(name, shape.iter().map(|&d| d as u32).collect(), values));
    }

    fn matrix(&mut self, name: String, m: &HalfMatrix) {
        self.half(name, &[m.rows(), m.cols()], m.as_slice());
    }

    fn norm(&mut self, p: &str, ln: &LayerNorm) {
        self.half(format!("{p}.gamma"), &[ln.gamma.len()], &ln.gamma);
        self.half(format!("{p}.beta"), &[ln.beta.len()], &ln.beta);
    }

    fn linear(&mut self, p: &str, l: &Linear) {
        self.matrix(format!("{p}.weight"), &l.weight);
        self.half(format!("{p}.bias"), &[l.bias.len()], &l.bias);
    }

    fn attention(&mut self, p: &str, a: &AttentionWeights) {
        self.norm(&format!("{p}.norm"), &a.norm);
        for (n, l) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
            self.linear(&format!("{p}.{n}"), l);
        }
    }

    fn experts(&mut self, p: &str, l: &ExpertLinear) {
        let (e, m, n) = l.weights.shape();
        let shape = vec![e as u32, m as u32, n as u32];
        match &l.weights {
            ExpertStore::Half(w) => self.half(format!("{p}.weight"), &[e, m, n], w.as_slice()),
            ExpertStore::Quant(q) => {
                let (dtype, layout) = match q.bits() {
                    Bits::Int8 => (DType::U8Offset, Layout::Linear),
                    Bits::Int4 => (DType::U4Interleaved, Layout::Int4Interleaved),
                };
                self.0.push(TensorRecord {
                    name: format!("{p}.weight"),
                    dtype,
                    layout,
                    shape,
                    data: q.packed().to_vec(),
                    scales: Some(q.scales().to_vec()),
                });
            }
        }
        self.matrix(format!("{p}.bias"), &l.bias);
    }

    fn ffn(&mut self, p: &str, f: &FfnWeights) {
        match f {
            FfnWeights::Dense(d) => {
                self.norm(&format!("{p}.norm"), &d.norm);
                self.linear(&format!("{p}.w1"), &d.w1);
                self.linear(&format!("{p}.w2"), &d.w2);
            }
            FfnWeights::Moe(m) => {
                self.norm(&format!("{p}.norm"), &m.norm);
                self.linear(&format!("{p}.gate"), &m.gate);
                self.experts(&format!("{p}.experts.w1"), &m.w1);
                self.experts(&format!("{p}.experts.w2"), &m.w2);
            }
        }
    }
}

struct Lookup<'a> {
    by_name: HashMap<&'a str, &'a TensorRecord>,
}

impl Lookup<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<&TensorRecord> {
        let t = self.by_name.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let got: Vec<usize> = t.shape.iter().map(|&d| d as usize).collect();
        if got != shape {
            return Err(Error::Format(format!("tensor {name} has shape {got:?}, expected {shape:?}")));
        }
        Ok(t)
    }

    fn half(&self, name: &str, shape: &[usize]) -> Result<Vec<Half>> {
        self.get(name, shape)?.half_values()
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<HalfMatrix> {
        HalfMatrix::from_vec(rows, cols, self.half(name, &[rows, cols])?)
    }

    fn norm(&self, p: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm { gamma: self.half(&format!("{p}.gamma"), &[d])?, beta: self.half(&format!("{p}.beta"), &[d])? })
    }

    fn linear(&self, p: &str, inp: usize, out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.matrix(&format!("{p}.weight"), inp, out)?,
            bias: self.half(&format!("{p}.bias"), &[out])?,
        })
    }

    fn attention(&self, p: &str, d: usize, n_heads: usize) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            n_heads,
            norm: self.norm(&format!("{p}.norm"), d)?,
            q: self.linear(&format!("{p}.q"), d, d)?,
            k: self.linear(&format!("{p}.k"), d, d)?,
            v: self.linear(&format!("{p}.v"), d, d)?,
            o: self.linear(&format!("{p}.o"), d, d)?,
        })
    }

    fn experts(&self, p: &str, e: usize, m: usize, n: usize, dtype: DType) -> Result<ExpertLinear> {
        let name = format!("{p}.weight");
        let t = self.get(&name, &[e, m, n])?;
        if t.dtype != dtype {
            return Err(Error::Format(format!("tensor {name} is {:?}, header says {dtype:?}", t.dtype)));
        }
        let weights = match t.dtype {
            DType::F16 => ExpertStore::Half(ExpertWeights::from_vec(e, m, n, t.half_values()?)?),
            DType::U8Offset | DType::U4Interleaved => {
                let bits = if t.dtype == DType::U8Offset { Bits::Int8 } else { Bits::Int4 };
                let scales = t.scales.clone().expect("validated");
                ExpertStore::Quant(QuantizedExpertWeights::from_parts(
                    bits,
                    (e, m, n),
                    t.data.clone(),
                    scales,
                    t.layout,
                )?)
            }
        };
        ExpertLinear::new(weights, self.matrix(&format!("{p}.bias"), e, n)?)
    }

    fn ffn(&self, p: &str, cfg: &ModelConfig, moe: bool, dtype: DType) -> Result<FfnWeights> {
        let (d, f, e) = (cfg.d_model, cfg.d_ffn, cfg.n_experts);
        let norm = self.norm(&format!("{p}.norm"), d)?;
        Ok(if moe {
            FfnWeights::Moe(MoeFfn {
                norm,
                gate: self.linear(&format!("{p}.gate"), d, e)?,
                w1: self.experts(&format!("{p}.experts.w1"), e, d, f, dtype)?,
                w2: self.experts(&format!("{p}.experts.w2"), e, f, d, dtype)?,
            })
        } else {
            FfnWeights::Dense(DenseFfn {
                norm,
                w1: self.linear(&format!("{p}.w1"), d, f)?,
                w2: self.linear(&format!("{p}.w2"), f, d)?,
            })
        })
    }
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Collect(Vec::new());
        c.matrix("tok_embed".into(), &self.tok_embed);
        c.matrix("pos_embed".into(), &self.pos_embed);
        for (i, l) in self.encoder.iter().enumerate() {
            c.attention(&format!("enc.{i}.attn"), &l.attn);
            c.ffn(&format!("enc.{i}.ffn"), &l.ffn);
        }
        c.norm("enc_norm", &self.enc_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            c.attention(&format!("dec.{i}.self_attn"), &l.self_attn);
            c.attention(&format!("dec.{i}.cross_attn"), &l.cross_attn);
            c.ffn(&format!("dec.{i}.ffn"), &l.ffn);
        }
        c.norm("dec_norm", &self.dec_norm);
        c.linear("out_proj", &self.out_proj);
        let expert_dtype = match self.expert_precision() {
            Precision::Fp16 => DType::F16,
            Precision::Int8 => DType::U8Offset,
            Precision::Int4 => DType::U4Interleaved,
        };
        Checkpoint {
            config: self.config,
            groups: vec![(TensorGroup::Dense, DType::F16), (TensorGroup::Experts, expert_dtype)],
            tensors: c.0,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let cfg = ckpt.config;
        cfg.validate()?;
        let mut by_name = HashMap::new();
        for t in &ckpt.tensors {
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
        }
        let dense = ckpt.groups.iter().find(|(g, _)| *g == TensorGroup::Dense).map(|(_, d)| *d);
        if dense.is_some_and(|d| d != DType::F16) {
            return Err(Error::Format("dense tensors must be f16".into()));
        }
        let expert_dtype = ckpt
            .groups
            .iter()
            .find(|(g, _)| *g == TensorGroup::Experts)
            .map(|(_, d)| *d)
            .ok_or_else(|| Error::Format("header lacks an expert precision tag".into()))?;
        let lk = Lookup { by_name };
        let d = cfg.d_model;
        let encoder = (0..cfg.n_enc_layers)
            .map(|i| {
                Ok(EncoderLayer {
                    attn: lk.attention(&format!("enc.{i}.attn"), d, cfg.n_heads)?,
                    ffn: lk.ffn(&format!("enc.{i}.ffn"), &cfg, cfg.is_moe_layer(i), expert_dtype)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.n_dec_layers)
            .map(|i| {
                Ok(DecoderLayer {
                    self_attn: lk.attention(&format!("dec.{i}.self_attn"), d, cfg.n_heads)?,
                    cross_attn: lk.attention(&format!("dec.{i}.cross_attn"), d, cfg.n_heads)?,
                    ffn: lk.ffn(&format!("dec.{i}.ffn"), &cfg, cfg.is_moe_layer(i), expert_dtype)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            config: cfg,
            tok_embed: lk.matrix("tok_embed", cfg.vocab_size, d)?,
            pos_embed: lk.matrix("pos_embed", cfg.max_positions, d)?,
            encoder,
            enc_norm: lk.norm("enc_norm", d)?,
            decoder,
            dec_norm: lk.norm("dec_norm", d)?,
            out_proj: lk.linear("out_proj", d, cfg.vocab_size)?,
        };
        let expected = model.to_checkpoint().tensors.len();
        if expected != ckpt.tensors.len() {
            return Err(Error::Format(format!("{} tensors, config implies {expected}", ckpt.tensors.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Byte counts reported by a quantization run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeSummary {
    pub expert_params: usize,
    /// `4 * expert_params`.
    pub fp32_expert_bytes: usize,
    pub fp16_expert_bytes: usize,
    /// Packed weights plus scales.
    pub quantized_expert_bytes: usize,
    pub file_bytes_before: usize,
    pub file_bytes_after: usize,
}

impl SizeSummary {
    pub fn ratio_vs_fp32(&self) -> f64 {
        self.quantized_expert_bytes as f64 / self.fp32_expert_bytes as f64
    }
}

/// Quantizes every expert matrix of an FP16 checkpoint. Non-expert records
/// come out byte-identical.
pub fn quantize_checkpoint(ckpt: &Checkpoint, bits: Bits) -> Result<(Checkpoint, SizeSummary)> {
    if ckpt.expert_precision() != Precision::Fp16 {
        return Err(Error::Invalid(format!("checkpoint experts are already quantized ({})", ckpt.expert_precision())));
    }
    let model = Model::from_checkpoint(ckpt)?;
    let q = model.quantize_experts(bits)?;
    let out = q.to_checkpoint();
    let summary = SizeSummary {
        expert_params: model.expert_param_count(),
        fp32_expert_bytes: 4 * model.expert_param_count(),
        fp16_expert_bytes: model.expert_payload_bytes(),
        quantized_expert_bytes: q.expert_payload_bytes(),
        file_bytes_before: ckpt.to_bytes().len(),
        file_bytes_after: out.to_bytes().len(),
    };
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ffn: 32,
            n_enc_layers: 2,
            n_dec_layers: 1,
            n_experts: 3,
            n_heads: 2,
            vocab_size: 10,
            moe_every: 2,
            max_positions: 8,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for bits in [None, Some(Bits::Int8), Some(Bits::Int4)] {
            let mut m = Model::random(tiny(), 4).unwrap();
            if let Some(b) = bits {
                m = m.quantize_experts(b).unwrap();
            }
            let bytes = m.to_checkpoint().to_bytes();
            let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = Model::random(tiny(), 1).unwrap().to_checkpoint().to_bytes();
        assert_eq!(&bytes[..4], b"MOEC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
        assert_eq!(&bytes[44..49], &[2, 0, 0, 1, 0]);
    }

    #[test]
    fn rejects_malformed_input() {
        let bytes = Model::random(tiny(), 1).unwrap().to_checkpoint().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn inconsistent_record_rejected() {
        let mut ck = Model::random(tiny(), 1).unwrap().quantize_experts(Bits::Int4).unwrap().to_checkpoint();
        let t = ck.tensors.iter_mut().find(|t| t.dtype == DType::U4Interleaved).unwrap();
        t.layout = Layout::Linear;
        assert!(Checkpoint::from_bytes(&ck.to_bytes()).is_err());
    }

    #[test]
    fn quantize_keeps_dense_records() {
        let ck = Model::random(tiny(), 2).unwrap().to_checkpoint();
        let (q, summary) = quantize_checkpoint(&ck, Bits::Int4).unwrap();
        for t in &q.tensors {
            let orig = ck.tensor(&t.name).unwrap();
            if t.name.contains(".experts.") && t.name.ends_with(".weight") {
                assert_eq!(t.dtype, DType::U4Interleaved);
            } else {
                assert_eq!(t, orig);
            }
        }
        assert_eq!(summary.fp32_expert_bytes, 2 * summary.fp16_expert_bytes);
        assert!(summary.file_bytes_after < summary.file_bytes_before);
        assert!(matches!(quantize_checkpoint(&q, Bits::Int4), Err(Error::Invalid(_))));
    }
}
