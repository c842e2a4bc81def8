//! Toy encoder-decoder transformer whose feed-forward blocks alternate
//! between dense and mixture-of-experts layers.

mod decode;
mod layers;

pub use decode::{beam_search_decode, DecodeOptions, DecodeOutput, DecodeState, Hypothesis, StepTrace};
pub use layers::{
    attend, attention_forward, dense_ffn_forward, layer_norm, moe_ffn_forward, moe_ffn_forward_with, AttentionWeights,
    DenseFfn, FfnWeights, LayerNorm, Linear, MoeFfn, LAYER_NORM_EPS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouped_gemm::{linear_f32, ExpertLinear, ExpertStore, GemmOptions, Precision, TrafficCounter};
use crate::half_float::{half_add, Half};
use crate::quantizer::{quantize, Bits};
use crate::tensor::{ExpertWeights, F32Matrix, HalfMatrix};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id that is an ordinary vocabulary token.
pub const FIRST_WORD: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_experts: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Layer `i` of each stack is an MoE layer when `i % moe_every == 0`.
    pub moe_every: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    /// Desk-scale shape: 4x FFN width, 2:1 encoder:decoder depth, MoE on
    /// every other layer.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ffn: 256,
            n_enc_layers: 4,
            n_dec_layers: 2,
            n_experts: 8,
            n_heads: 4,
            vocab_size: 256,
            moe_every: 2,
            max_positions: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ffn == 0 || !self.d_ffn.is_multiple_of(8) || !self.d_model.is_multiple_of(8) {
            return fail(format!("d_model {} and d_ffn {} must be multiples of 8", self.d_model, self.d_ffn));
        }
        if self.moe_every == 0 {
            return fail("moe_every must be at least 1".into());
        }
        if self.n_experts == 0 {
            return fail("n_experts must be at least 1".into());
        }
        if self.vocab_size <= FIRST_WORD as usize {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.max_positions == 0 {
            return fail("layer counts and max_positions must be positive".into());
        }
        Ok(())
    }

    #[inline]
    pub fn is_moe_layer(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.moe_every)
    }

    pub fn moe_layers_in(&self, layers: usize) -> usize {
        (0..layers).filter(|&i| self.is_moe_layer(i)).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionWeights,
    pub ffn: FfnWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub ffn: FfnWeights,
}

/// A complete model. Immutable once built; share freely across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_embed: HalfMatrix,
    pub pos_embed: HalfMatrix,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub out_proj: Linear,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Init {
    fn values(&mut self, n: usize) -> Vec<Half> {
        (0..n).map(|_| Half::from_f32(self.normal.sample(&mut self.rng))).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> HalfMatrix {
        HalfMatrix::from_vec(rows, cols, self.values(rows * cols)).expect("sized")
    }

    fn linear(&mut self, inp: usize, out: usize) -> Linear {
        Linear { weight: self.matrix(inp, out), bias: vec![Half::ZERO; out] }
    }

    fn attention(&mut self, d: usize, n_heads: usize) -> AttentionWeights {
        AttentionWeights {
            n_heads,
            norm: LayerNorm::identity(d),
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }

    fn ffn(&mut self, cfg: &ModelConfig, moe: bool) -> FfnWeights {
        let (d, f, e) = (cfg.d_model, cfg.d_ffn, cfg.n_experts);
        if moe {
            let w1 = ExpertWeights::from_vec(e, d, f, self.values(e * d * f)).expect("sized");
            let w2 = ExpertWeights::from_vec(e, f, d, self.values(e * f * d)).expect("sized");
            FfnWeights::Moe(MoeFfn {
                norm: LayerNorm::identity(d),
                gate: self.linear(d, e),
                w1: ExpertLinear::new(ExpertStore::Half(w1), HalfMatrix::zeros(e, f)).expect("sized"),
                w2: ExpertLinear::new(ExpertStore::Half(w2), HalfMatrix::zeros(e, d)).expect("sized"),
            })
        } else {
            FfnWeights::Dense(DenseFfn { norm: LayerNorm::identity(d), w1: self.linear(d, f), w2: self.linear(f, d) })
        }
    }
}

impl Model {
    /// Seeded random model: every matrix drawn from normal(0, 0.02), biases
    /// zero, layer norms identity.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, 0.02).expect("valid") };
        let d = config.d_model;
        let tok_embed = init.matrix(config.vocab_size, d);
        let pos_embed = init.matrix(config.max_positions, d);
        let encoder = (0..config.n_enc_layers)
            .map(|i| EncoderLayer {
                attn: init.attention(d, config.n_heads),
                ffn: init.ffn(&config, config.is_moe_layer(i)),
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|i| DecoderLayer {
                self_attn: init.attention(d, config.n_heads),
                cross_attn: init.attention(d, config.n_heads),
                ffn: init.ffn(&config, config.is_moe_layer(i)),
            })
            .collect();
        let out_proj = init.linear(d, config.vocab_size);
        Ok(Model {
            config,
            tok_embed,
            pos_embed,
            encoder,
            enc_norm: LayerNorm::identity(d),
            decoder,
            dec_norm: LayerNorm::identity(d),
            out_proj,
        })
    }

    /// Sets one output-vocabulary bias, e.g. to make EOS more or less likely.
    pub fn set_output_bias(&mut self, token: u32, value: f32) -> Result<()> {
        let slot = self
            .out_proj
            .bias
            .get_mut(token as usize)
            .ok_or(Error::IndexOutOfRange { index: token as usize, len: self.config.vocab_size })?;
        *slot = Half::from_f32(value);
        Ok(())
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeFfn> {
        self.encoder.iter().map(|l| &l.ffn).chain(self.decoder.iter().map(|l| &l.ffn)).filter_map(|f| match f {
            FfnWeights::Moe(m) => Some(m),
            FfnWeights::Dense(_) => None,
        })
    }

    fn moe_layers_mut(&mut self) -> impl Iterator<Item = &mut MoeFfn> {
        self.encoder.iter_mut().map(|l| &mut l.ffn).chain(self.decoder.iter_mut().map(|l| &mut l.ffn)).filter_map(|f| {
            match f {
                FfnWeights::Moe(m) => Some(m),
                FfnWeights::Dense(_) => None,
            }
        })
    }

    /// Precision of the expert weights (all MoE layers share one).
    pub fn expert_precision(&self) -> Precision {
        self.moe_layers().next().map(|m| m.w1.weights.precision()).unwrap_or(Precision::Fp16)
    }

    /// Copy of the model with every expert matrix quantized. Everything else
    /// (attention, dense FFNs, gates, embeddings, all biases) stays FP16.
    pub fn quantize_experts(&self, bits: Bits) -> Result<Model> {
        let mut out = self.clone();
        for moe in out.moe_layers_mut() {
            for lin in [&mut moe.w1, &mut moe.w2] {
                let ExpertStore::Half(w) = &lin.weights else {
                    return Err(Error::Invalid("expert weights are already quantized".into()));
                };
                lin.weights = ExpertStore::Quant(quantize(w, bits)?);
            }
        }
        Ok(out)
    }

    /// Sum over MoE layers of the stored expert weight matrix bytes
    /// (packed + scales when quantized).
    pub fn expert_payload_bytes(&self) -> usize {
        self.moe_layers()
            .flat_map(|m| [&m.w1, &m.w2])
            .map(|l| {
                let (e, _, _) = l.weights.shape();
                e * l.weights.expert_weight_bytes()
            })
            .sum()
    }

    /// Expert weight element count; times 4 gives the fp32-equivalent size.
    pub fn expert_param_count(&self) -> usize {
        self.moe_layers()
            .flat_map(|m| [&m.w1, &m.w2])
            .map(|l| {
                let (e, m, n) = l.weights.shape();
                e * m * n
            })
            .sum()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_positions {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange { index: t as usize, len: self.config.vocab_size });
        }
        Ok(())
    }

    /// Token plus learned positional embedding.
    pub fn embed(&self, tokens: &[u32], positions: &[usize]) -> HalfMatrix {
        let d = self.config.d_model;
        let mut out = HalfMatrix::zeros(tokens.len(), d);
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let tok = self.tok_embed.row(t as usize);
            let pos = self.pos_embed.row(p);
            for (o, (&a, &b)) in out.row_mut(r).iter_mut().zip(tok.iter().zip(pos)) {
                *o = half_add(a, b);
            }
        }
        out
    }

    /// Encodes every source sentence. All sentences' rows go through each
    /// feed-forward layer as one batch; attention stays within a sentence.
    /// Returns the final-normed memory of each sentence.
    pub fn encode(
        &self,
        src: &[Vec<u32>],
        opts: &GemmOptions,
        traffic: &mut TrafficCounter,
    ) -> Result<Vec<HalfMatrix>> {
        if src.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut bounds = Vec::with_capacity(src.len());
        for s in src {
            if s.is_empty() {
                return Err(Error::Invalid("empty source sentence".into()));
            }
            self.check_tokens(s)?;
            bounds.push(tokens.len()..tokens.len() + s.len());
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let mut x = self.embed(&tokens, &positions);
        let live = vec![false; tokens.len()];
        for layer in &self.encoder {
            let mut next = HalfMatrix::zeros(x.rows(), x.cols());
            for b in &bounds {
                let seg = x.gather_rows(&b.clone().collect::<Vec<_>>());
                let y = attention_forward(&seg, &layer.attn, None, false)?;
                next.as_mut_slice()[b.start * x.cols()..b.end * x.cols()].copy_from_slice(y.as_slice());
            }
            x = layer.ffn.forward(&next, &live, opts, traffic)?;
        }
        let x = layer_norm(&x, &self.enc_norm);
        Ok(bounds.into_iter().map(|b| x.gather_rows(&b.collect::<Vec<_>>())).collect())
    }

    /// Decoder over a whole target prefix at once (causal self-attention,
    /// no cache). Returns f32 logits for every position.
    pub fn decode_full(
        &self,
        memory: &HalfMatrix,
        tgt: &[u32],
        opts: &GemmOptions,
        traffic: &mut TrafficCounter,
    ) -> Result<F32Matrix> {
        self.check_tokens(tgt)?;
        let positions: Vec<usize> = (0..tgt.len()).collect();
        let mut x = self.embed(tgt, &positions);
        let live = vec![false; tgt.len()];
        for layer in &self.decoder {
            x = attention_forward(&x, &layer.self_attn, None, true)?;
            x = attention_forward(&x, &layer.cross_attn, Some(memory), false)?;
            x = layer.ffn.forward(&x, &live, opts, traffic)?;
        }
        let h = layer_norm(&x, &self.dec_norm);
        linear_f32(&h, &self.out_proj.weight, &self.out_proj.bias)
    }

    /// Logits for `BOS + tgt` given `src`, through the uncached path.
    pub fn teacher_forced_logits(&self, src: &[u32], tgt: &[u32], opts: &GemmOptions) -> Result<F32Matrix> {
        let mut traffic = TrafficCounter::default();
        let memory = self.encode(&[src.to_vec()], opts, &mut traffic)?.pop().expect("one sentence");
        let mut input = vec![BOS];
        input.extend_from_slice(tgt);
        self.decode_full(&memory, &input, opts, &mut traffic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ffn: 32,
            n_enc_layers: 3,
            n_dec_layers: 2,
            n_experts: 4,
            n_heads: 2,
            vocab_size: 12,
            moe_every: 2,
            max_positions: 16,
        }
    }

    #[test]
    fn default_config_ratios() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d_ffn, 4 * c.d_model);
        assert_eq!(c.n_dec_layers * 2, c.n_enc_layers);
    }

    #[test]
    fn moe_placement() {
        for every in 1..5 {
            for layers in 1..9 {
                let c = ModelConfig { moe_every: every, n_enc_layers: layers, ..tiny() };
                assert_eq!(c.moe_layers_in(layers), layers.div_ceil(every));
            }
        }
        let m = Model::random(tiny(), 1).unwrap();
        let kinds: Vec<bool> = m.encoder.iter().map(|l| matches!(l.ffn, FfnWeights::Moe(_))).collect();
        assert_eq!(kinds, [true, false, true]);
        assert_eq!(m.moe_layers().count(), 2 + 1);
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { d_ffn: 30, ..tiny() }.validate().is_err());
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { moe_every: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(Model::random(tiny(), 9).unwrap(), Model::random(tiny(), 9).unwrap());
        assert_ne!(Model::random(tiny(), 9).unwrap(), Model::random(tiny(), 10).unwrap());
    }

    #[test]
    fn quantize_only_touches_experts() {
        let m = Model::random(tiny(), 3).unwrap();
        let q = m.quantize_experts(Bits::Int8).unwrap();
        assert_eq!(q.expert_precision(), Precision::Int8);
        assert_eq!(q.tok_embed, m.tok_embed);
        assert_eq!(q.encoder[1], m.encoder[1]);
        assert!(matches!(q.quantize_experts(Bits::Int4), Err(Error::Invalid(_))));
        assert_eq!(q.expert_param_count(), m.expert_param_count());
        assert!(q.expert_payload_bytes() < m.expert_payload_bytes());
    }

    #[test]
    fn encode_rejects_bad_batches() {
        let m = Model::random(tiny(), 3).unwrap();
        let mut t = TrafficCounter::default();
        let o = GemmOptions::default();
        assert!(m.encode(&[], &o, &mut t).is_err());
        assert!(m.encode(&[vec![]], &o, &mut t).is_err());
        assert!(m.encode(&[vec![99]], &o, &mut t).is_err());
        assert_eq!(m.encode(&[vec![3, 4], vec![5]], &o, &mut t).unwrap()[1].rows(), 1);
    }
}
