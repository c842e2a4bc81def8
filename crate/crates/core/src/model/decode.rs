//! Beam-search decoding with incremental key/value caching and MoE batch
//! pruning.
//!
//! Decoder rows are laid out `sentence * beam + slot`. Once a sentence is
//! finished its rows keep flowing through attention, but with pruning on
//! they are keyed past every expert group in each MoE layer, so no expert
//! weights are loaded on their behalf.

use crate::error::{Error, Result};
use crate::grouped_gemm::{linear_f32, Activation, GemmOptions, TrafficCounter};
use crate::half_float::Half;
use crate::tensor::{F32Matrix, HalfMatrix};

use super::layers::{attend, heads_for, layer_norm, residual_add, AttentionWeights};
use super::{Model, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    /// Beam width, 1 or 2.
    pub beam: usize,
    pub prune: bool,
    /// Maximum number of generated tokens per sentence.
    pub max_len: usize,
    pub gemm: GemmOptions,
    pub record_trace: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 1, prune: true, max_len: 32, gemm: GemmOptions::default(), record_trace: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the leading BOS.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities.
    pub score: f32,
    pub ended: bool,
}

/// Mutable per-batch decoding state.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub beam: usize,
    pub hyps: Vec<Vec<Hypothesis>>,
    pub finished: Vec<bool>,
    pub finished_at: Vec<Option<usize>>,
    pub step: usize,
}

impl DecodeState {
    fn new(batch: usize, beam: usize) -> Self {
        DecodeState {
            beam,
            hyps: vec![vec![Hypothesis { tokens: Vec::new(), score: 0.0, ended: false }]; batch],
            finished: vec![false; batch],
            finished_at: vec![None; batch],
            step: 0,
        }
    }

    /// Rows belonging to unfinished sentences.
    pub fn active_tokens(&self) -> usize {
        self.finished.iter().filter(|&&f| !f).count() * self.beam
    }

    pub fn all_finished(&self) -> bool {
        self.finished.iter().all(|&f| f)
    }

    fn row_finished(&self) -> Vec<bool> {
        self.finished.iter().flat_map(|&f| std::iter::repeat_n(f, self.beam)).collect()
    }

    fn input_tokens(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.hyps.len() * self.beam);
        for (s, hyps) in self.hyps.iter().enumerate() {
            for slot in 0..self.beam {
                let tok = match hyps.get(slot) {
                    Some(h) if !self.finished[s] && !h.ended => *h.tokens.last().unwrap_or(&BOS),
                    _ => PAD,
                };
                out.push(tok);
            }
        }
        out
    }
}

/// Hypotheses kept for each sentence after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub beams: Vec<Vec<Hypothesis>>,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Best hypothesis per sentence (EOS included when emitted).
    pub sequences: Vec<Vec<u32>>,
    pub scores: Vec<f32>,
    /// Decoder step at which each sentence finished.
    pub finished_at: Vec<usize>,
    pub steps: usize,
    pub encoder_traffic: TrafficCounter,
    pub decoder_traffic: TrafficCounter,
    /// Decoder rows (summed over steps) that were pruned from MoE layers.
    pub pruned_row_steps: usize,
    pub trace: Vec<StepTrace>,
}

impl DecodeOutput {
    pub fn traffic(&self) -> TrafficCounter {
        self.encoder_traffic + self.decoder_traffic
    }
}

struct KvCache {
    keys: Vec<Half>,
    values: Vec<Half>,
}

struct DecoderCache {
    /// `[layer][row]`
    self_kv: Vec<Vec<KvCache>>,
    /// `[layer][sentence]`: cross-attention keys and values of the memory.
    cross_kv: Vec<Vec<(HalfMatrix, HalfMatrix)>>,
}

impl DecoderCache {
    fn reorder(&mut self, sentence: usize, beam: usize, parents: &[usize]) {
        for layer in &mut self.self_kv {
            let moved: Vec<(Vec<Half>, Vec<Half>)> = parents
                .iter()
                .map(|&p| {
                    let c = &layer[sentence * beam + p];
                    (c.keys.clone(), c.values.clone())
                })
                .collect();
            for (slot, (k, v)) in moved.into_iter().enumerate() {
                let c = &mut layer[sentence * beam + slot];
                c.keys = k;
                c.values = v;
            }
        }
    }
}

fn self_attention_step(x: &HalfMatrix, w: &AttentionWeights, caches: &mut [KvCache]) -> Result<HalfMatrix> {
    let d = x.cols();
    let n_heads = heads_for(w, d)?;
    let h = layer_norm(x, &w.norm);
    let q = w.q.forward(&h, Activation::None)?;
    let k = w.k.forward(&h, Activation::None)?;
    let v = w.v.forward(&h, Activation::None)?;
    let mut ctx = HalfMatrix::zeros(x.rows(), d);
    for (r, cache) in caches.iter_mut().enumerate() {
        cache.keys.extend_from_slice(k.row(r));
        cache.values.extend_from_slice(v.row(r));
        ctx.row_mut(r).copy_from_slice(&attend(q.row(r), &cache.keys, &cache.values, n_heads));
    }
    Ok(residual_add(x, &w.o.forward(&ctx, Activation::None)?))
}

fn cross_attention_step(
    x: &HalfMatrix,
    w: &AttentionWeights,
    memory_kv: &[(HalfMatrix, HalfMatrix)],
    row_sentence: &[usize],
) -> Result<HalfMatrix> {
    let d = x.cols();
    let n_heads = heads_for(w, d)?;
    let h = layer_norm(x, &w.norm);
    let q = w.q.forward(&h, Activation::None)?;
    let mut ctx = HalfMatrix::zeros(x.rows(), d);
    for (r, &s) in row_sentence.iter().enumerate() {
        let (k, v) = &memory_kv[s];
        ctx.row_mut(r).copy_from_slice(&attend(q.row(r), k.as_slice(), v.as_slice(), n_heads));
    }
    Ok(residual_add(x, &w.o.forward(&ctx, Activation::None)?))
}

impl Model {
    /// One decoder step for every row. `prune_rows[r]` excludes row `r` from
    /// the MoE layers.
    #[allow(clippy::too_many_arguments)]
    fn decoder_step(
        &self,
        tokens: &[u32],
        position: usize,
        row_sentence: &[usize],
        cache: &mut DecoderCache,
        prune_rows: &[bool],
        opts: &GemmOptions,
        traffic: &mut TrafficCounter,
    ) -> Result<F32Matrix> {
        let positions = vec![position; tokens.len()];
        let mut x = self.embed(tokens, &positions);
        for (l, layer) in self.decoder.iter().enumerate() {
            x = self_attention_step(&x, &layer.self_attn, &mut cache.self_kv[l])?;
            x = cross_attention_step(&x, &layer.cross_attn, &cache.cross_kv[l], row_sentence)?;
            x = layer.ffn.forward(&x, prune_rows, opts, traffic)?;
        }
        let h = layer_norm(&x, &self.dec_norm);
        linear_f32(&h, &self.out_proj.weight, &self.out_proj.bias)
    }
}

/// Log-softmax of one logit row, in f32.
pub(crate) fn log_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Picks the next beam for one sentence. Candidates are every extension of
/// each live hypothesis plus every ended hypothesis carried unchanged;
/// the top `beam` by score survive (ties: earlier hypothesis, then lower
/// token id). Returns the new hypotheses and each one's parent slot.
pub(crate) fn select_beam(hyps: &[Hypothesis], logprobs: &[Vec<f32>], beam: usize) -> (Vec<Hypothesis>, Vec<usize>) {
    struct Cand {
        score: f32,
        parent: usize,
        token: Option<u32>,
    }
    let mut cands = Vec::new();
    for (i, h) in hyps.iter().enumerate() {
        if h.ended {
            cands.push(Cand { score: h.score, parent: i, token: None });
        } else {
            for (t, &lp) in logprobs[i].iter().enumerate() {
                cands.push(Cand { score: h.score + lp, parent: i, token: Some(t as u32) });
            }
        }
    }
    // Stable: equal scores keep enumeration order.
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands
        .into_iter()
        .take(beam)
        .map(|c| {
            let parent = &hyps[c.parent];
            let hyp = match c.token {
                None => parent.clone(),
                Some(t) => {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(t);
                    Hypothesis { tokens, score: c.score, ended: t == EOS }
                }
            };
            (hyp, c.parent)
        })
        .unzip()
}

/// Translates a batch of source sentences.
///
/// The encoder runs once; the decoder then steps until every sentence is
/// finished, i.e. its best hypothesis has emitted EOS or it has generated
/// `max_len` tokens. Scores are summed token log-probabilities with no
/// length penalty. Pruning changes which rows the MoE layers compute, never
/// the returned sequences.
pub fn beam_search_decode(model: &Model, src: &[Vec<u32>], opts: &DecodeOptions) -> Result<DecodeOutput> {
    if src.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if !(1..=2).contains(&opts.beam) {
        return Err(Error::Invalid(format!("beam width {} not supported (1 or 2)", opts.beam)));
    }
    if opts.max_len == 0 || opts.max_len > model.config.max_positions {
        return Err(Error::Invalid(format!("max_len {} must be in 1..={}", opts.max_len, model.config.max_positions)));
    }
    let batch = src.len();
    let beam = opts.beam;
    let mut encoder_traffic = TrafficCounter::default();
    let memory = model.encode(src, &opts.gemm, &mut encoder_traffic)?;

    let mut cache = DecoderCache {
        self_kv: model
            .decoder
            .iter()
            .map(|_| (0..batch * beam).map(|_| KvCache { keys: Vec::new(), values: Vec::new() }).collect())
            .collect(),
        cross_kv: model
            .decoder
            .iter()
            .map(|layer| {
                memory
                    .iter()
                    .map(|m| {
                        let k = layer.cross_attn.k.forward(m, Activation::None)?;
                        let v = layer.cross_attn.v.forward(m, Activation::None)?;
                        Ok((k, v))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let row_sentence: Vec<usize> = (0..batch * beam).map(|r| r / beam).collect();

    let mut state = DecodeState::new(batch, beam);
    let mut decoder_traffic = TrafficCounter::default();
    let mut pruned_row_steps = 0;
    let mut trace = Vec::new();

    while !state.all_finished() {
        let tokens = state.input_tokens();
        let prune_rows = if opts.prune { state.row_finished() } else { vec![false; batch * beam] };
        pruned_row_steps += prune_rows.iter().filter(|&&p| p).count();
        let logits = model.decoder_step(
            &tokens,
            state.step,
            &row_sentence,
            &mut cache,
            &prune_rows,
            &opts.gemm,
            &mut decoder_traffic,
        )?;

        for s in 0..batch {
            if state.finished[s] {
                continue;
            }
            let logprobs: Vec<Vec<f32>> =
                (0..state.hyps[s].len()).map(|slot| log_softmax(logits.row(s * beam + slot))).collect();
            let (next, parents) = select_beam(&state.hyps[s], &logprobs, beam);
            cache.reorder(s, beam, &parents);
            state.hyps[s] = next;
            if state.hyps[s][0].ended || state.step + 1 >= opts.max_len {
                state.finished[s] = true;
                state.finished_at[s] = Some(state.step);
            }
        }
        if opts.record_trace {
            trace.push(StepTrace { step: state.step, beams: state.hyps.clone() });
        }
        state.step += 1;
    }

    Ok(DecodeOutput {
        sequences: state.hyps.iter().map(|h| h[0].tokens.clone()).collect(),
        scores: state.hyps.iter().map(|h| h[0].score).collect(),
        finished_at: state.finished_at.iter().map(|f| f.expect("all finished")).collect(),
        steps: state.step,
        encoder_traffic,
        decoder_traffic,
        pruned_row_steps,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(tokens: &[u32], score: f32, ended: bool) -> Hypothesis {
        Hypothesis { tokens: tokens.to_vec(), score, ended }
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, 0.5]);
        let total: f32 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!((lp[1] - (0.628_53f32).ln()).abs() < 1e-5);
    }

    #[test]
    fn selection_keeps_ended_hypotheses() {
        let hyps = [hyp(&[5], -0.1, true), hyp(&[6], -0.2, false)];
        let lps = vec![vec![], vec![-3.0, -0.05, -1.0]];
        let (next, parents) = select_beam(&hyps, &lps, 2);
        assert_eq!(next[0], hyp(&[5], -0.1, true));
        assert_eq!(next[1].tokens, [6, 1]);
        assert_eq!(parents, [0, 1]);
    }

    #[test]
    fn selection_ties_prefer_earlier() {
        let hyps = [hyp(&[], 0.0, false)];
        let lps = vec![vec![-1.0, -1.0, -2.0]];
        let (next, _) = select_beam(&hyps, &lps, 2);
        assert_eq!(next[0].tokens, [0]);
        assert_eq!(next[1].tokens, [1]);
        let (next, _) = select_beam(&hyps, &[vec![-1.0, -0.5, -1.0]], 1);
        assert_eq!(next[0].tokens, [1]);
    }

    #[test]
    fn eos_marks_ended() {
        let hyps = [hyp(&[], 0.0, false)];
        let mut lp = vec![-9.0; 4];
        lp[EOS as usize] = -0.01;
        let (next, _) = select_beam(&hyps, &[lp], 1);
        assert!(next[0].ended);
    }

    #[test]
    fn active_token_count() {
        let mut s = DecodeState::new(3, 2);
        assert_eq!(s.active_tokens(), 6);
        s.finished[1] = true;
        assert_eq!(s.active_tokens(), 4);
        assert_eq!(s.row_finished(), [false, false, true, true, false, false]);
        assert_eq!(s.input_tokens(), [BOS, PAD, PAD, PAD, BOS, PAD]);
    }
}
