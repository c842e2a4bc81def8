//! Throughput benchmark over synthetic batches with traffic accounting.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grouped_gemm::{GemmOptions, Precision, TrafficCounter};
use crate::model::{beam_search_decode, DecodeOptions, Model, ModelConfig, FIRST_WORD};

pub const DEFAULT_SENTENCE_LEN: usize = 40;

#[derive(Clone, Copy, Debug)]
pub struct BenchSettings {
    pub precision: Precision,
    pub batch: usize,
    pub beam: usize,
    pub prune: bool,
    pub seed: u64,
    /// Total sentences, split into batches of `batch`.
    pub sentences: usize,
    pub sentence_len: usize,
    pub max_len: usize,
    pub gemm: GemmOptions,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            precision: Precision::Fp16,
            batch: 8,
            beam: 1,
            prune: true,
            seed: 0,
            sentences: 32,
            sentence_len: DEFAULT_SENTENCE_LEN,
            max_len: 32,
            gemm: GemmOptions::default(),
        }
    }
}

/// One benchmark run. Token counts follow the input-token convention:
/// throughput is source tokens translated per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub precision: Precision,
    pub batch: usize,
    pub beam: usize,
    pub prune: bool,
    pub seed: u64,
    pub sentences: usize,
    pub sentence_len: usize,
    pub max_len: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub decoder_steps: u64,
    pub pruned_row_steps: u64,
    pub elapsed_seconds: f64,
    pub tokens_per_second: f64,
    pub latency_ms_per_batch: f64,
    pub traffic: TrafficCounter,
    pub config: ModelConfig,
    /// SHA-256 over every output sequence (u32 length then u32 tokens, LE).
    pub output_digest: String,
}

impl BenchReport {
    /// Every top-level key of a serialized report, in order.
    pub const FIELDS: [&'static str; 18] = [
        "precision",
        "batch",
        "beam",
        "prune",
        "seed",
        "sentences",
        "sentence_len",
        "max_len",
        "input_tokens",
        "output_tokens",
        "decoder_steps",
        "pruned_row_steps",
        "elapsed_seconds",
        "tokens_per_second",
        "latency_ms_per_batch",
        "traffic",
        "config",
        "output_digest",
    ];

    pub const TRAFFIC_FIELDS: [&'static str; 3] = ["weight_bytes_read", "activation_bytes_read", "bytes_written"];

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }

    /// Parses one JSON line, requiring exactly the documented fields.
    pub fn from_json_line(line: &str) -> Result<BenchReport> {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| Error::Format("report is not a JSON object".into()))?;
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        let mut want = Self::FIELDS.to_vec();
        keys.sort_unstable();
        want.sort_unstable();
        if keys != want {
            return Err(Error::Format(format!("report fields {keys:?} do not match {want:?}")));
        }
        let report: BenchReport = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("elapsed_seconds", self.elapsed_seconds),
            ("tokens_per_second", self.tokens_per_second),
            ("latency_ms_per_batch", self.latency_ms_per_batch),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Format(format!("{name} = {v} is not a non-negative number")));
            }
        }
        if self.input_tokens != (self.sentences * self.sentence_len) as u64 {
            return Err(Error::Format("input_tokens does not match sentences x sentence_len".into()));
        }
        Ok(())
    }

    /// The report with wall-clock fields zeroed, for determinism checks.
    pub fn without_timing(&self) -> BenchReport {
        BenchReport { elapsed_seconds: 0.0, tokens_per_second: 0.0, latency_ms_per_batch: 0.0, ..self.clone() }
    }
}

/// Seeded random source sentences of ordinary (non-special) tokens.
pub fn synthetic_sentences(config: &ModelConfig, seed: u64, count: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..len).map(|_| rng.random_range(FIRST_WORD..config.vocab_size as u32)).collect()).collect()
}

pub fn output_digest(sequences: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for s in sequences {
        h.update((s.len() as u32).to_le_bytes());
        for t in s {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes `settings.sentences` synthetic sentences in batches and reports
/// throughput and traffic. Returns the report and every output sequence.
pub fn run_bench(model: &Model, settings: &BenchSettings) -> Result<(BenchReport, Vec<Vec<u32>>)> {
    let have = model.expert_precision();
    if have != settings.precision {
        return Err(Error::Invalid(format!(
            "requested {} but the checkpoint's experts are {have}",
            settings.precision
        )));
    }
    if settings.batch == 0 || settings.sentences == 0 || settings.sentence_len == 0 {
        return Err(Error::Invalid("batch, sentences and sentence_len must be positive".into()));
    }
    let src = synthetic_sentences(&model.config, settings.seed, settings.sentences, settings.sentence_len);
    let opts = DecodeOptions {
        beam: settings.beam,
        prune: settings.prune,
        max_len: settings.max_len,
        gemm: settings.gemm,
        record_trace: false,
    };
    let mut traffic = TrafficCounter::default();
    let mut outputs = Vec::with_capacity(src.len());
    let mut steps = 0u64;
    let mut pruned = 0u64;
    let mut batches = 0usize;
    let start = Instant::now();
    for chunk in src.chunks(settings.batch) {
        let out = beam_search_decode(model, chunk, &opts)?;
        traffic += out.traffic();
        steps += out.steps as u64;
        pruned += out.pruned_row_steps as u64;
        outputs.extend(out.sequences);
        batches += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let input_tokens = (settings.sentences * settings.sentence_len) as u64;
    let report = BenchReport {
        precision: settings.precision,
        batch: settings.batch,
        beam: settings.beam,
        prune: settings.prune,
        seed: settings.seed,
        sentences: settings.sentences,
        sentence_len: settings.sentence_len,
        max_len: settings.max_len,
        input_tokens,
        output_tokens: outputs.iter().map(|s| s.len() as u64).sum(),
        decoder_steps: steps,
        pruned_row_steps: pruned,
        elapsed_seconds: elapsed,
        tokens_per_second: if elapsed > 0.0 { input_tokens as f64 / elapsed } else { 0.0 },
        latency_ms_per_batch: 1e3 * elapsed / batches as f64,
        traffic,
        config: model.config,
        output_digest: output_digest(&outputs),
    };
    Ok((report, outputs))
}

/// Aligned plain-text table, one row per report.
pub fn format_table(reports: &[BenchReport]) -> String {
    let header = [
        "precision",
        "batch",
        "beam",
        "prune",
        "tok/s",
        "ms/batch",
        "weight MB",
        "act MB",
        "written MB",
        "pruned",
        "digest",
    ];
    let mb = |b: u64| format!("{:.3}", b as f64 / 1e6);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.precision.to_string(),
                r.batch.to_string(),
                r.beam.to_string(),
                if r.prune { "on" } else { "off" }.to_string(),
                format!("{:.1}", r.tokens_per_second),
                format!("{:.2}", r.latency_ms_per_batch),
                mb(r.traffic.weight_bytes_read),
                mb(r.traffic.activation_bytes_read),
                mb(r.traffic.bytes_written),
                r.pruned_row_steps.to_string(),
                r.output_digest.chars().take(12).collect(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 || i + 1 == cells.len() { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EOS;
    use crate::quantizer::Bits;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ffn: 32,
            n_enc_layers: 2,
            n_dec_layers: 1,
            n_experts: 4,
            n_heads: 2,
            vocab_size: 20,
            moe_every: 2,
            max_positions: 16,
        }
    }

    fn settings() -> BenchSettings {
        BenchSettings { batch: 3, sentences: 5, sentence_len: 6, max_len: 8, ..Default::default() }
    }

    #[test]
    fn report_schema_round_trip() {
        let m = Model::random(small(), 1).unwrap();
        let (r, _) = run_bench(&m, &settings()).unwrap();
        assert_eq!(r.input_tokens, 30);
        let line = r.to_json_line();
        assert_eq!(BenchReport::from_json_line(&line).unwrap(), r);
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v["extra"] = 1.into();
        assert!(BenchReport::from_json_line(&v.to_string()).is_err());
        v.as_object_mut().unwrap().remove("extra");
        v.as_object_mut().unwrap().remove("seed");
        assert!(BenchReport::from_json_line(&v.to_string()).is_err());
        let obj = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = obj.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), BenchReport::FIELDS.len());
        let t = obj["traffic"].as_object().unwrap();
        assert!(BenchReport::TRAFFIC_FIELDS.iter().all(|f| t.contains_key(*f)));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let m = Model::random(small(), 2).unwrap();
        let (a, oa) = run_bench(&m, &settings()).unwrap();
        let (b, ob) = run_bench(&m, &settings()).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.without_timing(), b.without_timing());
        let (c, _) = run_bench(&m, &BenchSettings { seed: 1, ..settings() }).unwrap();
        assert_ne!(a.output_digest, c.output_digest);
    }

    #[test]
    fn precision_mismatch_is_an_error() {
        let m = Model::random(small(), 2).unwrap().quantize_experts(Bits::Int8).unwrap();
        assert!(run_bench(&m, &settings()).is_err());
        assert!(run_bench(&m, &BenchSettings { precision: Precision::Int8, ..settings() }).is_ok());
    }

    #[test]
    fn pruning_reduces_weight_traffic_on_early_finishing_batch() {
        // With this seed and bias four of the five sentences end by step 3
        // while the fifth runs to max_len.
        let mut m = Model::random(small(), 2).unwrap();
        m.set_output_bias(EOS, 0.02).unwrap();
        let s = BenchSettings { batch: 5, sentences: 5, max_len: 12, ..settings() };
        let (on, o1) = run_bench(&m, &s).unwrap();
        let (off, o2) = run_bench(&m, &BenchSettings { prune: false, ..s }).unwrap();
        assert_eq!(o1, o2);
        assert!(on.pruned_row_steps > 0, "fixture must finish some sentences early");
        assert!(on.traffic.weight_bytes_read < off.traffic.weight_bytes_read);
    }

    #[test]
    fn table_is_aligned() {
        let m = Model::random(small(), 1).unwrap();
        let (r, _) = run_bench(&m, &settings()).unwrap();
        let t = format_table(&[r.clone(), BenchReport { batch: 128, ..r }]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("precision"));
        assert_eq!(lines[2].len(), lines[3].len());
    }
}
