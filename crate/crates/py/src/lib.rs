use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use moe_core::dequant::{dequantize_fast, dequantize_naive, i2f_magic_u4, i2f_magic_u8};
use moe_core::grouped_gemm::Precision;
use moe_core::half_float::{self, Half};
use moe_core::model::{beam_search_decode, DecodeOptions, ModelConfig};
use moe_core::quantizer::{self, Bits, QuantizedExpertWeights};
use moe_core::router::{build_routing_plan, gate_top1, GateDecision};
use moe_core::tensor::{ExpertWeights, F32Matrix};
use moe_core::verify::{run_suite, Suite, VerifyConfig};

fn to_py(e: moe_core::Error) -> PyErr {
    match e {
        moe_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn floats(h: &[Half]) -> Vec<f32> {
    h.iter().map(|v| v.to_f32()).collect()
}

/// Round an f32 to the nearest FP16 and return its bit pattern.
#[pyfunction]
fn half_from_f32(x: f32) -> u16 {
    Half::from_f32(x).to_bits()
}

#[pyfunction]
fn half_to_f32(bits: u16) -> f32 {
    Half::from_bits(bits).to_f32()
}

#[pyfunction]
fn compose_magic(y: u16) -> PyResult<u16> {
    if y >= 1024 {
        return Err(PyValueError::new_err("y must be below 1024"));
    }
    Ok(half_float::compose_magic(y).to_bits())
}

/// Four offset-int8 bytes to signed floats via the magic-number path.
#[pyfunction]
fn i2f_u8(bytes: [u8; 4]) -> Vec<f32> {
    floats(&i2f_magic_u8(bytes))
}

/// One word of eight interleaved offset-int4 nibbles to signed floats.
#[pyfunction]
fn i2f_u4(word: u32) -> Vec<f32> {
    floats(&i2f_magic_u4(word))
}

#[pyclass(module = "moe_engine", frozen)]
struct QuantizedWeights {
    inner: QuantizedExpertWeights,
}

#[pymethods]
impl QuantizedWeights {
    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits().width()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    #[getter]
    fn packed<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.packed())
    }

    #[getter]
    fn scales(&self) -> Vec<f32> {
        floats(self.inner.scales())
    }

    fn payload_bytes(&self) -> usize {
        self.inner.payload_bytes()
    }

    /// Flat `(E, M, N)` FP16 values as floats.
    #[pyo3(signature = (fast = true))]
    fn dequantize(&self, fast: bool) -> Vec<f32> {
        let w = if fast { dequantize_fast(&self.inner) } else { dequantize_naive(&self.inner) };
        floats(w.as_slice())
    }

    fn __repr__(&self) -> String {
        format!("QuantizedWeights(bits={}, shape={:?})", self.bits(), self.shape())
    }
}

/// Quantize flat row-major `(E, M, N)` weights per output channel.
#[pyfunction]
fn quantize(weights: Vec<f32>, shape: (usize, usize, usize), bits: u32) -> PyResult<QuantizedWeights> {
    let (e, m, n) = shape;
    let w = ExpertWeights::from_f32(e, m, n, &weights).map_err(to_py)?;
    let inner = quantizer::quantize(&w, Bits::from_width(bits).map_err(to_py)?).map_err(to_py)?;
    Ok(QuantizedWeights { inner })
}

/// Top-1 softmax gating: `(expert, scale)` per row.
#[pyfunction]
fn gate(logits: Vec<Vec<f32>>) -> PyResult<Vec<(u32, f32)>> {
    let experts = logits.first().map_or(0, Vec::len);
    if logits.iter().any(|r| r.len() != experts) {
        return Err(PyValueError::new_err("ragged logits"));
    }
    let m = F32Matrix::from_vec(logits.len(), experts, logits.concat()).map_err(to_py)?;
    Ok(gate_top1(&m).map_err(to_py)?.into_iter().map(|d| (d.expert_idx, d.expert_scale.to_f32())).collect())
}

/// Routing plan for per-row expert choices; finished rows are pruned.
#[pyfunction]
#[pyo3(signature = (experts, num_experts, finished = None))]
fn routing_plan(
    experts: Vec<u32>,
    num_experts: usize,
    finished: Option<Vec<bool>>,
) -> PyResult<HashMap<String, Vec<usize>>> {
    let finished = finished.unwrap_or_else(|| vec![false; experts.len()]);
    let decisions: Vec<GateDecision> = experts
        .iter()
        .enumerate()
        .map(|(r, &e)| GateDecision { expert_scale: Half::ONE, expert_idx: e, row_idx: r as u32 })
        .collect();
    let plan = build_routing_plan(&decisions, &finished, num_experts).map_err(to_py)?;
    Ok(HashMap::from([
        ("permutation".to_string(), plan.permutation().to_vec()),
        ("inverse".to_string(), plan.inverse_permutation().to_vec()),
        ("offsets".to_string(), plan.expert_offsets().to_vec()),
        ("active_rows".to_string(), vec![plan.active_rows()]),
    ]))
}

#[pyclass(module = "moe_engine", frozen)]
struct Model {
    inner: moe_core::model::Model,
}

#[pymethods]
impl Model {
    /// Seeded random model; keyword arguments override the default config.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, d_model = None, d_ffn = None, n_experts = None, vocab_size = None, eos_bias = None))]
    fn random(
        seed: u64,
        d_model: Option<usize>,
        d_ffn: Option<usize>,
        n_experts: Option<usize>,
        vocab_size: Option<usize>,
        eos_bias: Option<f32>,
    ) -> PyResult<Model> {
        let base = ModelConfig::default();
        let cfg = ModelConfig {
            d_model: d_model.unwrap_or(base.d_model),
            d_ffn: d_ffn.unwrap_or(base.d_ffn),
            n_experts: n_experts.unwrap_or(base.n_experts),
            vocab_size: vocab_size.unwrap_or(base.vocab_size),
            ..base
        };
        let mut inner = moe_core::model::Model::random(cfg, seed).map_err(to_py)?;
        if let Some(b) = eos_bias {
            inner.set_output_bias(moe_core::model::EOS, b).map_err(to_py)?;
        }
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model { inner: moe_core::model::Model::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn precision(&self) -> String {
        self.inner.expert_precision().to_string()
    }

    #[getter]
    fn config(&self) -> HashMap<&'static str, usize> {
        let c = self.inner.config;
        HashMap::from([
            ("d_model", c.d_model),
            ("d_ffn", c.d_ffn),
            ("n_enc_layers", c.n_enc_layers),
            ("n_dec_layers", c.n_dec_layers),
            ("n_experts", c.n_experts),
            ("n_heads", c.n_heads),
            ("vocab_size", c.vocab_size),
            ("moe_every", c.moe_every),
            ("max_positions", c.max_positions),
        ])
    }

    fn expert_payload_bytes(&self) -> usize {
        self.inner.expert_payload_bytes()
    }

    fn quantize(&self, bits: u32) -> PyResult<Model> {
        let bits = Bits::from_width(bits).map_err(to_py)?;
        Ok(Model { inner: self.inner.quantize_experts(bits).map_err(to_py)? })
    }

    /// Beam-search decode. Returns sequences, scores and traffic counters.
    #[pyo3(signature = (src, beam = 1, prune = true, max_len = 32))]
    fn decode(
        &self,
        py: Python<'_>,
        src: Vec<Vec<u32>>,
        beam: usize,
        prune: bool,
        max_len: usize,
    ) -> PyResult<Py<PyAny>> {
        let opts = DecodeOptions { beam, prune, max_len, ..Default::default() };
        let out = py.detach(|| beam_search_decode(&self.inner, &src, &opts)).map_err(to_py)?;
        let t = out.traffic();
        let d = pyo3::types::PyDict::new(py);
        d.set_item("sequences", out.sequences)?;
        d.set_item("scores", out.scores)?;
        d.set_item("finished_at", out.finished_at)?;
        d.set_item("weight_bytes_read", t.weight_bytes_read)?;
        d.set_item("activation_bytes_read", t.activation_bytes_read)?;
        d.set_item("bytes_written", t.bytes_written)?;
        Ok(d.into_any().unbind())
    }

    fn __repr__(&self) -> String {
        format!("Model(precision={}, experts={})", self.precision(), self.inner.config.n_experts)
    }
}

/// Run a verify suite; returns `(name, passed, total)` per suite.
#[pyfunction]
#[pyo3(signature = (suite = "all"))]
fn verify(py: Python<'_>, suite: &str) -> PyResult<Vec<(String, usize, usize)>> {
    let suite: Suite = suite.parse().map_err(to_py)?;
    let cfg = VerifyConfig::from_env();
    let reports = py.detach(|| run_suite(suite, &cfg));
    Ok(reports.into_iter().map(|r| (r.name, r.passed, r.total)).collect())
}

#[pyfunction]
fn precisions() -> Vec<String> {
    [Precision::Fp16, Precision::Int8, Precision::Int4].iter().map(|p| p.to_string()).collect()
}

#[pymodule]
fn moe_engine(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(half_from_f32, m)?)?;
    m.add_function(wrap_pyfunction!(half_to_f32, m)?)?;
    m.add_function(wrap_pyfunction!(compose_magic, m)?)?;
    m.add_function(wrap_pyfunction!(i2f_u8, m)?)?;
    m.add_function(wrap_pyfunction!(i2f_u4, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(routing_plan, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(precisions, m)?)?;
    m.add_class::<QuantizedWeights>()?;
    m.add_class::<Model>()?;
    Ok(())
}
