use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use moe_core::bench::{format_table, run_bench, BenchSettings, DEFAULT_SENTENCE_LEN};
use moe_core::checkpoint::{quantize_checkpoint, Checkpoint};
use moe_core::grouped_gemm::Precision;
use moe_core::model::{beam_search_decode, DecodeOptions, Model, ModelConfig, EOS};
use moe_core::quantizer::Bits;
use moe_core::verify::{run_suite, Suite, VerifyConfig};

#[derive(Parser)]
#[command(name = "moebench", version, about = "Mixture-of-experts inference toolkit")]
struct Cli {
    /// Worker threads for the compute kernels (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random FP16 checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output bias on EOS; raises the chance that sentences end early.
        #[arg(long, default_value_t = 0.0)]
        eos_bias: f32,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        d_ffn: Option<usize>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
    },
    /// Quantize the expert matrices of an FP16 checkpoint.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["4", "8"])]
        bits: String,
    },
    /// Run oracle suites.
    Verify {
        #[arg(long, default_value = "all", value_parser = Suite::NAMES)]
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate token sequences, one whitespace-separated sentence per line.
    Decode {
        #[arg(long)]
        config: PathBuf,
        /// Input file; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, value_enum, default_value = "on")]
        prune: Switch,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
    /// Benchmark decoding over a grid of batch x beam x precision x prune.
    Bench {
        /// Checkpoint(s); each requested precision must match one. Without
        /// it, a random default model built from --seed is quantized as
        /// needed.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "fp16")]
        precision: Vec<Precision>,
        #[arg(long, value_delimiter = ',', default_value = "8")]
        batch: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        beam: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "on")]
        prune: Vec<Switch>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        sentences: usize,
        #[arg(long, default_value_t = DEFAULT_SENTENCE_LEN)]
        sentence_len: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        /// JSON-lines report file; reports go to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A run that completed but found failures (exit status 1).
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().context("starting thread pool")?;
    match cli.command {
        Command::Init { out, seed, eos_bias, d_model, d_ffn, experts, vocab } => {
            let base = ModelConfig::default();
            let config = ModelConfig {
                d_model: d_model.unwrap_or(base.d_model),
                d_ffn: d_ffn.unwrap_or(base.d_ffn),
                n_experts: experts.unwrap_or(base.n_experts),
                vocab_size: vocab.unwrap_or(base.vocab_size),
                ..base
            };
            let mut model = Model::random(config, seed)?;
            model.set_output_bias(EOS, eos_bias)?;
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} ({} expert parameters)", out.display(), model.expert_param_count());
        }
        Command::Quantize { input, out, bits } => {
            let bits = Bits::from_width(bits.parse()?)?;
            let ckpt = Checkpoint::load(&input).with_context(|| format!("reading {}", input.display()))?;
            let (q, s) = quantize_checkpoint(&ckpt, bits)?;
            q.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("expert parameters     {}", s.expert_params);
            println!("fp32-equivalent bytes {}", s.fp32_expert_bytes);
            println!("fp16 expert bytes     {}", s.fp16_expert_bytes);
            println!("int{} expert bytes     {} (packed + scales)", bits.width(), s.quantized_expert_bytes);
            println!("ratio vs fp32         {:.4}", s.ratio_vs_fp32());
            println!("file bytes            {} -> {}", s.file_bytes_before, s.file_bytes_after);
        }
        Command::Verify { suite, seed } => {
            let suite: Suite = suite.parse()?;
            let mut cfg = VerifyConfig::from_env();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if !cfg.constants.is_exact() {
                println!("fault injection active: dequant constants perturbed");
            }
            let mut ok = true;
            for report in run_suite(suite, &cfg) {
                println!("{report}");
                ok &= report.ok();
            }
            if !ok {
                return Err(VerificationFailed.into());
            }
        }
        Command::Decode { config, input, beam, prune, max_len } => {
            let model = Model::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let lines: Vec<String> = match input {
                Some(p) => io::BufReader::new(File::open(&p).with_context(|| format!("reading {}", p.display()))?)
                    .lines()
                    .collect::<io::Result<_>>()?,
                None => io::stdin().lock().lines().collect::<io::Result<_>>()?,
            };
            let src = lines
                .iter()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split_whitespace().map(|t| t.parse::<u32>().with_context(|| format!("bad token {t:?}"))).collect()
                })
                .collect::<Result<Vec<Vec<u32>>>>()?;
            if src.is_empty() {
                bail!("no input sentences");
            }
            let opts = DecodeOptions { beam, prune: prune == Switch::On, max_len, ..Default::default() };
            let out = beam_search_decode(&model, &src, &opts)?;
            let mut stdout = io::stdout().lock();
            for s in &out.sequences {
                let words: Vec<String> = s.iter().map(|t| t.to_string()).collect();
                writeln!(stdout, "{}", words.join(" "))?;
            }
        }
        Command::Bench { config, precision, batch, beam, prune, seed, sentences, sentence_len, max_len, out } => {
            let models = bench_models(&config, &precision, seed)?;
            let mut reports = Vec::new();
            for (p, model) in precision.iter().zip(&models) {
                for &b in &batch {
                    for &k in &beam {
                        for &pr in &prune {
                            let settings = BenchSettings {
                                precision: *p,
                                batch: b,
                                beam: k,
                                prune: pr == Switch::On,
                                seed,
                                sentences,
                                sentence_len,
                                max_len,
                                ..Default::default()
                            };
                            let (report, _) = run_bench(model, &settings)?;
                            reports.push(report);
                        }
                    }
                }
            }
            let lines: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
            match out {
                Some(path) => {
                    let mut f =
                        BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?);
                    f.write_all(lines.as_bytes())?;
                    f.flush()?;
                }
                None => print!("{lines}"),
            }
            print!("{}", format_table(&reports));
        }
    }
    Ok(())
}

/// One model per requested precision, from checkpoints or a seeded random
/// model.
fn bench_models(paths: &[PathBuf], precisions: &[Precision], seed: u64) -> Result<Vec<Model>> {
    if paths.is_empty() {
        let base = Model::random(ModelConfig::default(), seed)?;
        return precisions
            .iter()
            .map(|p| {
                Ok(match p.bits() {
                    None => base.clone(),
                    Some(b) => base.quantize_experts(b)?,
                })
            })
            .collect();
    }
    let loaded = paths
        .iter()
        .map(|p| Model::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    precisions
        .iter()
        .map(|p| {
            loaded.iter().find(|m| m.expert_precision() == *p).cloned().with_context(|| {
                let have: Vec<String> = loaded.iter().map(|m| m.expert_precision().to_string()).collect();
                format!("precision {p} requested but checkpoint experts are {}", have.join(", "))
            })
        })
        .collect()
}
