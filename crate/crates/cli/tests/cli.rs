use std::process::{Command, Output};

use moe_core::checkpoint::Checkpoint;
use moe_core::grouped_gemm::Precision;
use moe_core::model::Model;
use tempfile::TempDir;

fn moebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moebench")).args(args).env_remove("MOE_FAULT_INJECT").output().expect("spawn")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn init(dir: &TempDir, name: &str, extra: &[&str]) -> String {
    let out = path(dir, name);
    let mut args = vec!["init", "--out", &out, "--d-model", "32", "--d-ffn", "64", "--vocab", "40"];
    args.extend_from_slice(extra);
    let o = moebench(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn quantize_reports_sizes_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let fp16 = init(&dir, "m.moec", &["--seed", "3"]);
    let q = path(&dir, "m4.moec");
    let o = moebench(&["quantize", "--in", &fp16, "--out", &q, "--bits", "4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ratio vs fp32"));
    let bytes = std::fs::read(&q).unwrap();
    assert_eq!(&bytes[..4], b"MOEC");
    let loaded = Checkpoint::load(&q).unwrap();
    assert_eq!(loaded.expert_precision(), Precision::Int4);
    assert_eq!(loaded.to_bytes(), bytes);
    let model = Model::from_checkpoint(&loaded).unwrap();
    assert_eq!(model.to_checkpoint().to_bytes(), bytes);

    let again = moebench(&["quantize", "--in", &q, "--out", &path(&dir, "x.moec"), "--bits", "4"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already quantized"));
}

#[test]
fn quantize_errors() {
    let dir = TempDir::new().unwrap();
    let missing = moebench(&["quantize", "--in", &path(&dir, "nope"), "--out", &path(&dir, "o"), "--bits", "8"]);
    assert_eq!(missing.status.code(), Some(2));
    let junk = path(&dir, "junk");
    std::fs::write(&junk, b"NOPE0000").unwrap();
    let bad = moebench(&["quantize", "--in", &junk, "--out", &path(&dir, "o"), "--bits", "8"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("magic"));
    let fp16 = init(&dir, "m.moec", &[]);
    let width = moebench(&["quantize", "--in", &fp16, "--out", &path(&dir, "o"), "--bits", "3"]);
    assert_eq!(width.status.code(), Some(2));

    // d_ffn patched to 60: int4 packing needs multiples of 8.
    let mut bytes = std::fs::read(&fp16).unwrap();
    bytes[12..16].copy_from_slice(&60u32.to_le_bytes());
    let odd = path(&dir, "odd.moec");
    std::fs::write(&odd, bytes).unwrap();
    let o = moebench(&["quantize", "--in", &odd, "--out", &path(&dir, "o"), "--bits", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("multiples of 8"));
}

#[test]
fn verify_exit_codes() {
    let o = moebench(&["verify", "--suite", "routing"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("routing"));
    let faulty = Command::new(env!("CARGO_BIN_EXE_moebench"))
        .args(["verify", "--suite", "dequant"])
        .env("MOE_FAULT_INJECT", "1")
        .output()
        .unwrap();
    assert_eq!(faulty.status.code(), Some(1));
    assert!(stdout(&faulty).contains("FAILED"));
    assert_eq!(moebench(&["verify", "--suite", "nonsense"]).status.code(), Some(2));
}

#[test]
fn bench_is_deterministic_and_threads_do_not_matter() {
    let dir = TempDir::new().unwrap();
    let ck = init(&dir, "m.moec", &["--eos-bias", "0.1"]);
    let run = |threads: &str, out: &str| {
        let o = moebench(&[
            "bench",
            "--config",
            &ck,
            "--batch",
            "2,4",
            "--beam",
            "1,2",
            "--prune",
            "on,off",
            "--sentences",
            "4",
            "--sentence-len",
            "8",
            "--max-len",
            "6",
            "--seed",
            "11",
            "--threads",
            threads,
            "--out",
            out,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("precision"));
        std::fs::read_to_string(out).unwrap()
    };
    let strip = |s: &str| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                for k in ["elapsed_seconds", "tokens_per_second", "latency_ms_per_batch"] {
                    assert!(v[k].as_f64().unwrap() >= 0.0);
                    v[k] = 0.into();
                }
                v
            })
            .collect()
    };
    let a = strip(&run("1", &path(&dir, "a.jsonl")));
    let b = strip(&run("3", &path(&dir, "b.jsonl")));
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    for v in &a {
        assert_eq!(v["input_tokens"], 32);
    }
}

#[test]
fn bench_precision_mismatch() {
    let dir = TempDir::new().unwrap();
    let ck = init(&dir, "m.moec", &[]);
    let o = moebench(&["bench", "--config", &ck, "--precision", "int4", "--sentences", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("int4"));
}

#[test]
fn decode_reads_stdin_and_is_prune_invariant() {
    use std::io::Write;
    let dir = TempDir::new().unwrap();
    let ck = init(&dir, "m.moec", &["--eos-bias", "0.05"]);
    let run = |prune: &str| {
        let mut child = Command::new(env!("CARGO_BIN_EXE_moebench"))
            .args(["decode", "--config", &ck, "--beam", "2", "--prune", prune, "--max-len", "10"])
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(b"4 5 6 7\n9 10\n\n12 13 14\n").unwrap();
        let o = child.wait_with_output().unwrap();
        assert!(o.status.success());
        stdout(&o)
    };
    let on = run("on");
    assert_eq!(on.lines().count(), 3);
    assert_eq!(on, run("off"));
}
