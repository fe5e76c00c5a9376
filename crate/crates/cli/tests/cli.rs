use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bessbid"))
}

fn write_config(dir: &Path, use_attention: bool) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
        "market": {{"episode_len": 96}},
        "synth": {{"seed": 7, "period": 96, "p_raise": 0.05, "p_lower": 0.05}},
        "sac": {{"hidden_dim": 16, "batch_size": 8, "warmup_transitions": 32,
                 "buffer_capacity": 2048, "use_attention": {use_attention}}},
        "extractor": {{"seg_len": 4, "model_dim": 8, "heads": 2, "n_blocks": 1, "ffn_dim": 16}},
        "train": {{"episodes": 2, "train_fraction": 0.75}},
        "dmpc": {{"lookahead": 6, "grid": {{"soc_step": 0.5, "power_levels": 2}}}},
        "pio": {{"grid": {{"soc_step": 0.25, "power_levels": 3}}, "refine_max_halvings": 1}}
    }}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bessbid_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tmp_dir("pipeline");
    let cfg = write_config(&dir, true);
    let data_dir = dir.join("data");
    let run_dir = dir.join("run");

    // gen-data
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()])
        .args(["gen-data", "--n-intervals", "768"])
        .status()
        .unwrap();
    assert!(st.success());
    let data = data_dir.join("prices.csv");
    let first_data_row = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .to_string();
    assert!(first_data_row.starts_with("0,20"), "{first_data_row}"); // square wave low phase

    // train
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--seed", "3", "--out", run_dir.to_str().unwrap()])
        .args(["train", "--data", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let ckpt = run_dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(run_dir.join("training_log.csv").exists());
    assert!(run_dir.join("manifest.json").exists());

    // identical rerun reproduces the checkpoint bytes
    let run2 = dir.join("run2");
    bin()
        .args(["--config", cfg.to_str().unwrap(), "--seed", "3", "--out", run2.to_str().unwrap()])
        .args(["train", "--data", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(run2.join("checkpoint.bin")).unwrap()
    );

    // eval in every mode
    let eval_dir = dir.join("eval");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()])
        .args([
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--mode",
            "all",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let revenue = std::fs::read_to_string(eval_dir.join("revenue.csv")).unwrap();
    assert!(revenue.contains("spot"));
    assert!(revenue.contains("joint"));
    // spot_only mode earns exactly zero reserve revenue
    for line in revenue.lines().filter(|l| l.contains("attn-drl,spot")) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[3], "0");
    }
    assert!(eval_dir.join("summary.json").exists());

    // benchmark with the oracle
    let bench_dir = dir.join("bench");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", bench_dir.to_str().unwrap()])
        .args([
            "benchmark",
            "--data",
            data.to_str().unwrap(),
            "--strategies",
            "attn-drl,dmpc-persistence,pio",
            "--attn-checkpoint",
            ckpt.to_str().unwrap(),
            "--mode",
            "joint",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let table = std::fs::read_to_string(bench_dir.join("benchmark.csv")).unwrap();
    assert_eq!(table.lines().count(), 2 + 3); // comment + header + 3 rows
    assert!(bench_dir.join("cumulative.csv").exists());

    // interpret: all three probes
    let probe_dir = dir.join("probes");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", probe_dir.to_str().unwrap()])
        .args([
            "interpret",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--probes",
            "all",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    for f in [
        "q_trace.csv",
        "attention_spread.csv",
        "attention_matrices.csv",
        "gradient_map.csv",
    ] {
        assert!(probe_dir.join(f).exists(), "missing {f}");
    }
    let q_trace = std::fs::read_to_string(probe_dir.join("q_trace.csv")).unwrap();
    assert_eq!(q_trace.lines().count(), 2 + 96); // comment + header + one row per interval
}

#[test]
fn error_exit_codes() {
    let dir = tmp_dir("errors");

    // Config error -> 2.
    let bad_cfg = dir.join("bad.json");
    std::fs::write(&bad_cfg, r#"{"battery": {"nope": 1}}"#).unwrap();
    let st = bin()
        .args(["--config", bad_cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(["gen-data"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    // Data error (missing column) -> 3.
    let cfg = write_config(&dir, true);
    let bad_data = dir.join("short.csv");
    std::fs::write(&bad_data, "t,spot,fr,fl,sr,sl,dr\n0,1,0,0,0,0,0\n").unwrap();
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(["train", "--data", bad_data.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));

    // Capability error (attention probe on the MLP ablation) -> 4.
    let mlp_cfg = write_config(&tmp_dir("errors_mlp"), false);
    let data_dir = dir.join("data");
    bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()])
        .args(["gen-data", "--n-intervals", "384"])
        .status()
        .unwrap();
    let data = data_dir.join("prices.csv");
    let run_dir = dir.join("mlp_run");
    let st = bin()
        .args(["--config", mlp_cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()])
        .args(["train", "--data", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let st = bin()
        .args(["--config", mlp_cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args([
            "interpret",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            run_dir.join("checkpoint.bin").to_str().unwrap(),
            "--probes",
            "attention",
        ])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(4));

    // Unknown strategy -> generic failure (argument error).
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args([
            "benchmark",
            "--data",
            data.to_str().unwrap(),
            "--strategies",
            "nope",
        ])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
}
