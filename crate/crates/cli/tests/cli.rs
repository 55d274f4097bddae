use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_MODEL: &str = r#""model": {"num_layers": 2, "hidden_dim": 32, "num_heads": 2, "ffn_dim": 64, "seed": 3}"#;

fn dcache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcache"))
        .args(args)
        .env_remove("DCACHE_SEED")
        .output()
        .expect("dcache runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, format!("{{{SMALL_MODEL}, {body}}}")).unwrap();
    path
}

fn run(config: &Path, mode: &str, out: &Path) -> Output {
    let o = dcache(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--mode",
        mode,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn missing_config_exits_2() {
    let o = dcache(&["run", "--config", "/nonexistent/config.json", "--mode", "cached"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));
}

#[test]
fn invalid_config_and_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#""policy": {"update_ratio": 2.0}"#);
    let o = dcache(&["run", "--config", path.to_str().unwrap(), "--mode", "cached"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dcache(&["run", "--config", path.to_str().unwrap(), "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
    let path = write_config(dir.path(), r#""gen": {"steps": 8}"#);
    let o = dcache(&["sweep", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "sweep without a grid");
}

#[test]
fn cached_mode_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""gen": {"steps": 12, "gen_len": 8, "block_len": 4}, "prompt": {"text": "hi"}"#,
    );
    let out = dir.path().join("out");
    run(&config, "cached", &out);
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,case_codes,flops,tokens_recomputed");
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0][0], "12");
    assert_eq!(rows[0][1], "II");
    assert!(!out.join("baseline_metrics.csv").exists());

    let s = summary(&out);
    let per_step: u64 = rows.iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    assert_eq!(s["total_flops"], per_step);
    assert_eq!(s["total_flops"], s["analytic_flops"]);
    assert_eq!(s["cache_elements"], 4 * 2 * (2 + 8) * 32);
    assert_eq!(s["reserved_ids"]["tokenizer_mask"], 256);
    assert_eq!(s["reserved_ids"]["tokenizer_pad"], 257);
    assert!(s["speedup"].is_null());
}

#[test]
fn unit_interval_compare_matches_with_unit_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""gen": {"steps": 8, "gen_len": 8, "block_len": 4}, "prompt": {"tokens": [1, 2, 3]},
           "policy": {"prompt_interval": 1, "response_interval": 1}"#,
    );
    let out = dir.path().join("out");
    let o = run(&config, "compare", &out);
    let s = summary(&out);
    assert_eq!(s["match_rate"], 1.0);
    assert_eq!(s["speedup"], 1.0);
    assert_eq!(s["max_abs_hidden_diff"], 0.0);
    assert_eq!(s["baseline_flops"], s["cached_flops"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("match rate: 1.0000"));
    assert_eq!(csv_rows(&out.join("baseline_metrics.csv")).len(), 8);
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#""gen": {"steps": 4, "gen_len": 4, "block_len": 4}"#);
    let args = |out: &Path| {
        vec![
            "run".to_owned(),
            "--config".into(),
            config.to_str().unwrap().into(),
            "--mode".into(),
            "baseline".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let seeded = |seed: &str, out: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_dcache"))
            .args(args(out))
            .env("DCACHE_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        summary(out)["model"]["seed"].clone()
    };
    assert_eq!(seeded("11", &dir.path().join("a")), 11);
    let o = Command::new(env!("CARGO_BIN_EXE_dcache"))
        .args(args(&dir.path().join("b")))
        .env("DCACHE_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_flag_writes_similarity_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""gen": {"steps": 4, "gen_len": 8, "block_len": 8}, "prompt": {"tokens": [5, 6]}"#,
    );
    let out = dir.path().join("out");
    let o = dcache(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--mode",
        "compare",
        "--out",
        out.to_str().unwrap(),
        "--trace",
    ]);
    assert!(o.status.success());
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "step,layer,token,sim_K,sim_V,sim_attn,sim_ffn"
    );
    // Three transitions, two layers, ten tokens.
    assert_eq!(trace.lines().count() - 1, 3 * 2 * 10);
    assert!(out.join("trace_correlation.csv").exists());
}

fn sweep(config: &Path, out: &Path, jobs: &str) -> Vec<Vec<String>> {
    let o = dcache(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        jobs,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "K_p,K_r,rho,flops,speedup,match_rate");
    csv_rows(&out.join("sweep.csv"))
}

#[test]
fn response_interval_sweep_is_strictly_cheaper() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""prompt": {"tokens": [1, 2, 3, 4, 5, 6, 7, 8]},
           "sweep": {"prompt_intervals": [50], "response_intervals": [1, 2, 3, 4, 5, 6, 7, 8], "update_ratios": [0.25]}"#,
    );
    let out = dir.path().join("out");
    let rows = sweep(&config, &out, "2");
    assert_eq!(rows.len(), 8);
    let flops: Vec<u64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[1] < w[0]), "{flops:?}");
    let kr: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(kr, ["1", "2", "3", "4", "5", "6", "7", "8"]);
    assert!(out.join("speedup_vs_K_r.svg").exists());
    assert!(out.join("match_vs_K_r.svg").exists());
    assert!(!out.join("speedup_vs_K_p.svg").exists());
}

#[test]
fn ratio_sweep_is_non_decreasing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""gen": {"steps": 16, "gen_len": 16, "block_len": 8}, "prompt": {"tokens": [9, 8, 7]},
           "sweep": {"prompt_intervals": [4], "response_intervals": [8], "update_ratios": [0, 0.25, 0.5, 1]}"#,
    );
    let rows = sweep(&config, &dir.path().join("out"), "1");
    let flops: Vec<u64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[1] >= w[0]), "{flops:?}");
}

#[test]
fn single_point_sweep_matches_compare() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""gen": {"steps": 16, "gen_len": 16, "block_len": 8}, "prompt": {"tokens": [4, 4, 2]},
           "policy": {"prompt_interval": 4, "response_interval": 2, "update_ratio": 0.25},
           "sweep": {}"#,
    );
    let rows = sweep(&config, &dir.path().join("sweep"), "1");
    assert_eq!(rows.len(), 1);
    let out = dir.path().join("run");
    run(&config, "compare", &out);
    let s = summary(&out);
    assert_eq!(rows[0][..3], ["4", "2", "0.25"]);
    assert_eq!(rows[0][3], s["cached_flops"].to_string());
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), s["speedup"].as_f64().unwrap());
    assert_eq!(rows[0][5].parse::<f64>().unwrap(), s["match_rate"].as_f64().unwrap());
    assert_eq!(
        fs::read(dir.path().join("sweep/baseline_metrics.csv")).unwrap(),
        fs::read(out.join("baseline_metrics.csv")).unwrap()
    );
}

#[test]
fn sweep_output_does_not_depend_on_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#""gen": {"steps": 8, "gen_len": 8, "block_len": 4}, "prompt": {"tokens": [1]},
           "sweep": {"prompt_intervals": [1, 3], "response_intervals": [2, 5], "update_ratios": [0, 0.5]}"#,
    );
    sweep(&config, &dir.path().join("a"), "1");
    sweep(&config, &dir.path().join("b"), "3");
    for name in ["sweep.csv", "speedup_vs_K_p.svg", "match_vs_rho.svg"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}
