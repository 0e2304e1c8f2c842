//! End-to-end runs of the binary on a tiny phantom corpus.

use std::path::Path;
use std::process::{Command, Output};

fn tiny_config(root: &Path, vq_epochs: usize) -> String {
    format!(
        r#"seed = 3

[paths]
data_root = "{data}"
output_dir = "{out}"

[data]
n_train = 24
n_val = 20
n_test = 6
n_corrupted = 3

[vqvae]
downsample = 4
latent_channels = 2
codebook_size = 16
channel_widths = [8, 8, 8]
res_blocks = 1
epochs = {vq_epochs}
batch_size = 8
learning_rate = 0.001

[ddpm]
epochs = 1
batch_size = 8
learning_rate = 0.001

[ddpm.unet]
base_width = 8
channel_mult = [1]
attention = false

[anomaly]
t_start = 40
ddim_steps = 8
image_score_stride = 20
max_batch = 8
bench_images = 4
"#,
        data = root.join("data").display(),
        out = root.join("run").display(),
    )
}

fn run(root: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = root.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_anomaly-ddpm"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .env_remove("ANOMALY_DDPM_DEVICE")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_workflow_then_stale_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root, 1);
    ok(&run(root, &cfg, &["phantoms", "--n", "50", "--size", "32"]));
    ok(&run(root, &cfg, &["prepare"]));
    let out = root.join("run");
    assert!(out.join("splits.json").is_file());
    assert!(out.join("test/sprites.json").is_file());
    assert!(out.join("resolved_config.toml").is_file());

    ok(&run(root, &cfg, &["train-vqvae"]));
    ok(&run(root, &cfg, &["train-ddpm"]));
    ok(&run(root, &cfg, &["calibrate", "--grid", "both"]));
    assert!(out.join("threshold_full.safetensors").is_file());
    assert!(out.join("threshold_fast.safetensors").is_file());

    let csv = ok(&run(root, &cfg, &["evaluate", "--variants", "a,b,c,d"]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], anomaly_ddpm::metrics::CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("a,") && lines[4].starts_with("d,"));
    assert!(out.join("metrics.json").is_file());

    ok(&run(root, &cfg, &["bench", "--variants", "c,d"]));
    let bench: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["results"].as_array().unwrap().len(), 2);

    ok(&run(root, &cfg, &["detect", "--fast"]));
    let reports = out.join("detect/c-fast/reports.json");
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(reports).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 6);

    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("provenance/evaluate.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 3);
    assert!(prov["checkpoints"]["ddpm.safetensors"].is_string());

    // a different f than the trained autoencoder is caught before any work
    assert_eq!(run(root, &cfg, &["--f", "8", "evaluate"]).status.code(), Some(2));

    // resuming adds exactly one epoch to the curve
    let cfg2 = tiny_config(root, 2);
    ok(&run(root, &cfg2, &["train-vqvae"]));
    let curve = std::fs::read_to_string(out.join("vqvae_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    // the diffusion model and thresholds now refer to an older autoencoder
    let stale = run(root, &cfg2, &["evaluate"]);
    assert_eq!(stale.status.code(), Some(2), "{}", String::from_utf8_lossy(&stale.stderr));
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root, 1);
    assert_eq!(run(root, "bogus_key = 1\n", &["prepare"]).status.code(), Some(2));
    assert_eq!(run(root, &cfg, &["--f", "3", "prepare"]).status.code(), Some(2));
    assert_eq!(run(root, &cfg, &["--variant", "z", "prepare"]).status.code(), Some(2));
    let gpu = Command::new(env!("CARGO_BIN_EXE_anomaly-ddpm"))
        .args(["prepare"])
        .env("ANOMALY_DDPM_DEVICE", "cuda")
        .current_dir(root)
        .output()
        .unwrap();
    assert_eq!(gpu.status.code(), Some(2));
}

#[test]
fn missing_prerequisites_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root, 1);
    // no corpus and no split manifest yet
    assert_eq!(run(root, &cfg, &["prepare"]).status.code(), Some(1));
    assert_eq!(run(root, &cfg, &["train-vqvae"]).status.code(), Some(1));
}
