use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dba_core::harness::{read_epochs_csv, read_json, RunSummary, SelectionLogEntry, EPOCHS_HEADER};
use dba_core::{Dataset, Matrix, RngState};

fn dba() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dba"));
    c.env_remove("MNIST_DATA_DIR");
    c
}

fn write_split(dir: &Path, prefix: &str, n: usize, seed: u64) {
    let mut rng = RngState::new(seed);
    let images = Matrix::from_fn(n, 16, |_, _| (rng.uniform() * 255.0).round() / 255.0);
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    let d = Dataset::new(images, labels).unwrap();
    d.write_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
    .unwrap();
}

fn fake_mnist(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    write_split(dir, "train", 80, 1);
    write_split(dir, "t10k", 30, 2);
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("batch_size = 32\nmax_epochs = 3\nmin_batch = 8\nstride_size = 4\n{extra}")).unwrap();
    path
}

#[test]
fn presets_are_listed() {
    let out = ok(dba().arg("presets").output().unwrap());
    assert!(out.lines().any(|l| l == "mnist-1pct-dba-sgd-var"));
    assert!(out.lines().any(|l| l == "mnist-10pc-sgd-b25"));
    assert_eq!(out.lines().count(), 40);
}

#[test]
fn baseline_run_writes_epoch_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fake_mnist(&data);
    let cfg = write_config(tmp.path(), "");
    let out_dir = tmp.path().join("out");
    let stdout = ok(dba()
        .args(["run", "--seed", "7", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(&data)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap());
    assert!(stdout.contains("seed   7"), "{stdout}");
    let seed_dir = out_dir.join("seed-7");
    let csv = fs::read_to_string(seed_dir.join("epochs.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), EPOCHS_HEADER);
    assert_eq!(csv.lines().count(), 4);
    assert!(!seed_dir.join("selection.jsonl").exists());
    let recs = read_epochs_csv(&seed_dir.join("epochs.csv")).unwrap();
    assert!(recs.iter().all(|r| r.data_utilization == 1.0 && r.batch_size == 32));
}

#[test]
fn dba_sweep_logs_selections_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fake_mnist(&data);
    let cfg = write_config(tmp.path(), "seeds = [0, 1]\n");
    let out_dir = tmp.path().join("out");
    ok(dba()
        .args(["sweep", "--dba", "on", "--metric", "grad", "--optimizer", "adam", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out_dir)
        .env("MNIST_DATA_DIR", &data)
        .output()
        .unwrap());
    let summary: RunSummary = read_json(&out_dir.join("summary.json")).unwrap();
    assert_eq!(summary.per_seed.len(), 2);
    let config: serde_json::Value = read_json(&out_dir.join("config.json")).unwrap();
    assert_eq!(config["optimizer"], "adam");
    assert_eq!(config["dba"]["metric"], "gradient_norm");
    for seed in [0, 1] {
        let text = fs::read_to_string(out_dir.join(format!("seed-{seed}/selection.jsonl"))).unwrap();
        let entries: Vec<SelectionLogEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(!entries.is_empty());
        assert!(entries.iter().all(|e| e.selection.samples_selected >= 1));
    }

    fs::remove_file(out_dir.join("summary.json")).unwrap();
    let stdout = ok(dba().arg("report").arg(&out_dir).output().unwrap());
    assert!(stdout.contains("over 2 seed(s)"), "{stdout}");
    let rebuilt: RunSummary = read_json(&out_dir.join("summary.json")).unwrap();
    assert_eq!(rebuilt, summary);
}

#[test]
fn equal_seeds_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fake_mnist(&data);
    let cfg = write_config(tmp.path(), "dba = true\n");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(dba()
            .args(["run", "--seed", "3", "--config"])
            .arg(&cfg)
            .arg("--data-dir")
            .arg(&data)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .unwrap());
        let seed = out.join("seed-3");
        (
            fs::read(seed.join("epochs.csv")).unwrap(),
            fs::read(seed.join("selection.jsonl")).unwrap(),
            fs::read(seed.join("params.json")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dba()
        .args(["run", "--preset", "mnist-1pct-dba-sgd-var", "--max-epochs", "1", "--data-dir"])
        .arg(tmp.path().join("missing"))
        .arg("--out-dir")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MNIST file not found"));

    let out = dba().args(["run", "--preset", "mnist-2pct-sgd-b64"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));

    let out = dba()
        .args(["run", "--preset", "mnist-full-sgd-b64", "--out-dir"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MNIST_DATA_DIR"));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "batch_sise = 3\n").unwrap();
    let out = dba().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}
