//! End-to-end tests of the `qafdon` binary: exit codes, artifact wiring,
//! and reproducibility of generated files.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qafdon"))
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
[run]
seed = 77
threads = 1
data_dir = "data"
checkpoint_dir = "ckpt"
report_dir = "reports"
alpha = 0.05
dt_obs = 0.4

[model]
m = 32
d = 4
p = 3
s = 2
fourier_m = 4
fourier_sigma = 1.5
branch_hidden = [8]
trunk_hidden = [8]
head_hidden = []
alpha = 0.05
t_max_input = 2.233
horizon = 8.5

[data]
grid_step = 0.01
horizon = 8.5
dt_obs = 0.4
m = 32
n_loc = 6
t_f_min = 0.5
t_f_max = 1.5
clear_min = 0.1
clear_max = 0.333
depth_min = 0.3
depth_max = 0.9
p_stable = 0.8

[[data.buses]]
id = 1
depth_shift = -0.05

[[data.buses]]
id = 2
depth_shift = 0.05

[[data.buses]]
id = 3
depth_shift = 0.1

[fed]
n_clients = 2
k_local = 5
total_rounds = 30
batch_size = 16
seed = 77

[fed.adam]
lr = 0.003
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[finetune]
max_epochs = 4
patience = 3
val_fraction = 0.25
batch_size = 16
seed = 77

[finetune.adam]
lr = 0.002
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
"#,
    )
    .unwrap();
    path
}

fn run_ok(output: Output) -> String {
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn gen_data_is_seed_reproducible_and_counts_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());

    for out in ["a", "b"] {
        run_ok(
            bin()
                .current_dir(dir.path())
                .args(["--config", config.to_str().unwrap(), "gen-data"])
                .args(["--buses", "1,2,3", "--n-per-bus", "20"])
                .args(["--out", out])
                .output()
                .unwrap(),
        );
    }
    for bus in 1..=3 {
        let a = std::fs::read(dir.path().join(format!("a/bus_{bus}.ds"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b/bus_{bus}.ds"))).unwrap();
        assert_eq!(a, b, "same seed must give identical bytes");

        // 20 trajectories × n_loc 6 query lines per dataset.
        let text = String::from_utf8(a).unwrap();
        let queries = text.lines().filter(|l| l.starts_with("q ")).count();
        assert_eq!(queries, 20 * 6);
    }

    // A different seed changes the bytes.
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(["--config", config.to_str().unwrap(), "--seed", "78"])
            .args(["gen-data", "--buses", "1", "--n-per-bus", "20", "--out", "c"])
            .output()
            .unwrap(),
    );
    let a = std::fs::read(dir.path().join("a/bus_1.ds")).unwrap();
    let c = std::fs::read(dir.path().join("c/bus_1.ds")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn seven_buses_yield_seven_datasets_with_full_triplet_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(["--config", config.to_str().unwrap(), "gen-data"])
            .args(["--buses", "1,2,3,4,5,6,7", "--n-per-bus", "1000", "--out", "wide"])
            .output()
            .unwrap(),
    );
    for bus in 1..=7 {
        let text =
            std::fs::read_to_string(dir.path().join(format!("wide/bus_{bus}.ds"))).unwrap();
        let queries = text.lines().filter(|l| l.starts_with("q ")).count();
        assert_eq!(queries, 1000 * 6, "bus {bus}: n_c = n_traj × n_loc");
    }
}

#[test]
fn overwrite_needs_force_and_is_then_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let gen = |extra: &[&str]| {
        let mut cmd = bin();
        cmd.current_dir(dir.path())
            .args(["--config", config.to_str().unwrap()])
            .args(extra)
            .args(["gen-data", "--buses", "1", "--n-per-bus", "5", "--out", "data"]);
        cmd.output().unwrap()
    };
    run_ok(gen(&[]));
    let first = std::fs::read(dir.path().join("data/bus_1.ds")).unwrap();

    // Without --force-overwrite a rerun refuses to clobber the artifact.
    let refused = gen(&[]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("force-overwrite"));

    // With it, the rerun succeeds and reproduces the bytes exactly.
    run_ok(gen(&["--force-overwrite"]));
    let second = std::fs::read(dir.path().join("data/bus_1.ds")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn zero_trajectories_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let output = bin()
        .current_dir(dir.path())
        .args(["--config", config.to_str().unwrap(), "gen-data"])
        .args(["--buses", "1", "--n-per-bus", "0", "--out", "z"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn evaluate_calibrated_without_artifact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let output = bin()
        .current_dir(dir.path())
        .args(["--config", config.to_str().unwrap(), "evaluate"])
        .args(["--checkpoint", "x.ckpt", "--trajectories", "x.traj"])
        .args(["--out", "r", "--calibrated"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "clap must reject the flag combo");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("--calibration"), "{stderr}");
}

#[test]
fn end_to_end_smoke_three_buses() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let cfg = ["--config".to_string(), config.to_str().unwrap().to_string()];

    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["gen-data", "--buses", "1,2,3", "--n-per-bus", "200", "--out", "data"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["pretrain", "--data-dir", "data", "--buses", "1,2", "--out", "ckpt"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["finetune", "--checkpoint", "ckpt/pretrained.ckpt"])
            .args(["--data", "data/bus_3.ds", "--out", "ckpt"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["calibrate", "--checkpoint", "ckpt/finetuned.ckpt"])
            .args(["--data", "data/bus_3.ds", "--out", "ckpt"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["evaluate", "--checkpoint", "ckpt/finetuned.ckpt"])
            .args(["--calibrated", "--calibration", "ckpt/calibration.cal"])
            .args(["--trajectories", "data/bus_3.traj", "--out", "reports"])
            .output()
            .unwrap(),
    );

    let report = std::fs::read_to_string(dir.path().join("reports/report.csv")).unwrap();
    let aggregate = report
        .lines()
        .find(|l| l.starts_with("aggregate,"))
        .expect("aggregate row");
    let mean_picp: f64 = aggregate.split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&mean_picp), "mean PICP {mean_picp}");

    // The resolved config rides along with every stage's outputs.
    for f in [
        "data/gen-data.resolved.toml",
        "ckpt/pretrain.resolved.toml",
        "ckpt/finetune.resolved.toml",
        "ckpt/calibrate.resolved.toml",
        "reports/evaluate.resolved.toml",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }

    // Predict emits the interval curve for the unobserved tail.
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["predict", "--checkpoint", "ckpt/finetuned.ckpt"])
            .args(["--trajectory", "data/bus_3.traj", "--index", "3"])
            .args(["--out", "curve.csv"])
            .output()
            .unwrap(),
    );
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("t,truth,lo_raw,hi_raw,lo_cal,hi_cal"));
    assert!(curve.lines().count() > 100);
}

#[test]
fn full_cli_pipeline_is_byte_reproducible_from_persisted_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let cfg = ["--config".to_string(), config.to_str().unwrap().to_string()];

    let run = |tag: &str| {
        let data = format!("{tag}/data");
        let ckpt = format!("{tag}/ckpt");
        let reports = format!("{tag}/reports");
        run_ok(
            bin()
                .current_dir(dir.path())
                .args(&cfg)
                .args(["--threads", "1", "gen-data", "--buses", "1,2,3"])
                .args(["--n-per-bus", "12", "--out", &data])
                .output()
                .unwrap(),
        );
        run_ok(
            bin()
                .current_dir(dir.path())
                .args(&cfg)
                .args(["--threads", "1", "pretrain", "--data-dir", &data])
                .args(["--buses", "1,2", "--out", &ckpt])
                .output()
                .unwrap(),
        );
        run_ok(
            bin()
                .current_dir(dir.path())
                .args(&cfg)
                .args(["--threads", "1", "finetune"])
                .args(["--checkpoint", &format!("{ckpt}/pretrained.ckpt")])
                .args(["--data", &format!("{data}/bus_3.ds"), "--out", &ckpt])
                .output()
                .unwrap(),
        );
        run_ok(
            bin()
                .current_dir(dir.path())
                .args(&cfg)
                .args(["--threads", "1", "calibrate"])
                .args(["--checkpoint", &format!("{ckpt}/finetuned.ckpt")])
                .args(["--data", &format!("{data}/bus_3.ds"), "--out", &ckpt])
                .output()
                .unwrap(),
        );
        run_ok(
            bin()
                .current_dir(dir.path())
                .args(&cfg)
                .args(["--threads", "1", "evaluate"])
                .args(["--checkpoint", &format!("{ckpt}/finetuned.ckpt")])
                .args(["--calibrated", "--calibration", &format!("{ckpt}/calibration.cal")])
                .args(["--trajectories", &format!("{data}/bus_3.traj")])
                .args(["--out", &reports])
                .output()
                .unwrap(),
        );
    };
    run("x");
    run("y");

    // Every produced file must match byte for byte.
    let mut compared = 0;
    let mut stack = vec![dir.path().join("x")];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir.path().join("x")).unwrap();
            let twin = dir.path().join("y").join(rel);
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&twin).unwrap(),
                "{} differs between reruns",
                rel.display()
            );
            compared += 1;
        }
    }
    assert!(compared >= 12, "only compared {compared} files");
}

#[test]
fn calibrate_below_minimum_size_names_the_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let cfg = ["--config".to_string(), config.to_str().unwrap().to_string()];

    // 2 trajectories × 6 points = 12 scores < 19 needed at α = 0.05.
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["gen-data", "--buses", "1", "--n-per-bus", "2", "--out", "data"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["pretrain", "--data-dir", "data", "--buses", "1", "--out", "ckpt"])
            .output()
            .unwrap(),
    );
    let output = bin()
        .current_dir(dir.path())
        .args(&cfg)
        .args(["calibrate", "--checkpoint", "ckpt/pretrained.ckpt"])
        .args(["--data", "data/bus_1.ds", "--out", "ckpt"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("n=19"), "must name the minimum size: {stderr}");
}

#[test]
fn calibration_for_a_different_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let cfg = ["--config".to_string(), config.to_str().unwrap().to_string()];

    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["gen-data", "--buses", "1,2", "--n-per-bus", "20", "--out", "data"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["pretrain", "--data-dir", "data", "--buses", "1", "--out", "ckpt"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["finetune", "--checkpoint", "ckpt/pretrained.ckpt"])
            .args(["--data", "data/bus_2.ds", "--out", "ckpt"])
            .output()
            .unwrap(),
    );
    run_ok(
        bin()
            .current_dir(dir.path())
            .args(&cfg)
            .args(["calibrate", "--checkpoint", "ckpt/finetuned.ckpt"])
            .args(["--data", "data/bus_2.ds", "--out", "ckpt"])
            .output()
            .unwrap(),
    );

    // Evaluating the *pretrained* checkpoint with the fine-tuned model's
    // calibration must fail the hash check.
    let output = bin()
        .current_dir(dir.path())
        .args(&cfg)
        .args(["evaluate", "--checkpoint", "ckpt/pretrained.ckpt"])
        .args(["--calibrated", "--calibration", "ckpt/calibration.cal"])
        .args(["--trajectories", "data/bus_2.traj", "--out", "reports"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(5));
}

#[test]
fn sweep_collects_cells_and_marks_absences() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());

    // Two evaluated cells, one hole.
    for (cell, picp, pinaw) in [
        ("dt400-n100-pretrained", 0.8, 0.5),
        ("dt400-n100-finetuned", 0.9, 0.45),
    ] {
        let cell_dir = dir.path().join("cells").join(cell);
        std::fs::create_dir_all(&cell_dir).unwrap();
        std::fs::write(
            cell_dir.join("report.csv"),
            format!("traj_id,picp,pinaw,crossing_rate,n_points\naggregate,{picp},{pinaw},0.0,100\n"),
        )
        .unwrap();
    }

    let output = run_ok(
        bin()
            .current_dir(dir.path())
            .args(["--config", config.to_str().unwrap(), "sweep"])
            .args(["--artifacts-dir", "cells"])
            .args(["--dt-obs-list", "0.4", "--sizes", "100"])
            .args(["--stages", "pretrained,finetuned,conformal"])
            .args(["--out", "sweep.csv"])
            .output()
            .unwrap(),
    );
    assert!(output.contains("3 cells (1 absent)"), "{output}");

    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "row count = |dt_obs| × |sizes| × |stages|");
    assert!(rows.iter().any(|r| r.contains("pretrained,0.8,0.5")));
    assert!(rows.iter().any(|r| r.contains("conformal,absent,absent")));
}
