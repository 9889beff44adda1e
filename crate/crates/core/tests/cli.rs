use std::fs;
use std::process::Command;

use mimo_fl::harness::CSV_HEADER;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mimo-fl"))
}

fn write_config(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

const SMALL_SWEEP: &str = r#"
kind = "mse_sweep"
trials = 40
antennas = [16]
clients = [4]
snr_db = [0.0, 10.0]
"#;

#[test]
fn mse_writes_csv_with_exact_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "sweep.toml", SMALL_SWEEP);
    let out = dir.path().join("out.csv");
    let status = bin().args(["mse", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert!(!text.contains('\r'));
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 11));
    assert!(text.contains(",ro_uplink,16,4,10.0,crlb,"));
}

#[test]
fn output_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "sweep.toml", SMALL_SWEEP);
    let run = |workers: &str| {
        let out = bin().args(["mse", "--seed", "7", "--workers", workers, "--config"]).arg(&cfg).output().unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "sweep.toml", SMALL_SWEEP);
    let out =
        bin().args(["mse", "--seed", "9", "--trials", "5", "--full-grid", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.ends_with(",5,9,unscaled,perfect"), "{row}");
    assert!(text.contains(",1024,4,"), "full grid adds the large arrays");
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "bad.toml", "kind = \"mse_sweep\"\ntrails = 10\n");
    let out = bin().args(["mse", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trails"));
}

#[test]
fn wrong_kind_for_subcommand_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "sweep.toml", SMALL_SWEEP);
    let out = bin().args(["timing", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, name, text) in [
        ("mse", "rho.toml", "kind = \"mse_sweep\"\nchannel = { kind = \"antenna_correlated\", rho = 2.0 }\n"),
        ("mse", "trials.toml", "kind = \"mse_sweep\"\ntrials = 0\n"),
        (
            "robustness",
            "pilot.toml",
            "kind = \"robustness_imperfect_csi\"\ncsi_modes = [{ kind = \"pilot_noise\", pilot_snr_db = nan }]\n",
        ),
    ] {
        let cfg = write_config(&dir, name, text);
        let out = bin().args([sub, "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"), "{name}");
    }
}

#[test]
fn non_finite_results_are_numeric_failures_with_cell() {
    // 10^(-400) underflows to zero, so the noise variance is infinite.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "overflow.toml",
        "kind = \"mse_sweep\"\ntrials = 5\nantennas = [8]\nclients = [2]\nsnr_db = [-4000.0]\n",
    );
    let out = bin().args(["mse", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("M=8 K=2 snr=-4000 dB"), "{err}");
}

#[test]
fn bounds_defaults_run_without_config() {
    let out = bin().arg("bounds").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(",bound_b,") && text.contains(",bound_rhs,"));
}

#[test]
fn fl_and_robustness_small_configs() {
    let dir = tempfile::tempdir().unwrap();
    let fl = write_config(
        &dir,
        "fl.toml",
        r#"
kind = "fl_run"
antennas = [16]
snr_db = [10.0]

[fl]
task = { kind = "synthetic_binary", dim = 6, samples_per_client = 10, test_samples = 50, label_noise = 0.0 }
loss = { kind = "logistic_l2", lambda = 0.1 }
partition = "label_skewed"
total_clients = 4
participants_per_round = 2
local_steps = 2
batch_size = 5
rounds = 4
snr_dl_db = 10.0
combos = [{ uplink = "enhanced", downlink = "random_orthogonalization" }]
seeds = 2
eval_every = 2
"#,
    );
    let out = bin().args(["fl", "--config"]).arg(&fl).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("fl_run:round=4,enhanced_uplink+ro_downlink,16,2,10.0,accuracy,"), "{text}");

    let rob = write_config(
        &dir,
        "rob.toml",
        "kind = \"robustness_correlation\"\ntrials = 20\nantennas = [16]\nclients = [4]\nsnr_db = [10.0]\n\
         correlations = [{ kind = \"user_correlated\", rho = 0.05 }]\n",
    );
    let out = bin().args(["robustness", "--config"]).arg(&rob).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains(",mse_delta_db,"));
}

#[test]
fn unwritable_output_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["bounds", "--out"]).arg(dir.path().join("missing").join("out.csv")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn imperfect_csi_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "csi.toml",
        "kind = \"robustness_imperfect_csi\"\ntrials = 20\nantennas = [16]\nclients = [4]\nsnr_db = [10.0]\n\
         csi_modes = [{ kind = \"pilot_noise\", pilot_snr_db = 20.0 }]\n",
    );
    let out = bin().args(["robustness", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.ends_with(",pilot_20dB") && l.contains(",mse_delta_db,")), "{text}");
}
