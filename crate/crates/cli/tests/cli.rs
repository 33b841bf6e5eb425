//! Behaviour of the `mmssl` binary: outputs, exit codes, config files and
//! manifests.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mmssl");

fn mmssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mmssl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    mmssl(dir, args).status.code().unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Small dataset plus a two-epoch checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    ok(dir, &["gen-data", "--n", "300", "--seed", "3", "--out", "d.txt"]);
    ok(
        dir,
        &["pretrain", "--method", "mm-simclr", "--data", "d.txt", "--epochs", "2", "--dim", "32", "--out", "m.ckpt"],
    );
    (dir.join("d.txt"), dir.join("m.ckpt"))
}

#[test]
fn gen_data_writes_the_requested_records_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "2000", "--eta", "0", "--seed", "0", "--out", "a.txt"]);
    ok(d, &["gen-data", "--n", "2000", "--eta", "0", "--seed", "0", "--out", "b.txt"]);
    let a = read(d.join("a.txt"));
    assert_eq!(a.lines().filter(|l| l.starts_with("s ")).count(), 2000);
    assert_eq!(a, read(d.join("b.txt")));
    assert!(d.join("a.txt.manifest.json").exists());
    ok(d, &["gen-data", "--n", "10", "--seed", "1", "--out", "c.txt"]);
    assert_ne!(a, read(d.join("c.txt")));
}

#[test]
fn out_of_range_noise_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["gen-data", "--eta", "1.5", "--out", "x.txt"]), 2);
    assert!(!dir.path().join("x.txt").exists());
}

#[test]
fn pretrain_writes_checkpoint_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, ckpt) = fixture(d);
    assert!(ckpt.exists());
    let csv = read(d.join("m.ckpt.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,fraction,epoch,split,loss,accuracy,macro_f1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("mm_simclr,-,1,train,"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "50", "--out", "d.txt"]);
    assert_eq!(code(d, &["pretrain", "--method", "unknown", "--data", "d.txt", "--out", "m"]), 2);
    assert_eq!(code(d, &["pretrain", "--method", "vse", "--data", "d.txt", "--out", "m", "--batch-size", "1"]), 2);
}

#[test]
fn ext_pie_weights_are_accepted_on_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "64", "--out", "d.txt"]);
    ok(
        d,
        &[
            "pretrain", "--method", "ext-pie-net", "--data", "d.txt", "--epochs", "1", "--dim", "16", "--out", "m",
            "--lambda-f2f", "0.5", "--lambda-f2i", "0.25", "--lambda-f2t", "0.25",
        ],
    );
    let manifest = read(d.join("m.csv.manifest.json"));
    assert!(manifest.contains("\"lambda_f2i\": 0.25"), "{manifest}");
}

#[test]
fn repeated_runs_use_consecutive_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n", "64", "--out", "d.txt"]);
    ok(
        d,
        &["pretrain", "--method", "simclr", "--data", "d.txt", "--epochs", "1", "--dim", "16", "--runs", "3", "--seed", "5", "--out", "m"],
    );
    for k in 0..3 {
        assert!(d.join(format!("m.run{k}")).exists());
    }
    let csv = read(d.join("m.csv"));
    for s in 5..8 {
        assert!(csv.contains(&format!("simclr#seed{s},")), "{csv}");
    }
}

#[test]
fn sweep_reports_each_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let common = ["--checkpoint", "m.ckpt", "--data", "d.txt", "--epochs", "3"];
    let fractions = |csv: &str| {
        let mut f: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
        f.dedup();
        f
    };

    ok(d, &[&["sweep", "--metrics", "s.csv"][..], &common].concat());
    assert_eq!(fractions(&read(d.join("s.csv"))), ["0.01", "0.1", "0.2", "0.5"]);

    ok(d, &[&["sweep", "--metrics", "t.csv", "--fractions", "0.01,0.5"][..], &common].concat());
    assert_eq!(fractions(&read(d.join("t.csv"))), ["0.01", "0.5"]);

    ok(d, &[&["probe", "--metrics", "p.csv"][..], &common].concat());
    let probe = read(d.join("p.csv"));
    assert_eq!(probe.lines().filter(|l| l.contains(",heldout,")).count(), 3);
    assert!(probe.lines().nth(1).unwrap().starts_with("mm_simclr,-,1,"));
}

#[test]
fn unreadable_inputs_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, ckpt) = fixture(d);
    let args = ["probe", "--checkpoint", "m.ckpt", "--data", "d.txt", "--metrics", "p.csv", "--epochs", "1"];

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] = if bytes[mid] == b'1' { b'2' } else { b'1' };
    std::fs::write(&ckpt, bytes).unwrap();
    let out = mmssl(d, &args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m.ckpt"));

    std::fs::remove_file(&ckpt).unwrap();
    assert_eq!(code(d, &args), 3);
    assert!(!d.join("p.csv").exists());
}

#[test]
fn gradcheck_names_every_operation() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--seeds", "2", "--out", "g.csv"]);
    for op in mmssl::verify::SUITE_OPS {
        assert!(stdout.contains(op), "{op} missing from\n{stdout}");
    }
    let report = read(dir.path().join("g.csv"));
    assert_eq!(report.lines().count(), 1 + 2 * mmssl::verify::SUITE_OPS.len());
    assert!(!report.contains("FAIL"));
}

#[test]
fn gradcheck_below_attainable_tolerance_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmssl(dir.path(), &["gradcheck", "--seeds", "1", "--tolerance", "1e-15"]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed 0"), "{err}");
}

#[test]
fn command_line_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# generator settings\nn = 40\nseed = 9\nout = from_cfg.txt\n").unwrap();
    ok(d, &["--config", "run.cfg", "gen-data"]);
    let a = read(d.join("from_cfg.txt"));
    assert_eq!(a.lines().filter(|l| l.starts_with("s ")).count(), 40);

    ok(d, &["gen-data", "--config", "run.cfg", "--n", "25", "--out", "flag.txt"]);
    assert_eq!(read(d.join("flag.txt")).lines().filter(|l| l.starts_with("s ")).count(), 25);
    let manifest = read(d.join("flag.txt.manifest.json"));
    assert!(manifest.contains("\"seed\": 9"), "{manifest}");

    std::fs::write(d.join("bad.cfg"), "n 40\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.cfg", "gen-data", "--out", "x"]), 2);
}

#[test]
fn replay_into_another_directory_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    std::fs::create_dir(d.join("again")).unwrap();
    ok(d, &["replay", "--manifest", "m.ckpt.csv.manifest.json", "--output-dir", "again"]);
    assert_eq!(read(d.join("m.ckpt.csv")), read(d.join("again/m.ckpt.csv")));
    assert_eq!(std::fs::read(d.join("m.ckpt")).unwrap(), std::fs::read(d.join("again/m.ckpt")).unwrap());

    std::fs::write(d.join("broken.json"), "{\"format_version\": 99}").unwrap();
    assert_ne!(code(d, &["replay", "--manifest", "broken.json"]), 0);
}
