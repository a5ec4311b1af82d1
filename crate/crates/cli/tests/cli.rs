use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lutmpc"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn report(out: &Output) -> HashMap<String, String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn ok(args: &[&str]) -> HashMap<String, String> {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    report(&out)
}

#[test]
fn bench_counts_rounds_and_bytes() {
    let r = ok(&["bench", "--batch", "20"]);
    assert_eq!(r["rounds"], "1");
    assert_eq!(r["bytes_sent"], "160");
    assert_eq!(r["exact_outputs"], "20");

    let r = ok(&["bench", "--batch", "10", "--mode", "multi", "--eps", "0.5"]);
    assert_eq!(r["rounds"], "3");
    assert_eq!(r["bytes_sent"], "740");
    assert_eq!(r["tables"], "1");
}

#[test]
fn training_reports_are_reproducible_and_match_the_oracle() {
    let args = [
        "train",
        "--train-limit",
        "64",
        "--epochs",
        "1",
        "--check-oracle",
    ];
    let mut a = ok(&args);
    let mut b = ok(&args);
    // A truncation that moves a sigmoid input by one grid cell changes that
    // output by up to 1 LSB. Summed over 32 rows and shifted by 17 bits, this
    // moves a weight by at most 2 LSB.
    let worst: i64 = a["oracle_max_step_lsb"].parse().unwrap();
    assert!(worst <= 2, "one-step deviation {worst}");
    assert_eq!(a["test_accuracy"], a["oracle_test_accuracy"]);
    assert_eq!(a["train_accuracy"], a["oracle_train_accuracy"]);
    a.remove("secs");
    b.remove("secs");
    assert_eq!(a, b);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\ntrain-limit=64\nepochs=1\nbatch=16\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(ok(&["oracle", "--config", cfg])["iterations"], "4");
    assert_eq!(
        ok(&["oracle", "--config", cfg, "--batch", "8"])["iterations"],
        "8"
    );
}

#[test]
fn offline_bundles_drive_two_tcp_parties() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let r = ok(&[
        "offline",
        "--train-limit",
        "64",
        "--epochs",
        "1",
        "--mode",
        "multi",
        "--eps",
        "0.01",
        "--eps-total",
        "0.5",
        "--out",
        &d("bundle"),
    ]);
    assert_eq!(r["tables_sigmoid"], "2");
    assert_eq!(r["scalar_mults"], "3");

    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let (b0, b1, m0, m1) = (
        d("bundle/party0"),
        d("bundle/party1"),
        d("m0.bin"),
        d("m1.bin"),
    );
    let p0 = {
        let addr = addr.clone();
        std::thread::spawn(move || {
            ok(&[
                "serve", "--party", "0", "--bundle", &b0, "--listen", &addr, "--out", &m0,
            ])
        })
    };
    let r1 = ok(&[
        "serve",
        "--party",
        "1",
        "--bundle",
        &b1,
        "--connect",
        &addr,
        "--out",
        &m1,
        "--timeout-secs",
        "60",
    ]);
    let r0 = p0.join().unwrap();
    assert_eq!(r0["rounds"], r1["rounds"]);
    assert_eq!(r0["bytes_sent"], r1["bytes_received"]);
    assert_eq!(
        std::fs::read(d("m0.bin")).unwrap(),
        std::fs::read(d("m1.bin")).unwrap()
    );

    let r = ok(&[
        "infer",
        "--model-file",
        &d("m0.bin"),
        "--train-limit",
        "64",
        "--on-train",
    ]);
    assert_eq!(r["examples"], "64");
    assert_eq!(r["accuracy"], r["plaintext_accuracy"]);
}

#[test]
fn audit_reports_the_bound() {
    let r = ok(&[
        "audit",
        "--eps",
        "1",
        "--queries",
        "4000",
        "--min-count",
        "300",
    ]);
    assert_eq!(r["lookups"], "8000");
    assert!(r.contains_key("max_ratio"));
    assert!(r.contains_key("within_bound"));
}

#[test]
fn errors_exit_nonzero_with_a_report() {
    let out = run(&["train", "--mode", "multi"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(report(&out)["status"], "error");

    let out = run(&["bench", "--op", "tanh"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "serve",
        "--party",
        "0",
        "--bundle",
        dir.path().to_str().unwrap(),
        "--listen",
        "127.0.0.1:0",
    ]);
    assert_ne!(out.status.code(), Some(0));
}
