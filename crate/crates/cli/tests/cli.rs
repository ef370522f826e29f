use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn imup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imup")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = imup(args);
    assert!(
        out.status.success(),
        "imup {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Serving(Child);

impl Drop for Serving {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn end_to_end_request_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (key, pubkey, pool, cat, state, store) = (
        d.join("key.bin"),
        d.join("key.pub"),
        d.join("pool.bin"),
        d.join("catalog"),
        d.join("device.bin"),
        d.join("store"),
    );
    ok(&[
        "keygen",
        "--bits",
        "32",
        "--seed",
        "cli",
        "--out",
        p(&key),
        "--public-out",
        p(&pubkey),
    ]);
    assert!(std::fs::metadata(&pubkey).unwrap().len() < std::fs::metadata(&key).unwrap().len());
    ok(&[
        "gen-pool",
        "--key",
        p(&key),
        "--count",
        "16",
        "--pow-difficulty",
        "1",
        "--out",
        p(&pool),
    ]);
    ok(&["package", "--catalog", p(&cat), "--synthetic", "10", "--seed", "3"]);
    let payload = d.join("extra.bin");
    std::fs::write(&payload, b"extra payload").unwrap();
    let out = ok(&[
        "package",
        "--catalog",
        p(&cat),
        "--name",
        "extra",
        "--payload",
        p(&payload),
        "--kind",
        "script",
        "--step",
        "run",
        "--dep",
        "0,1",
    ]);
    assert!(out.contains("extra"));
    // Unknown dependency is refused.
    assert!(!imup(&[
        "package",
        "--catalog",
        p(&cat),
        "--name",
        "bad",
        "--payload",
        p(&payload),
        "--dep",
        "99"
    ])
    .status
    .success());

    ok(&[
        "factory-init",
        "--key",
        p(&key),
        "--catalog",
        p(&cat),
        "--pool",
        p(&pool),
        "--chain-length",
        "3",
        "--state",
        p(&state),
    ]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_imup"))
        .args([
            "serve",
            "--catalog",
            p(&cat),
            "--pool",
            p(&pool),
            "--key",
            p(&key),
            "--listen",
            "127.0.0.1:0",
            "--chain-length",
            "3",
            "--pow-difficulty",
            "1",
            "--store",
            p(&store),
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let _serving = Serving(child);
    let addr = line
        .split_whitespace()
        .nth(2)
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();

    let image = d.join("img.bin");
    let first = ok(&["request", "--addr", &addr, "--modules", "4", "--out", p(&image)]);
    assert!(first.starts_with("new"), "{first}");
    let again = ok(&["request", "--addr", &addr, "--modules", "4", "--out", p(&image)]);
    assert!(again.starts_with("cached"), "{again}");
    assert!(!imup(&[
        "request",
        "--addr",
        &addr,
        "--modules",
        "0,1,2,3",
        "--out",
        p(&d.join("x"))
    ])
    .status
    .success());

    let v = ok(&[
        "verify",
        "--state",
        p(&state),
        "--image",
        p(&image),
        "--branch",
        "functional",
    ]);
    assert_eq!(v.trim(), "accepted");
    ok(&["verify", "--state", p(&state), "--image", p(&image)]);
    // A functional image is not a security update.
    let sec = imup(&[
        "verify",
        "--state",
        p(&state),
        "--image",
        p(&image),
        "--branch",
        "security",
    ]);
    assert_eq!(sec.status.code(), Some(1));

    let mut bytes = std::fs::read(&image).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = d.join("bad.bin");
    std::fs::write(&bad, &bytes).unwrap();
    let out = imup(&["verify", "--state", p(&state), "--image", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "rejected");

    // Missing files are errors, also exit 1.
    assert_eq!(
        imup(&["verify", "--state", p(&d.join("none")), "--image", p(&image)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn serve_refuses_mismatched_difficulty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (key, pool, cat) = (d.join("k"), d.join("pool"), d.join("cat"));
    ok(&["keygen", "--bits", "32", "--seed", "x", "--out", p(&key)]);
    ok(&[
        "gen-pool",
        "--key",
        p(&key),
        "--count",
        "4",
        "--pow-difficulty",
        "0",
        "--out",
        p(&pool),
    ]);
    ok(&["package", "--catalog", p(&cat), "--synthetic", "4"]);
    let out = imup(&[
        "serve",
        "--catalog",
        p(&cat),
        "--pool",
        p(&pool),
        "--key",
        p(&key),
        "--listen",
        "127.0.0.1:0",
        "--chain-length",
        "1",
        "--pow-difficulty",
        "2",
        "--store",
        p(&d.join("s")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("difficulty"));
}

#[test]
fn bench_and_attack_append_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    for seed in ["1", "2"] {
        ok(&[
            "bench",
            "--modules",
            "20",
            "--requests",
            "40",
            "--chain-length",
            "3",
            "--key-bits",
            "32",
            "--seed",
            seed,
            "--out",
            p(&csv),
        ]);
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("total_time_s,hit_rate_pct"), "{text}");

    let attack = dir.path().join("attack.csv");
    let out = ok(&[
        "attack-sim",
        "--key-bits",
        "32",
        "--exposed-frac",
        "0.75",
        "--pow-difficulty",
        "1",
        "--runs",
        "2",
        "--seed",
        "4",
        "--out",
        p(&attack),
    ]);
    assert!(out.contains("forged 2/2"), "{out}");
    assert!(out.contains("seed 4"));
    ok(&[
        "attack-sim",
        "--key-bits",
        "1024",
        "--exposed-frac",
        "0.9",
        "--pow-difficulty",
        "3",
        "--analytic",
        "--out",
        p(&attack),
    ]);
    assert_eq!(std::fs::read_to_string(&attack).unwrap().lines().count(), 3);
    // Bench rows cannot go into an attack file.
    assert!(!imup(&[
        "bench",
        "--modules",
        "5",
        "--requests",
        "5",
        "--key-bits",
        "32",
        "--out",
        p(&attack)
    ])
    .status
    .success());
}
