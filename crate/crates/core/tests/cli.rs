use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fabr::dataset::Manifest;
use fabr::io::read_mask;

fn fabr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fabr"))
        .args(args)
        .env_remove("FABR_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fabr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err_line(args: &[&str]) -> String {
    let out = fabr(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one line, got {stderr:?}");
    assert!(lines[0].starts_with("error: "), "{stderr:?}");
    lines[0].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A four-case dataset and a two-epoch run, shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        ok(&["phantom-gen", "--seed", "21", "--n", "4", "--out", s(&data)]);
        ok(&[
            "--deterministic", "train", "--seed", "21", "--dataset", s(&data), "--run-dir", s(&run), "--epochs", "2", "-q",
        ]);
        Fixture { _dir: dir, data, run }
    })
}

#[test]
fn phantom_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, empty) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("e"));
    ok(&["phantom-gen", "--seed", "3", "--n", "1", "--out", s(&a)]);
    ok(&["phantom-gen", "--seed", "3", "--n", "1", "--out", s(&b)]);
    for f in ["case_000.vol", "case_000.msk", "case_000.branches.txt", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    ok(&["phantom-gen", "--seed", "3", "--n", "0", "--out", s(&empty)]);
    assert!(Manifest::load(&empty).unwrap().cases.is_empty());
}

#[test]
fn train_writes_checkpoints_and_log() {
    let f = fixture();
    assert!(f.run.join("epoch_001.ckpt").is_file());
    assert!(f.run.join("epoch_002.ckpt").is_file());
    assert!(f.run.join("config.toml").is_file());
    let log = std::fs::read_to_string(f.run.join("train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,ordinary_loss,border_loss,total,val_dice");
    assert_eq!(rows.len(), 3);
    for (i, row) in rows[1..].iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1..4].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let common = ["--deterministic", "train", "--seed", "21", "--dataset", s(&f.data), "--run-dir", s(&run), "-q"];
    ok(&[&common[..], &["--epochs", "1"]].concat());
    ok(&[&common[..], &["--epochs", "2", "--resume"]].concat());
    assert_eq!(
        std::fs::read(run.join("epoch_002.ckpt")).unwrap(),
        std::fs::read(f.run.join("epoch_002.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(run.join("train_log.csv")).unwrap(),
        std::fs::read_to_string(f.run.join("train_log.csv")).unwrap()
    );
}

#[test]
fn eval_reports_one_row_per_case() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("epoch_002.ckpt");
    let stdout = ok(&[
        "eval", "--seed", "21", "--checkpoint", s(&ckpt), "--dataset", s(&f.data), "--split", "all", "--out", s(out.path()),
    ]);
    assert!(stdout.contains("4 cases"), "{stdout}");
    for stem in ["coarse", "rendered"] {
        let csv = std::fs::read_to_string(out.path().join(format!("{stem}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case_id,iou,precision,dlr,dbr,amr");
        assert_eq!(lines.len(), 5);
        for l in &lines[1..] {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(cols.len(), 6);
            assert!(cols[1..].iter().all(|c| (0.0..=1.0).contains(&c.parse::<f64>().unwrap())));
        }
        assert!(out.path().join(format!("{stem}.json")).is_file());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cases"], 4);
}

#[test]
fn infer_and_bvp_dump() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("epoch_002.ckpt");
    let vol = f.data.join("case_000.vol");
    let out = dir.path().join("pred.msk");
    ok(&["infer", "--seed", "21", "--checkpoint", s(&ckpt), "--volume", s(&vol), "--out", s(&out)]);
    let mask = read_mask(&out).unwrap();
    assert_eq!(mask.dims(), [32, 32, 32]);
    assert!(mask.is_binary());

    let dump = ok(&["bvp-dump", "--mask", s(&f.data.join("case_000.msk"))]);
    check_bvp_lines(&dump);

    let file = dir.path().join("bvp.txt");
    ok(&[
        "bvp-dump", "--volume", s(&vol), "--checkpoint", s(&ckpt), "--seed", "21", "--out", s(&file),
    ]);
    check_bvp_lines(&std::fs::read_to_string(&file).unwrap());
}

/// `layer x y z` lines, layers ascending and points row-major within a layer.
fn check_bvp_lines(text: &str) {
    assert!(!text.is_empty());
    let mut last = None;
    for line in text.lines() {
        let v: Vec<usize> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 4, "{line}");
        let bound = 32 >> v[0];
        assert!(v[0] < 4 && v[1..].iter().all(|&c| c < bound), "{line}");
        let key = (v[0], [v[1], v[2], v[3]]);
        assert!(last.is_none_or(|l| l < key), "{line}");
        last = Some(key);
    }
}

#[test]
fn config_mismatch_needs_force() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.run.join("epoch_002.ckpt");
    let vol = f.data.join("case_000.vol");
    let out = dir.path().join("pred.msk");
    let line = err_line(&["infer", "--seed", "22", "--checkpoint", s(&ckpt), "--volume", s(&vol), "--out", s(&out)]);
    assert!(line.contains("hash"), "{line}");
    ok(&["infer", "--seed", "22", "--checkpoint", s(&ckpt), "--volume", s(&vol), "--out", s(&out), "--force"]);
}

#[test]
fn errors_are_single_prefixed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let line = err_line(&["train", "--seed", "1", "--dataset", s(&missing), "--run-dir", s(&dir.path().join("r"))]);
    assert!(line.contains("nowhere"), "{line}");
    err_line(&["train", "--dataset", s(&missing)]);
    err_line(&["no-such-command"]);
    err_line(&["bvp-dump", "--mask", s(&missing)]);

    let empty = dir.path().join("empty");
    ok(&["phantom-gen", "--seed", "1", "--n", "0", "--out", s(&empty)]);
    err_line(&["train", "--seed", "1", "--dataset", s(&empty), "--run-dir", s(&dir.path().join("r"))]);
}

#[test]
fn gradcheck_command_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("all ") && out.contains("cases passed"), "{out}");
}
