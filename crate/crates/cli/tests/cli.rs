use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n_fast = 32
m_ramps = 32
n_train = 6
n_val = 3
n_test = 4
bursts_min = 4
bursts_max = 8
arch = "L3-C4-B"
seeds = [0]
epochs = 2
patch = 16
qat_epochs = 1
dist_epochs = 1
cfar_guard = 1
cfar_train = 4
cfar_calibration_maps = 10
uncertainty_draws = 3
uncertainty_samples = 2
"#;

fn qradar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qradar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qradar(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn report_memory_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["report-memory", "--arch", "L3-C16-B", "--bits", "32,8"]);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0][..6], ["L3-C16-B", "32", "1584", "6.19", "864.00", "870.19"]);
    assert_eq!(rows[1][1], "8");
    let a = ok(dir.path(), &["report-memory", "--arch", "L3-C8-A"]);
    assert_eq!(a.lines().nth(1).unwrap().split_whitespace().nth(2), Some("864"));
    let l7 = ok(dir.path(), &["report-memory", "--arch", "L7-C32-A"]);
    assert!(l7.contains("L7-C32-A"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qradar(dir.path(), &["report-memory", "--arch", "L3-Q"]).status.code(), Some(2));
    assert_eq!(qradar(dir.path(), &["report-memory", "--bits", "0"]).status.code(), Some(2));
    assert_eq!(qradar(dir.path(), &["--config", "missing.toml", "gen-data"]).status.code(), Some(4));
    fs::write(dir.path().join("bad.toml"), "n_fast = \"x\"\n").unwrap();
    assert_eq!(qradar(dir.path(), &["--config", "bad.toml", "gen-data"]).status.code(), Some(4));
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let train = qradar(dir.path(), &["--config", "tiny.toml", "train"]);
    assert_eq!(train.status.code(), Some(2), "training without data");
    fs::write(dir.path().join("diverge.toml"), format!("{TINY}lr = 1e300\n")).unwrap();
    ok(dir.path(), &["--config", "diverge.toml", "gen-data"]);
    assert_eq!(qradar(dir.path(), &["--config", "diverge.toml", "train"]).status.code(), Some(3));
}

fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                files.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let c = ["--config", "tiny.toml", "--out", "res"];
    let run = |rest: &[&str]| ok(dir, &[&c[..], rest].concat());
    assert!(run(&["gen-data"]).contains("6 train / 3 val / 4 test"));
    run(&["baseline", "--method", "zeroing", "--det-acc", "0.9"]);
    run(&["baseline", "--method", "imat", "--imat-iters", "3", "--imat-decay", "0.7"]);
    run(&["evaluate", "--method", "rfmin"]);
    run(&["evaluate", "--reference", "clean"]);
    run(&["train", "--mode", "real"]);
    run(&["train", "--mode", "qat", "--quant", "int", "--bits", "4", "--target", "w"]);
    run(&["train", "--mode", "qat", "--quant", "binary", "--target", "w"]);
    run(&["train", "--dist-ternary", "--lambda", "1e-8"]);
    assert!(run(&["evaluate", "--mode", "real"]).contains("real: mean F1"));
    run(&["evaluate", "--mode", "qat", "--quant", "binary", "--target", "w"]);
    run(&["evaluate", "--checkpoint", "res/runs/qat_w4/seed0/model.qrck"]);
    run(&["evaluate", "--dist-ternary", "--lambda", "1e-8", "--extract", "s2"]);
    run(&["uncertainty", "--lambda", "1e-8", "--uncertainty-out", "res/u/grid.qrck"]);
    assert!(dir.join("res/u/grid.qrck").exists());
    csv_files(&dir.join("res"))
}

#[test]
fn commands_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    for expected in [
        "baseline/zeroing/f1_per_sample.csv",
        "baseline/imat/f1_per_sample.csv",
        "baseline/rfmin/f1_per_sample.csv",
        "eval/clean/f1_per_sample.csv",
        "eval/qat_w1/seed0/memory.csv",
        "eval/qat_w4/seed0/mops.csv",
        "eval/dist_1e-8/seed0/f1_per_sample.csv",
        "runs/real/seed0/log.csv",
        "u/grid.csv",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    let mem = &fa.iter().find(|f| f.0 == "eval/qat_w1/seed0/memory.csv").unwrap().1;
    let text = String::from_utf8_lossy(mem);
    assert!(text.lines().nth(1).unwrap().starts_with("l0,72,1,"), "{text}");
    let log = &fa.iter().find(|f| f.0 == "runs/real/seed0/log.csv").unwrap().1;
    assert_eq!(String::from_utf8_lossy(log).lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("res/eval/real/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 1);
    assert_eq!(fa, pipeline(b.path()));
}
