use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "dgp.n_units = 80
encoder.epochs = 2
eval.phenotypes = 3
eval.baselines = false
estimator.k = 20
";

fn run(dir: &Path, args: &[&str]) -> Output {
    fs::write(dir.join("small.cfg"), SMALL).unwrap();
    Command::new(env!("CARGO_BIN_EXE_latent-match"))
        .arg("--config")
        .arg(dir.join("small.cfg"))
        .arg("--outdir")
        .arg(dir.join("runs"))
        .args(args)
        .output()
        .unwrap()
}

fn files(dir: &Path, prefix: &str) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix))
        .collect();
    names.sort();
    names
}

#[test]
fn generate_is_reproducible_and_validates_config() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(tmp.path(), &["--run-id", "a", "generate"]);
    let b = run(tmp.path(), &["--run-id", "b", "generate"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    let manifest = |id: &str| fs::read_to_string(tmp.path().join("runs").join(id).join("manifest.json")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));

    let bad = run(tmp.path(), &["--set", "split.train=0.9", "generate"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("split"));
    let unknown = run(tmp.path(), &["--set", "dgp.nonsense=1", "generate"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn ablating_everything_gives_one_zero_difference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--run-id", "ab", "--set", "history.lookback_days=30", "ablate", "--sets", "ALL"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("runs/ab");
    let diffs = files(&dir, "difference_");
    assert_eq!(diffs, vec!["difference_ALL_30d.csv".to_string()]);
    let text = fs::read_to_string(dir.join(&diffs[0])).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        let last: f64 = record[record.len() - 1].parse().unwrap();
        assert_eq!(last, 0.0);
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn ablation_grid_writes_one_curve_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["--run-id", "grid", "ablate", "--sets", "ALL,HEART,BREATHING,ACTIVITY,RECORDS", "--lookbacks", "30,180"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("runs/grid");
    assert_eq!(files(&dir, "curve_").iter().filter(|n| n.ends_with(".csv")).count(), 10);
    assert_eq!(files(&dir, "difference_").len(), 10);
}

#[test]
fn ablate_rejects_bad_windows_and_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let long = run(tmp.path(), &["--run-id", "x", "ablate", "--lookbacks", "100000"]);
    assert_eq!(long.status.code(), Some(2));
    let unknown = run(tmp.path(), &["--run-id", "y", "ablate", "--sets", "LIVER"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("LIVER"));
}

#[test]
fn pipeline_then_check_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--run-id", "p", "pipeline"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let check = run(tmp.path(), &["--run-id", "p", "check"]);
    assert_eq!(check.status.code(), Some(0), "{}", String::from_utf8_lossy(&check.stdout));
    assert!(!String::from_utf8_lossy(&check.stdout).contains("FAIL"));

    fs::write(tmp.path().join("runs/p/stray.txt"), "x").unwrap();
    let tampered = run(tmp.path(), &["--run-id", "p", "check"]);
    assert_eq!(tampered.status.code(), Some(1));
}

#[test]
fn bench_lsh_writes_a_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["--run-id", "b", "bench-lsh", "--points", "500", "--queries", "10", "--sweep-tables", "2,4", "--width-scales", "1"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("runs/b/bench_lsh.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}
