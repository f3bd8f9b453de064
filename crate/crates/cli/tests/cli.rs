use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
users = 12
rounds = 3
features = 4
classes = 3
train_size = 120
val_size = 30
test_size = 30
gamma_quantile = 0.95
lr = 0.5
"#;

fn cpa_fed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpa-fed"))
        .args(args)
        .env_remove("CPA_FED_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = cpa_fed(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--epsilon",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csvs = csv_files(&out);
    assert_eq!(csvs, vec!["cpa-eps1-K12-R1-seed3.csv".to_string()]);
    let text = fs::read_to_string(out.join(&csvs[0])).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "round,snr_db,mse,bound,overload_rate,val_acc,test_acc"
    );
    assert_eq!(lines.count(), 3);

    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"completed_cells\": 1"), "{summary}");
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let mut outputs = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_cpa-fed"))
            .args(["run", "--config", &cfg, "--out", out.to_str().unwrap()])
            .env("CPA_FED_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(fs::read(out.join("cpa-eps0.5-K12-R1-seed0.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_produces_one_csv_per_cell_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let plan =
        format!("repetitions = 2\n[axes]\nepsilon = [0.5, 2.0]\nusers = [5, 10]\n[base]\n{SMALL}");
    let cfg = write_config(dir.path(), "plan.toml", &plan);
    let out = dir.path().join("sweep");
    let args = ["sweep", "--config", &cfg, "--out", out.to_str().unwrap()];

    let o = cpa_fed(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csvs = csv_files(&out);
    assert_eq!(csvs.len(), 8);
    let before: Vec<Vec<u8>> = csvs
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();

    fs::remove_file(out.join(&csvs[2])).unwrap();
    let o = cpa_fed(&args);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("1 cells run, 7 reused"));
    let after: Vec<Vec<u8>> = csvs
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn sweep_flags_override_plan_axes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &format!("[base]\n{SMALL}"));
    let out = dir.path().join("o");
    let o = cpa_fed(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--sweep-rate",
        "1,2",
        "--scheme",
        "cpa-no-rr",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        csv_files(&out),
        vec![
            "cpa-no-rr-eps0.5-K12-R1-seed0.csv",
            "cpa-no-rr-eps0.5-K12-R2-seed0.csv"
        ]
    );
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let cfg = write_config(dir.path(), "bad.toml", "users = 0\n");
    assert_eq!(
        cpa_fed(&["run", "--config", &cfg, "--out", out])
            .status
            .code(),
        Some(2)
    );

    let cfg = write_config(dir.path(), "typo.toml", "userz = 5\n");
    assert_eq!(
        cpa_fed(&["run", "--config", &cfg, "--out", out])
            .status
            .code(),
        Some(2)
    );

    let o = cpa_fed(&["run", "--scheme", "qsgd", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let o = cpa_fed(&[
        "run",
        "--attack",
        "flip",
        "--attack-frac",
        "1.2",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = cpa_fed(&[
        "sweep",
        "--sweep-users",
        "1,2,3",
        "--cap",
        "2",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(out).join("summary.json").exists());
}

#[test]
fn io_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = blocker.join("out");
    let o = cpa_fed(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let missing = dir.path().join("missing.toml");
    let o = cpa_fed(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn replicate_reports_and_rejects_unknown_suites() {
    let o = cpa_fed(&["replicate", "k-anonymity"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("k-anonymity"));
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));

    let o = cpa_fed(&["replicate", "table9"]);
    assert_eq!(o.status.code(), Some(2));

    let o = cpa_fed(&["suites"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 10);
}
