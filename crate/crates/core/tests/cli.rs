use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_selfmine");

fn selfmine(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SELFMINE_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Compares `produced` with the checked-in file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(produced: &Path, name: &str) {
    let golden = golden_dir().join(name);
    let bytes = std::fs::read(produced).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &bytes).unwrap();
    }
    let expected = std::fs::read(&golden).unwrap_or_else(|_| panic!("missing golden file {name}"));
    assert!(bytes == expected, "{name} differs from the golden copy");
}

#[test]
fn simulate_preset_writes_miner_csv_with_fixed_header() {
    let out = selfmine(&["simulate", "--config", "baseline_attack", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(
        text.lines().next().unwrap(),
        "miner_id,blocks,revenue_share,revenue,hash_share,strategy,policy,orphaned_blocks,attempts,successes,rejections,aborts"
    );
    assert_eq!(text.lines().count(), 3);
    let summary = String::from_utf8_lossy(&out.stderr);
    assert!(summary.contains("selfish="), "{summary}");
    assert!(summary.contains("rejections="), "{summary}");
}

#[test]
fn repeated_simulate_is_byte_identical_and_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_dir().join("scenario.toml");
    let config = config.to_str().unwrap();
    for run in ["a", "b"] {
        let csv = dir.path().join(format!("{run}.csv"));
        let json = dir.path().join(format!("{run}.json"));
        for (path, format) in [(&csv, "csv"), (&json, "json")] {
            let out = selfmine(&[
                "simulate", "--config", config, "--seed", "42", "--format", format, "--output", path.to_str().unwrap(),
            ]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    for name in ["a.csv", "a.forks.csv", "a.json"] {
        let other = name.replacen('a', "b", 1);
        let a = std::fs::read(dir.path().join(name)).unwrap();
        let b = std::fs::read(dir.path().join(&other)).unwrap();
        assert!(a == b, "{name} and {other} differ");
    }
    check_golden(&dir.path().join("a.csv"), "seed42.csv");
    check_golden(&dir.path().join("a.forks.csv"), "seed42.forks.csv");
    check_golden(&dir.path().join("a.json"), "seed42.json");
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["simulate", "--config", "override_script"])
        .env("SELFMINE_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("override_script-7.csv").exists());
    assert!(dir.path().join("override_script-7.forks.csv").exists());
}

#[test]
fn bad_hash_shares_exit_with_code_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(golden_dir().join("scenario.toml"))
        .unwrap()
        .replace("hash_share = 0.25", "hash_share = 0.35");
    std::fs::write(&path, text).unwrap();
    for cmd in ["simulate", "validate-config"] {
        let out = selfmine(&[cmd, "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("miners.hash_share"), "{err}");
        assert!(err.contains("1.1"), "{err}");
    }
}

#[test]
fn unparsable_and_missing_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "seed = [").unwrap();
    assert_eq!(selfmine(&["simulate", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(selfmine(&["simulate", "--config", "no_such_preset"]).status.code(), Some(2));
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let toml_text = std::fs::read_to_string(golden_dir().join("scenario.toml")).unwrap();
    let value: toml::Value = toml::from_str(&toml_text).unwrap();
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    let out = selfmine(&["validate-config", "--config", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn economics_fixture_reproduces_bitcoin_row() {
    let out = selfmine(&["economics", "--fixture", "table1-bitcoin"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        rows.headers().unwrap().iter().collect::<Vec<_>>(),
        ["coin", "z", "alpha", "probability", "cost", "profit"]
    );
    let row = rows.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "bitcoin");
    assert_eq!(row[4].parse::<f64>().unwrap(), 81000.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 69000.0);
}

#[test]
fn economics_inline_parameters() {
    let out = selfmine(&["economics", "--r", "10", "--b", "60", "--c", "0", "--z", "3"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let row = csv::Reader::from_reader(text.as_bytes()).records().next().unwrap().unwrap();
    assert_eq!(row[5].parse::<f64>().unwrap(), 30.0);
}

#[test]
fn economics_break_even_curve_is_ten_zero_rows() {
    // reward 10 per block, rent 60/h over 10-minute blocks costs exactly 10
    let out = selfmine(&["economics", "--r", "10", "--b", "10", "--c", "60", "--curve", "10"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<_> = csv::Reader::from_reader(text.as_bytes()).records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[1].parse::<u32>().unwrap(), i as u32 + 1);
        assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn economics_rejects_negative_parameters() {
    let out = selfmine(&["economics", "--r", "10", "--b", "10", "--c=-5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probability_prints_closed_form() {
    let out = selfmine(&["probability", "--alpha", "0.3", "--z", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let p: f64 = text.trim().rsplit('=').next().unwrap().parse().unwrap();
    assert!((p - (0.3f64 / 0.7).powi(2)).abs() < 1e-12);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let config = golden_dir().join("scenario.toml");
    let out = selfmine(&[
        "sweep", "--config", config.to_str().unwrap(), "--axis", "alpha", "--values", "0.1,0.2,0.3", "--output",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(&reader.headers().unwrap()[0], "axis");
    let values: Vec<f64> = reader.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(values, [0.1, 0.2, 0.3]);

    let bad = selfmine(&["sweep", "--config", config.to_str().unwrap(), "--axis", "colour", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}
