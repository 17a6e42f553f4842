use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[synthetic]\nseasons = 3\nsamples_per_class = 20\n\
[data]\ntransfer_size = 200\n\
[pretrain]\nepochs = 2\n[distill]\nepochs = 2\n";

fn rkd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rkd"))
        .args(args)
        .env("RKD_OUTPUT_DIR", out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn strategies_lists_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = rkd(&["strategies"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 15);
    assert!(text.contains(" 3  A4([2,2],1.0)"), "{text}");
    assert!(text.contains("(baseline)"));
}

#[test]
fn validate_reports_config_errors_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), &format!("{SMALL}[rkd]\nbuiltin = 12\n"));
    let o = rkd(&["validate", &good], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok: 3 seasons"));

    let bad = write_config(dir.path(), "[rkd]\nstrategy = \"A4([2,2],1.0\"\n");
    let o = rkd(&["validate", &bad], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rkd.strategy"), "{}", stderr(&o));

    let missing = write_config(dir.path(), SMALL);
    let o = rkd(&["validate", &missing], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rkd.strategy"));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rkd(&["run", "/nonexistent/exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn run_writes_results_to_override_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &format!("{SMALL}[rkd]\nbuiltin = 3\n[run]\nseeds = [1, 2]\noutput_dir = \"ignored\"\n"),
    );
    let out = dir.path().join("out");
    let o = rkd(&["run", &config], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in [
        "seed_1.csv",
        "seed_2.csv",
        "summary.csv",
        "long.csv",
        "manifest.json",
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert!(!dir.path().join("ignored").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("season,rule,X,mean,stddev,count\n"));
    // 2 evaluated seasons x 2 rules x 3 X values.
    assert_eq!(summary.lines().count(), 1 + 12);
    let seed = fs::read_to_string(out.join("seed_1.csv")).unwrap();
    assert!(seed.starts_with("season,rule,X,accuracy,count\n"));
}

#[test]
fn generated_data_runs_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let synth = write_config(dir.path(), &format!("{SMALL}[rkd]\nbuiltin = 7\n"));
    let data = dir.path().join("data");
    let o = rkd(&["gen-data", &synth, "--seed", "3"], &data);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in [
        "season_1.csv",
        "season_2.csv",
        "season_3.csv",
        "transfer.csv",
    ] {
        assert!(data.join(name).is_file(), "{name}");
    }
    let csv = write_config(
        dir.path(),
        "[data]\nsource = \"csv\"\n\
         [csv]\nseasons = [\"data/season_1.csv\", \"data/season_2.csv\", \"data/season_3.csv\"]\n\
         transfer = \"data/transfer.csv\"\nfeature_dim = 16\nheader = true\n\
         [pretrain]\nepochs = 2\n[distill]\nepochs = 2\n[rkd]\nbuiltin = 7\n",
    );
    let out = dir.path().join("out");
    let o = rkd(&["run", &csv], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("seed_0.csv").is_file());
}

#[test]
fn compare_pairs_with_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{SMALL}[rkd]\nbuiltin = 3\n"));
    let out = dir.path().join("out");
    let o = rkd(&["compare", &config], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(text.starts_with("strategy,season,rule,X,mean,stddev,count\n"));
    assert!(text.contains("\"A4([0,0],1.0)\""), "{text}");
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.contains("mean top-1"))
            .count(),
        2
    );
}
