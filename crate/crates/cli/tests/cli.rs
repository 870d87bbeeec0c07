use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn skewlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skewlab")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("skewlab-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "fixture = \"coupled\"\n\
[partition]\ngate_samples = 500\n\
[properties]\ncs_samples = 500\njacobian_plaques = 4\nexponent_orbits = 64\n\
[correlations]\nn_max = 6\nn_samples = 20000\n";

#[test]
fn list_fixtures_names_all_three() {
    let out = skewlab(&["list-fixtures"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["product", "coupled", "isometric-control"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{text}");
    }
}

#[test]
fn same_seed_same_bytes_across_thread_counts() {
    let d = scratch("det");
    let cfg = write_config(&d, SMALL);
    for exp in ["properties", "correlations"] {
        let mut dirs = vec![];
        for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
            let o = d.join(format!("{exp}-{tag}"));
            let out = skewlab(&[exp, "--config", &cfg, "--seed", "9", "--threads", threads, "--output-dir", o.to_str().unwrap()]);
            assert!(out.status.code() != Some(2), "{}", String::from_utf8_lossy(&out.stderr));
            dirs.push(o);
        }
        let mut names: Vec<_> = std::fs::read_dir(&dirs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() >= 3);
        for n in &names {
            let a = std::fs::read(dirs[0].join(n)).unwrap();
            for other in &dirs[1..] {
                assert_eq!(a, std::fs::read(other.join(n)).unwrap(), "{exp}/{n:?}");
            }
        }
    }
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn bad_kappa_is_rejected_before_running() {
    let d = scratch("kappa");
    let cfg = write_config(&d, "[system]\nkappa = 1.5\n");
    let out = skewlab(&["verify-partition", "--config", &cfg, "--output-dir", d.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fiber not diffeo"));
    assert!(!d.join("o").exists());
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn unknown_key_reports_its_line() {
    let d = scratch("key");
    let cfg = write_config(&d, "seed = 2\n\n[coupling]\nn_pairs = 10\nhorizn = 5\n");
    let out = skewlab(&["coupling", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("horizn") && err.contains("line 5"), "{err}");
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn unknown_fixture_is_an_error() {
    let out = skewlab(&["properties", "--fixture", "banana"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("banana"));
}
