use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
pipeline = "cva0"
seed = 9

[market]
type = "black_scholes"
r = 0.0
vol = 0.3

[[positions]]
weight = 1.0
instrument = { type = "option", side = "call", strike = 110.0, maturity = 1.0 }

[gp]
kernel = { type = "se", lengthscale = 0.2 }
lo = 20.0
hi = 300.0
points = 30

[simulation]
paths = 200
steps = 10
"#;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("gpxva-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gpxva"))
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn cva0_end_to_end() {
    let d = scratch("e2e");
    let o = run(&d, SMALL, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = d.join("out");
    for f in [
        "cva_gp.csv",
        "cva_reval.csv",
        "epe_gp.csv",
        "epe_reval.csv",
        "comparison.csv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("cva_reval.csv")).unwrap();
    let cva: f64 = metrics
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(cva > 0.0 && cva.is_finite());
    let epe = std::fs::read_to_string(out.join("epe_gp.csv")).unwrap();
    assert_eq!(epe.lines().next().unwrap(), "date,epe,band_lo,band_hi");
    assert_eq!(epe.lines().count(), 12);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["pipeline"], "cva0");
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 5);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = scratch("det-a");
    let b = scratch("det-b");
    assert!(run(&a, SMALL, &["--threads", "1", "--dump-paths"]).status.success());
    assert!(run(&b, SMALL, &["--threads", "3", "--dump-paths"]).status.success());
    let (fa, fb) = (read_dir(&a.join("out")), read_dir(&b.join("out")));
    assert!(fa.iter().any(|(n, _)| n == "paths.csv"));
    assert_eq!(fa, fb);
}

#[test]
fn parse_errors_exit_2() {
    let d = scratch("parse");
    let o = run(&d, "pipeline = \"cva0\"\nseed = [", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&d, &SMALL.replace("seed = 9", "seed = 9\ncolour = 1"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_gpxva"))
        .args(["run", "/nonexistent/gpxva.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_errors_exit_3_naming_the_field() {
    let d = scratch("invalid");
    let o = run(&d, &SMALL.replace("paths = 200", "paths = -200"), &[]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("simulation.paths"), "{msg}");
    assert_eq!(msg.trim().lines().count(), 1);

    let o = run(&d, &SMALL.replace("vol = 0.3", "vol = -0.3"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!d.join("out").exists());
}

#[test]
fn numeric_failures_exit_4() {
    // exposures near f64::MAX overflow the CVA average
    let d = scratch("numeric");
    let cfg = SMALL
        .replace("steps = 10", "steps = 10\nspot = 1e300")
        .replace("vol = 0.3", "vol = 3.0");
    let o = run(&d, &cfg, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("CVA"), "{}", stderr(&o));
}
