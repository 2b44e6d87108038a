use std::path::Path;
use std::process::{Command, Output};

fn tdbem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdbem")).args(args).output().expect("run tdbem")
}

fn triangles_in(path: &Path) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    let counts = text.lines().nth(1).unwrap();
    counts.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn mesh_examples() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], usize); 3] = [
        (&["--shape", "screen", "--half-width", "2", "--n", "40", "--contact", "1"], 3200),
        (&["--shape", "icosphere", "--level", "2"], 320),
        (&["--shape", "cube", "--n", "2", "--contact", "top,front,right"], 48),
    ];
    for (k, (args, expected)) in cases.iter().enumerate() {
        let out = dir.path().join(format!("m{k}.txt"));
        let mut full = vec!["mesh"];
        full.extend_from_slice(args);
        full.extend_from_slice(&["--out", out.to_str().unwrap()]);
        let o = tdbem(&full);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(triangles_in(&out), *expected);
    }
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(tdbem(&["mesh", "--shape", "torus"]).status.code(), Some(2));
    assert_eq!(tdbem(&["solve", "--shape", "icosphere", "--cfl", "0.6"]).status.code(), Some(2));
    let o = tdbem(&["solve", "--experiment", "punch", "--shape", "screen", "--dt", "0.5", "--cfl", "0.5", "--horizon", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = tdbem(&[
            "solve", "--experiment", "contact", "--shape", "screen", "--half-width", "1", "--n", "4", "--contact", "0.5",
            "--dt", "0.5", "--horizon", "2", "--auto-rho", "--deterministic", "--output-dir", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["history.csv", "norms.csv", "iterations.csv", "multiplier.csv", "summary.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert_eq!(x, y, "{f}");
        assert!(!x.starts_with(b"#"));
    }
}

#[test]
fn non_convergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = tdbem(&[
        "solve", "--experiment", "punch", "--shape", "screen", "--n", "10", "--contact", "1.2", "--dt", "0.6",
        "--horizon", "3", "--rho", "0.2", "--max-iter", "2", "--output-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_level_study_has_empty_rate_and_config_file_works() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sphere.json");
    std::fs::write(
        &cfg,
        r#"{"experiment": "dtn-equality", "geometry": {"shape": "icosphere", "level": 0}, "cfl": 0.6, "horizon": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("study");
    let o = tdbem(&[
        "study", "--config", cfg.to_str().unwrap(), "--levels", "0", "--deterministic", "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("study.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("level,n_triangles,dof,dt,cfl,error,alpha_vs_prev"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("0,20,") && row.ends_with(','), "{row}");
}

#[test]
fn cache_is_filled_listed_and_cleared() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    let args = [
        "solve", "--experiment", "dtn-equality", "--shape", "icosphere", "--level", "0", "--cfl", "0.6", "--horizon",
        "2", "--deterministic", "--cache-dir", cache.to_str().unwrap(), "--output-dir", out.to_str().unwrap(),
    ];
    assert!(tdbem(&args).status.success());
    let first = std::fs::read(out.join("history.csv")).unwrap();
    assert!(tdbem(&args).status.success());
    assert_eq!(std::fs::read(out.join("history.csv")).unwrap(), first);
    let list = tdbem(&["cache", "list", "--dir", cache.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&list.stdout).contains("1 entries"));
    let clear = tdbem(&["cache", "clear", "--dir", cache.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&clear.stdout).contains("removed 1"));
}
