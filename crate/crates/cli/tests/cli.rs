use std::path::Path;
use std::process::{Command, Output};

fn rheoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rheoflow")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for text in ["experiment = \"carreau-steady\"\n[mesh]\nlevels = [0]\n", "not toml ["] {
        let cfg = write(dir.path(), "bad.toml", text);
        assert_eq!(rheoflow(&["run", &cfg, "--out", out]).status.code(), Some(2), "{text}");
    }
    assert_eq!(rheoflow(&["run", "/nonexistent.toml"]).status.code(), Some(2));
    let cfg = write(dir.path(), "ok.toml", "experiment = \"graph-check\"\n");
    assert_eq!(rheoflow(&["run", &cfg, "--out", out, "--threads", "0"]).status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "experiment = \"carreau-steady\"\n[mesh]\nlevels = [2]\n[newton]\nmax_iterations = 1\nwarm_start = false\nabs_tol = 1e-30\nrel_tol = 1e-30\n",
    );
    let out = rheoflow(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn steady_run_writes_tables_mesh_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "experiment = \"carreau-steady\"\n[mesh]\nlevels = [1, 2]\n");
    let o = dir.path().join("o");
    let out = rheoflow(&["run", &cfg, "--out", o.to_str().unwrap(), "--dump-mesh"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = std::fs::read_dir(&o)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for required in ["config.toml", "report.txt"] {
        assert!(names.iter().any(|n| n == required), "{names:?}");
    }
    assert!(names.iter().any(|n| n.ends_with(".csv")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with(".vtk")), "{names:?}");
    assert!(names.iter().any(|n| n.contains("mesh")), "{names:?}");
    let report = std::fs::read_to_string(o.join("report.txt")).unwrap();
    assert!(report.contains("[config]"));
}

#[test]
fn graph_check_and_self_check_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", "experiment = \"graph-check\"\n[graph]\nsamples = 500\n");
    let out = rheoflow(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = rheoflow(&["check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("checks passed"));
}
