use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "gen": {"n": 1200, "d": 32, "r_true": 8, "target_a_r": 6.0, "mc_samples": 0},
  "prior": {"steps": 150, "batch": 64, "validation_size": 128},
  "align": {"steps": 40, "batch": 64, "validation_size": 128},
  "eval": {"pair_count": 2000, "permutations": 3}
}"#;

fn bin(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anisoalign"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_all(out: &Path, config: &Path) {
    for stage in ["gen", "diagnose", "transform", "train-prior", "align", "eval", "report"] {
        let o = bin(
            &[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"],
            &[],
        );
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all(&a, &config);
    run_all(&b, &config);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs between reruns");
    }
    for f in ["x.embd", "y.embd", "truth.json", "manifest.json"] {
        assert!(ta.contains_key(f), "{f}");
    }
    let report = String::from_utf8(ta["report/report.csv"].clone()).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["id", "mu", "sigma", "perm", "alpha", "c3", "realign", "anisoalign"]);
    let diag = String::from_utf8(ta["diagnose/report.json"].clone()).unwrap();
    for key in ["c_lambda", "overlap_curve", "g_mu", "g_sigma", "d_tilde", "a_r", "energy_curve", "d_eff_frac"] {
        assert!(diag.contains(&format!("\"{key}\"")), "{key}");
    }
}

#[test]
fn seed_flag_changes_output_and_rerun_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let gen = |dir: &str, seed: &str| {
        let out = tmp.path().join(dir);
        let o = bin(&["gen", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed], &[]);
        assert!(o.status.success());
        std::fs::read(out.join("x.embd")).unwrap()
    };
    let (a, b, c) = (gen("a", "1"), gen("b", "1"), gen("c", "2"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn align_without_prior_reports_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    assert!(bin(&["gen", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]).status.success());
    let o = bin(&["align", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[("ANISO_THREADS", "1")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-prior"));
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), r#"{"gen": {"n": 100, "unknown_key": 1}}"#);
    let out = tmp.path().join("run");
    let o = bin(&["gen", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["gen", "--config", tmp.path().join("nope.json").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_three_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let bad = blocker.join("sub");
    let o = bin(&["gen", "--config", config.to_str().unwrap(), "--out", bad.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains(bad.to_str().unwrap()));
    let empty = tmp.path().join("empty");
    let o = bin(&["diagnose", "--out", empty.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("x.embd"));
}

#[test]
fn user_supplied_embeddings_are_diagnosed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let src = tmp.path().join("src");
    assert!(bin(&["gen", "--config", config.to_str().unwrap(), "--out", src.to_str().unwrap()], &[]).status.success());
    let cfg = format!(
        r#"{{"data": {{"x": "{}", "y": "{}"}}, "diagnose": {{"q_grid": [2, 4, 8]}}}}"#,
        src.join("x.embd").display(),
        src.join("y.embd").display()
    );
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("diag");
    let o = bin(&["diagnose", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let overlap = std::fs::read_to_string(out.join("diagnose/overlap.csv")).unwrap();
    assert_eq!(overlap.lines().count(), 4);
}
