use std::path::{Path, PathBuf};
use std::process::Command;

use elorax_core::store::{load_adapter_bundle, save_adapter_bundle, AdapterBundle, SiteMatrix};
use elorax_core::{Role, SiteId};

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_elorax"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).env("ELORAX_THREADS", "2").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two adapters whose A factors stack to `[[1,0],[0,0],[0,0],[0,1]]`.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let make = |id: &str, a: Vec<f32>, b: Vec<f32>| {
        AdapterBundle::new(id, "base", 2)
            .with_site(SiteId::new("layer0.q", Role::A), SiteMatrix::new(2, 2, a).unwrap())
            .with_site(SiteId::new("layer0.q", Role::B), SiteMatrix::new(3, 2, b).unwrap())
    };
    let a1 = root.join("a1");
    let a2 = root.join("a2");
    save_adapter_bundle(&make("a1", vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.5, 0.0, 2.0, -1.0, 0.0]), &a1).unwrap();
    save_adapter_bundle(&make("a2", vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 3.0, 0.0, 0.5, -2.0]), &a2).unwrap();
    (a1, a2)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn extract_reports_documented_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let (a1, a2) = fixture(tmp.path());
    let sub = tmp.path().join("sub");
    let (code, _, err) = run(&["--quiet", "extract", "--adapters", p(&a1), p(&a2), "--k", "1", "--out", p(&sub)]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(sub.join("explained_variance.csv")).unwrap();
    let row = csv
        .lines()
        .find(|l| l.starts_with("layer0.q,A,1,"))
        .unwrap_or_else(|| panic!("no A row in\n{csv}"));
    assert!(row.contains(",0.6667,true"), "{row}");
    let set = elorax_core::SubspaceSet::load(&sub).unwrap();
    assert!(set.sites.values().all(|s| s.k_data == 1));
}

#[test]
fn extract_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a1, a2) = fixture(tmp.path());
    let outs: Vec<_> = (0..2)
        .map(|i| {
            let out = tmp.path().join(format!("s{i}"));
            let (code, _, err) = run(&["--seed", "9", "--quiet", "extract", "--adapters", p(&a1), p(&a2), "--k", "1", "--pseudo", "1", "--out", p(&out)]);
            assert_eq!(code, 0, "{err}");
            read_dir_bytes(&out)
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn extract_without_adapters_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["extract", "--k", "1", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code, 2);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn unknown_flags_are_rejected() {
    let (code, _, _) = run(&["account", "--config", p(&config("glue.json")), "--bogus"]);
    assert_eq!(code, 2);
}

#[test]
fn project_reconstruct_project_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a1, a2) = fixture(tmp.path());
    let sub = tmp.path().join("sub");
    assert_eq!(run(&["--quiet", "extract", "--adapters", p(&a1), p(&a2), "--k", "2", "--out", p(&sub)]).0, 0);
    let c1 = tmp.path().join("c1");
    let rec = tmp.path().join("rec");
    let c2 = tmp.path().join("c2");
    let report = tmp.path().join("residuals.csv");
    let (code, _, err) = run(&["project", "--subspace", p(&sub), "--adapter", p(&a1), "--out", p(&c1), "--report", p(&report)]);
    assert_eq!(code, 0, "{err}");
    assert!(std::fs::read_to_string(&report).unwrap().starts_with("site_name,role,adapter_id,fro_residual,rel_residual\n"));
    assert_eq!(run(&["reconstruct", "--subspace", p(&sub), "--coeffs", p(&c1), "--out", p(&rec)]).0, 0);
    assert_eq!(run(&["project", "--subspace", p(&sub), "--adapter", p(&rec), "--out", p(&c2)]).0, 0);
    let first = elorax_core::CoefficientSet::load(&c1).unwrap();
    let second = elorax_core::CoefficientSet::load(&c2).unwrap();
    assert_eq!(first.subspace_ref, second.subspace_ref);
    for (id, c) in &first.sites {
        let d = &second.sites[id];
        let gap = (&c.alpha - &d.alpha).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gap <= 1e-5, "{id:?}: {gap}");
    }
    // K=2 spans the whole A space, so that site comes back unchanged
    let orig = load_adapter_bundle(&a1).unwrap();
    let back = load_adapter_bundle(&rec).unwrap();
    for (id, m) in orig.sites.iter().filter(|(id, _)| id.role == Role::A) {
        let diff = (&m.to_array::<f64>() - &back.sites[id].to_array::<f64>()).iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        assert!(diff <= 1e-5, "{id:?}: {diff}");
    }
}

#[test]
fn reconstruct_rejects_stale_coefficients() {
    let tmp = tempfile::tempdir().unwrap();
    let (a1, a2) = fixture(tmp.path());
    let sub1 = tmp.path().join("sub1");
    let sub2 = tmp.path().join("sub2");
    assert_eq!(run(&["--quiet", "extract", "--adapters", p(&a1), p(&a2), "--k", "1", "--out", p(&sub1)]).0, 0);
    assert_eq!(run(&["--quiet", "extract", "--adapters", p(&a1), p(&a2), "--k", "2", "--out", p(&sub2)]).0, 0);
    let c = tmp.path().join("c");
    assert_eq!(run(&["project", "--subspace", p(&sub1), "--adapter", p(&a1), "--out", p(&c)]).0, 0);
    let (code, _, err) = run(&["reconstruct", "--subspace", p(&sub2), "--coeffs", p(&c), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code, 2);
    assert!(err.contains("mismatch"), "{err}");
}

#[test]
fn account_prints_glue_counts() {
    let (code, out, err) = run(&["account", "--config", p(&config("glue.json"))]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("1,179,648"), "{out}");
    assert!(out.contains("12,288"), "{out}");
    let params = out.lines().find(|l| l.starts_with("trainable_params")).unwrap();
    assert!(params.trim_end().ends_with("96"), "{params}");
}

#[test]
fn simulate_loo_small_is_exact_and_quiet_keeps_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let (code, stdout, err) = run(&["--quiet", "simulate", "--config", p(&config("loo_small.json")), "--protocol", "loo", "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(err.is_empty(), "quiet run wrote progress: {err}");
    let json_path = out.join("metrics.json");
    assert_eq!(stdout.trim(), json_path.display().to_string());
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let rows = metrics["rows"].as_array().unwrap();
    let zs: Vec<f64> = rows
        .iter()
        .filter(|r| r["method"] == "zero_shot")
        .map(|r| r["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(zs.len(), 5);
    assert!(zs.iter().all(|&l| l <= 1e-8), "{zs:?}");
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("protocol,task_id,method,K,params,loss,residual,angle,seed\n"));
}

#[test]
fn simulate_without_quiet_reports_progress() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let (code, stdout, err) = run(&["simulate", "--config", p(&config("loo_small.json")), "--protocol", "trends", "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(!err.is_empty());
    assert!(stdout.contains("metrics.json"));
    assert!(out.join("trends.csv").exists());
}

#[test]
fn simulate_rejects_out_of_range_offspan() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"domain": {"m": 4, "n": 6, "d": 5, "k_true": 2, "r": 2, "s_t": 8, "offspan_fraction": 2.0}}"#).unwrap();
    let (code, _, err) = run(&["simulate", "--config", p(&bad), "--protocol", "loo", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("offspan"), "{err}");
}
