use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hkam::cli::{to_json, validate, SplitFile};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli");
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn hkam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hkam")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The Arnold configuration with edits applied to its JSON text; file
/// references are made absolute so the copy can live anywhere.
fn variant(name: &str, edit: impl Fn(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(data("arnold.json")).unwrap()).unwrap();
    v["potential"] = data("pendulum.json").to_string_lossy().into();
    v["perturbation"] = data("rotator_coupling.json").to_string_lossy().into();
    edit(&mut v);
    let path = scratch(name);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn arnold_config_validates() {
    let o = hkam(&["validate", "--config", data("arnold.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
}

#[test]
fn empty_config_lists_every_missing_field() {
    let errs = validate("{}", Path::new(".")).unwrap_err();
    for f in ["n", "k0", "p0", "omega0", "tau", "k_check", "hessian", "potential", "perturbation", "eps_list", "mu", "cutoffs", "tolerances", "seeds"] {
        assert!(errs.contains(&format!("missing field `{f}`")), "{f} not reported in {errs:?}");
    }
    let path = scratch("empty.json");
    fs::write(&path, "{}").unwrap();
    let o = hkam(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing field `eps_list`"));
}

#[test]
fn unsorted_eps_list_is_named() {
    let path = variant("unsorted.json", |v| v["eps_list"] = serde_json::json!([2e-3, 1e-3]));
    let o = hkam(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eps_list: must be sorted ascending"), "{}", stderr(&o));
}

#[test]
fn unknown_fields_are_rejected() {
    let path = variant("unknown.json", |v| v["tolerance"] = 1.0.into());
    let o = hkam(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field `tolerance`"));
    let nested = variant("nested.json", |v| v["tolerances"]["slack"] = 1.0.into());
    let o = hkam(&["validate", "--config", nested.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("slack"));
}

#[test]
fn invalid_values_are_reported_together() {
    let path = variant("values.json", |v| {
        v["n"] = 3.into();
        v["tolerances"]["residual"] = (-1.0).into();
        v["seeds"] = 0.into();
    });
    let errs = validate(&fs::read_to_string(&path).unwrap(), Path::new(".")).unwrap_err();
    assert!(errs.iter().any(|e| e.starts_with("n:")));
    assert!(errs.iter().any(|e| e.starts_with("tolerances.residual:")));
    assert!(errs.iter().any(|e| e.starts_with("seeds:")));
}

#[test]
fn resonant_frequency_exits_with_schema_status() {
    let path = variant("resonant.json", |v| v["omega0"] = serde_json::json!([0.0, 0.0]));
    let o = hkam(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("higher-multiplicity resonance"), "{}", stderr(&o));
}

#[test]
fn missing_file_reference_names_the_field() {
    let path = variant("missing.json", |v| v["potential"] = "no_such_file.json".into());
    let o = hkam(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("potential:"));
}

#[test]
fn pipeline_failure_names_the_stage() {
    // A potential with a minimum at the origin and a maximum elsewhere is
    // fine; a constant potential has no hyperbolic point at all.
    let path = variant("flat.json", |v| {
        v["potential"] = serde_json::json!({"dims": 2, "cutoffs": [1, 1], "entries": [[0, 0, 1.0, 0.0]]});
    });
    let out = scratch("flat_report.json");
    let o = hkam(&["split", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("normalform:"), "{}", stderr(&o));
}

#[test]
fn zero_perturbation_gives_zero_potential() {
    let path = variant("zero.json", |v| {
        v["mu"] = 0.0.into();
        v["cutoffs"] = serde_json::json!([32, 4]);
        v["numerics"] = serde_json::json!({"s_nodes": 24});
    });
    let out = scratch("zero_report.json");
    let o = hkam(&["split", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: SplitFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(rep.report.branches.iter().all(|b| b.norm < 1e-20));
    assert!(rep.checks.iter().all(|c| c.pass));
}

#[test]
fn split_report_is_deterministic_and_round_trips() {
    let cfg = data("arnold.json");
    let a = scratch("split_a.json");
    let b = scratch("split_b.json");
    let oa = hkam(&["split", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--threads", "1"]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    let ob = hkam(&["split", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "4"]);
    assert!(ob.status.success(), "{}", stderr(&ob));
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(ta == tb, "reports differ between runs");
    let text = String::from_utf8(ta).unwrap();
    let parsed: SplitFile = serde_json::from_str(&text).unwrap();
    assert_eq!(to_json(&parsed), text);
    assert!(parsed.checks.iter().all(|c| c.pass));
}

#[test]
fn kam_writes_manifold_and_diagnostics() {
    let cfg = data("arnold.json");
    let out = scratch("manifold.json");
    let diag = scratch("diag.csv");
    let o = hkam(&["kam", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--diagnostics", diag.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&diag).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("j,mu,nu,lambda,M,R,residual"));
    assert!(lines.count() >= 2);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["unstable", "stable_plus", "stable_minus"] {
        assert!(m[key]["s_hat"].is_object(), "{key}");
    }
}

#[test]
fn normalform_writes_one_entry_per_eps() {
    let path = variant("nf.json", |v| v["eps_list"] = serde_json::json!([1e-3, 1.0]));
    let out = scratch("hnu.json");
    let o = hkam(&["normalform", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let entries = v.as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let w0 = entries[0]["omega1"][0].as_f64().unwrap();
    assert!((w0 - 0.618_033_988_749_895 / 1e-3f64.sqrt()).abs() < 1e-9);
}

#[test]
fn timemap_matches_the_pendulum() {
    let pot = scratch("u1.json");
    fs::write(&pot, r#"{"dims": 1, "cutoffs": [1], "entries": [[0, -1.0, 0.0], [1, 0.5, 0.0]]}"#).unwrap();
    let out = scratch("timemap.csv");
    let o = hkam(&["timemap", "--potential", pot.to_str().unwrap(), "--samples", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,s,chi,psi"));
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|t| t.parse().unwrap()).collect();
        assert!((v[1] - (v[0] / 4.0).tan().ln()).abs() < 1e-10);
        assert!((v[2] - 2.0 / v[1].cosh()).abs() < 1e-10);
    }
}

#[test]
fn homological_solvers_report_residuals() {
    let freq = scratch("freq.json");
    fs::write(&freq, r#"{"omega": [0.618033988749895], "tau": 1.0, "kmax": 8}"#).unwrap();
    let v = scratch("v.json");
    fs::write(&v, r#"{"dims": 1, "cutoffs": [2], "entries": [[1, 0.5, 0.0], [2, 0.0, 0.25]]}"#).unwrap();
    for op in ["domega", "shifted"] {
        let out = scratch(&format!("{op}.json"));
        let o = hkam(&["homological", "--op", op, "--in", v.to_str().unwrap(), "--freq", freq.to_str().unwrap(), "--out", out.to_str().unwrap(), "--residual"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r: f64 = String::from_utf8_lossy(&o.stdout).trim().strip_prefix("residual ").unwrap().parse().unwrap();
        assert!(r < 1e-12, "{op}: {r}");
    }
    let mean = scratch("mean.json");
    fs::write(&mean, r#"{"dims": 1, "cutoffs": [1], "entries": [[0, 1.0, 0.0]]}"#).unwrap();
    let o = hkam(&["homological", "--op", "domega", "--in", mean.to_str().unwrap(), "--freq", freq.to_str().unwrap(), "--out", scratch("m.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mean obstruction"));
}
