use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pathflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let o = pathflow(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn outputs(dir: &Path) -> BTreeMap<String, Value> {
    let run: Value = serde_json::from_slice(&std::fs::read(dir.join("run.json")).unwrap()).unwrap();
    serde_json::from_value(run["outputs"].clone()).unwrap()
}

/// The whole chain twice with the same seeds, in separate directories.
fn pipeline(root: &Path) {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    ok(&["gen-data", "--grid", "3x3", "--net-seed", "2", "--samples", "12", "--seed", "5", "--out", &p("data")]);
    ok(&["train", "--data", &p("data"), "--preset", "desk", "--epochs", "2", "--out", &p("train")]);
    ok(&["eval", "--checkpoint", &p("train/best.ckpt"), "--data", &p("data"), "--split", "all", "--out", &p("eval")]);
    ok(&[
        "predict",
        "--checkpoint",
        &p("train/best.ckpt"),
        "--grid",
        "3x3",
        "--net-seed",
        "2",
        "--trips",
        "sample:9",
        "--renormalize",
        "--out",
        &p("pred"),
    ]);
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for step in ["data", "train", "eval", "pred"] {
        let (oa, ob) = (outputs(&a.path().join(step)), outputs(&b.path().join(step)));
        assert!(!oa.is_empty());
        assert_eq!(oa, ob, "{step}");
        for (file, hash) in &oa {
            if hash != "timed" {
                let x = std::fs::read(a.path().join(step).join(file)).unwrap();
                let y = std::fs::read(b.path().join(step).join(file)).unwrap();
                assert!(x == y, "{step}/{file} differs");
            }
        }
    }
    let o = outputs(&a.path().join("train"));
    assert!(o.contains_key("best.ckpt") && o.contains_key("last.ckpt"));
    assert_eq!(o["history.csv"], "timed");
    let e = outputs(&a.path().join("eval"));
    assert!(e.contains_key("report.json") && e.contains_key("links.csv"));
    let report = std::fs::read_to_string(a.path().join("eval/report.json")).unwrap();
    assert!(!report.contains("seconds"));
}

#[test]
fn stanza_records_the_run() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("sol");
    let out_s = out.to_string_lossy();
    ok(&["solve", "--grid", "3x3", "--net-seed", "1", "--trips", "sample:3", "--out", &out_s]);
    let run: Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "solve");
    assert_eq!(run["argv"][1], "solve");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    let outs = run["outputs"].as_object().unwrap();
    for f in ["path_flows.csv", "link_flows.csv", "solve.json"] {
        let bytes = std::fs::read(out.join(f)).unwrap();
        let hex: String = sha2_hex(&bytes);
        assert_eq!(outs[f], hex.as_str(), "{f}");
    }
    let sol: Value = serde_json::from_slice(&std::fs::read(out.join("solve.json")).unwrap()).unwrap();
    assert!(sol["rel_gap"].as_f64().unwrap() <= 1e-6);
}

fn sha2_hex(bytes: &[u8]) -> String {
    pathflow::store::sha256_hex(bytes)
}

#[test]
fn exit_codes() {
    assert_eq!(pathflow(&["--help"]).status.code(), Some(0));
    assert_eq!(pathflow(&["--version"]).status.code(), Some(0));
    assert_eq!(pathflow(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(pathflow(&["solve", "--tol"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nothing.ckpt");
    let out = d.path().join("o");
    let o = pathflow(&[
        "predict",
        "--checkpoint",
        &missing.to_string_lossy(),
        "--out",
        &out.to_string_lossy(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("nothing.ckpt"), "{err}");
    let o = pathflow(&["gen-data", "--grid", "1x9", "--out", &out.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generated_network_bundle_loads_back() {
    let d = tempfile::tempdir().unwrap();
    let net = d.path().join("net");
    let net_s = net.to_string_lossy().into_owned();
    ok(&["gen-net", "--grid", "3x4", "--seed", "8", "--out", &net_s]);
    assert!(net.join("network.tntp").exists() && net.join("network.json").exists());
    let sol = d.path().join("sol");
    ok(&["solve", "--net", &net_s, "--trips", "sample:1", "--out", &sol.to_string_lossy()]);
    let sol2 = d.path().join("sol2");
    ok(&["solve", "--grid", "3x4", "--net-seed", "8", "--trips", "sample:1", "--out", &sol2.to_string_lossy()]);
    for f in ["path_flows.csv", "link_flows.csv"] {
        assert_eq!(std::fs::read(sol.join(f)).unwrap(), std::fs::read(sol2.join(f)).unwrap(), "{f}");
    }
}
