use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_ehdl");

fn ehdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ehdl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("ehdl-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// train -> prune -> export on synthetic data, shared by the tests.
fn workspace() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = scratch("shared");
        std::fs::write(d.join("train.cfg"), "epochs = 2\nseed = 4\n").unwrap();
        std::fs::write(d.join("prune.cfg"), "retain.3 = 8\nadmm_iterations = 1\nretrain_epochs = 1\n").unwrap();
        std::fs::write(d.join("weak.csv"), "# starvation\n0,2000\n60000000,0\n").unwrap();
        let s = ["--synthetic", "120"];
        ok(&d, &[&["train", "--arch", "mnist", "--config", "train.cfg", "--out", "m.json", "--report", "train.json"][..], &s].concat());
        ok(&d, &[&["prune", "--model", "m.json", "--target-spec", "prune.cfg", "--out", "m2.json"][..], &s].concat());
        ok(&d, &[&["export", "--model", "m2.json", "--block-size", "128", "--out", "model.ehdl", "--report", "export.json"][..], &s].concat());
        ok(&d, &[&["sample", "--index", "2", "--out", "x.txt"][..], &s].concat());
        d
    })
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn without_timestamp(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("generated_at_unix").expect("timestamp present");
    v
}

#[test]
fn infer_twice_is_identical_modulo_timestamp() {
    let d = workspace();
    ok(d, &["infer", "--model", "model.ehdl", "--input", "x.txt", "--report", "a.json"]);
    ok(d, &["infer", "--model", "model.ehdl", "--input", "x.txt", "--report", "b.json"]);
    let (a, b) = (json(&d.join("a.json")), json(&d.join("b.json")));
    assert_eq!(a["schema_version"], 1);
    assert_eq!(a["command"], "infer");
    assert_eq!(without_timestamp(a), without_timestamp(b));
    let strip = |p: &str| {
        std::fs::read_to_string(d.join(p)).unwrap().lines().filter(|l| !l.contains("generated_at_unix")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip("a.json"), strip("b.json"));
}

#[test]
fn energy_components_sum_to_total() {
    let d = workspace();
    ok(d, &["infer", "--model", "model.ehdl", "--input", "x.txt", "--report", "sum.json"]);
    let r = json(&d.join("sum.json"));
    let comps = r["components"].as_object().unwrap();
    let e: u64 = comps.values().map(|c| c["energy_fj"].as_u64().unwrap()).sum();
    let t: u64 = comps.values().map(|c| c["latency_ns"].as_u64().unwrap()).sum();
    assert_eq!(e, r["total"]["energy_fj"].as_u64().unwrap());
    assert_eq!(t, r["total"]["latency_ns"].as_u64().unwrap());
    assert_eq!(r["status"], "completed");
    assert_eq!(r["output"].as_array().unwrap().len(), 10);
}

#[test]
fn no_checkpoint_scheme_starves_with_exit_3() {
    let d = workspace();
    let out = ehdl(d, &["simulate", "--model", "model.ehdl", "--input", "x.txt", "--trace", "weak.csv", "--scheme", "none", "--report", "none.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&d.join("none.json"));
    assert_eq!(r["status"], "did_not_finish");
    assert!(r["output"].is_null());
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not finish"));

    let out = ehdl(d, &["simulate", "--model", "model.ehdl", "--input", "x.txt", "--trace", "weak.csv", "--scheme", "flex", "--report", "flex.json"]);
    assert!(out.status.success());
    let flex = json(&d.join("flex.json"));
    assert_eq!(flex["status"], "completed");
    ok(d, &["infer", "--model", "model.ehdl", "--input", "x.txt", "--report", "cont.json"]);
    assert_eq!(flex["output"], json(&d.join("cont.json"))["output"]);
}

#[test]
fn simulate_is_seeded() {
    let d = workspace();
    let run = |seed: &str, name: &str| {
        ok(d, &["simulate", "--model", "model.ehdl", "--input", "x.txt", "--failure-density", "2e-5", "--scheme", "flex", "--seed", seed, "--report", name]);
        without_timestamp(json(&d.join(name)))
    };
    let (a, b, c) = (run("7", "s7a.json"), run("7", "s7b.json"), run("8", "s8.json"));
    assert_eq!(a, b);
    assert_ne!(a["wasted_work"], c["wasted_work"]);
    assert_eq!(a["output"], c["output"]);
    assert!(a["wasted_work"]["failures"].as_u64().unwrap() > 0);
}

#[test]
fn export_reports_128x_on_the_large_fc() {
    let d = workspace();
    let r = json(&d.join("export.json"));
    assert_eq!(r["command"], "export");
    let fc = r["compression"].as_array().unwrap().iter().find(|c| c["kind"] == "fc_bcm").expect("bcm layer").clone();
    assert_eq!(fc["original_bytes"], 131072);
    assert_eq!(fc["compressed_bytes"], 1024);
    assert_eq!(fc["factor"], 128.0);
    assert_eq!(fc["reduction_percent"], "99.21%");
    assert!(r["fit"]["pass"].as_bool().unwrap());
    let text = ok(d, &["report", "--in", "export.json"]);
    assert!(text.contains("128.00x"), "{text}");
}

#[test]
fn report_formats() {
    let d = workspace();
    ok(d, &["infer", "--model", "model.ehdl", "--input", "x.txt", "--report", "fmt.json"]);
    let csv = ok(d, &["report", "--in", "fmt.json", "--csv"]);
    assert!(csv.starts_with("section,name,energy_fj,latency_ns\n"));
    assert!(csv.lines().any(|l| l.starts_with("component,lea,")));
    let plot: Value = serde_json::from_str(&ok(d, &["report", "--in", "fmt.json", "--plot-data"])).unwrap();
    assert_eq!(plot["layers"]["index"].as_array().unwrap().len(), 9);
    let train = ok(d, &["report", "--in", "train.json", "--csv"]);
    assert_eq!(train.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let d = workspace();
    assert_eq!(ehdl(d, &["infer", "--model", "missing.ehdl", "--input", "x.txt"]).status.code(), Some(4));
    assert_eq!(ehdl(d, &["infer", "--model", "x.txt", "--input", "x.txt"]).status.code(), Some(2));
    assert_eq!(ehdl(d, &["infer", "--model", "model.ehdl"]).status.code(), Some(2));
    assert_eq!(ehdl(d, &["simulate", "--model", "model.ehdl", "--input", "x.txt", "--scheme", "flex"]).status.code(), Some(2));
    std::fs::write(d.join("bad.cfg"), "epochz = 1\n").unwrap();
    assert_eq!(ehdl(d, &["train", "--arch", "har", "--config", "bad.cfg", "--out", "h.json"]).status.code(), Some(2));
    std::fs::write(d.join("short.txt"), "0.5\n").unwrap();
    assert_eq!(ehdl(d, &["infer", "--model", "model.ehdl", "--input", "short.txt"]).status.code(), Some(2));
    std::fs::write(d.join("over.cfg"), "retain.3 = 17\n").unwrap();
    assert_eq!(ehdl(d, &["prune", "--model", "m.json", "--target-spec", "over.cfg", "--out", "o.json", "--synthetic", "8"]).status.code(), Some(2));
}

#[test]
fn dataset_root_comes_from_the_environment() {
    let d = scratch("env");
    let out = Command::new(BIN)
        .args(["train", "--arch", "mnist", "--out", "m.json"])
        .env("EHDL_DATA", d.join("empty"))
        .current_dir(&d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}
