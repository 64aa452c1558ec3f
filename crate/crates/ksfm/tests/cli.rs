use std::path::Path;
use std::process::{Command, Output};

use ksfm::meta::SolveReport;
use ksfm::oracle_core::{validate_submodular, InstanceSpec};

fn ksfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksfm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const F2: &str = r#"{"n":2,"kind":"explicit","params":{"table":[0.0,1.0,2.0,2.0]}}"#;

#[test]
fn gen_explicit_round_trips() {
    let o = ksfm(&["gen", "--kind", "explicit", "--n", "2", "--seed", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let inst = InstanceSpec::from_json(text.trim()).unwrap();
    assert_eq!(inst.to_json(), text.trim());
}

#[test]
fn gen_planted_is_submodular_and_written_to_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let o = ksfm(&["gen", "--kind", "planted", "--n", "8", "--k", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let inst = InstanceSpec::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(validate_submodular(&inst).unwrap());
}

#[test]
fn gen_bad_kind_fails() {
    let o = ksfm(&["gen", "--kind", "spiral", "--n", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn solve_f2_parallel_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write(dir.path(), "f2.json", F2);
    let o = ksfm(&["solve", &inst, "--mode", "parallel", "--k", "1", "--eps", "1e-3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: SolveReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.minimizer.is_empty());
    assert!(r.queries > 0);
}

#[test]
fn solve_eps_zero_parallel_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write(dir.path(), "f2.json", F2);
    let o = ksfm(&["solve", &inst, "--mode", "parallel", "--eps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn solve_rejects_malformed_and_non_submodular_input() {
    let dir = tempfile::tempdir().unwrap();
    let junk = write(dir.path(), "junk.json", "{\"n\": 2");
    assert_eq!(ksfm(&["solve", &junk]).status.code(), Some(2));
    let sup = write(dir.path(), "sup.json", r#"{"n":2,"kind":"explicit","params":{"table":[0.0,1.0,1.0,3.0]}}"#);
    assert_eq!(ksfm(&["solve", &sup]).status.code(), Some(2));
    assert_eq!(ksfm(&["solve", "/nonexistent/instance.json"]).status.code(), Some(2));
}

#[test]
fn solve_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = ksfm(&["gen", "--kind", "planted", "--n", "9", "--k", "2", "--seed", "11"]);
    let inst = write(dir.path(), "p.json", &stdout(&o));
    for mode in ["parallel", "sequential_weak", "sequential_strong"] {
        let args = ["--seed", "5", "solve", inst.as_str(), "--mode", mode, "--k", "2", "--eps", "1e-3"];
        let a = ksfm(&args);
        let b = ksfm(&args);
        assert!(a.status.success(), "{mode}: {}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout, "{mode}");
    }
}

#[test]
fn verify_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write(dir.path(), "f2.json", F2);
    // g for the order (0, 1) is (1, 1); f* = 0, so neg-sum 0 meets the first condition.
    let good = write(dir.path(), "good.json", r#"{"permutations":[[0,1]],"weights":[1.0]}"#);
    let o = ksfm(&["verify", &inst, "--certificate", &good, "--k", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["y"], serde_json::json!([1.0, 1.0]));
    let bad = write(dir.path(), "bad.json", "[5.0, -5.0]");
    let o = ksfm(&["verify", &inst, "--certificate", &bad, "--k", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["cond2"], false);
    let broken = write(dir.path(), "broken.json", r#"{"permutations":[[0,0]],"weights":[1.0]}"#);
    assert_eq!(ksfm(&["verify", &inst, "--certificate", &broken]).status.code(), Some(2));
}

#[test]
fn bench_writes_csv_grid() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write(
        dir.path(),
        "plan.json",
        r#"{"family":"planted","n":[6,8],"k":[1,2],"modes":["parallel","sequential_strong"],"seeds":2}"#,
    );
    let out = dir.path().join("out.csv");
    let o = ksfm(&["--seed", "7", "bench", &plan, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,k,mode,seed,queries,rounds,value,gap");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2 * 2);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 8);
        let gap: f64 = cols[7].parse().unwrap();
        assert!(gap >= -1e-9, "{l}");
    }
    let again = ksfm(&["--seed", "7", "bench", &plan]);
    assert_eq!(stdout(&again), csv);
}

#[test]
fn bench_rejects_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write(dir.path(), "plan.json", r#"{"family":"planted","n":[],"k":[1],"modes":["parallel"],"seeds":1}"#);
    assert_eq!(ksfm(&["bench", &plan]).status.code(), Some(2));
}
