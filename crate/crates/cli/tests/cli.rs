use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bec")).args(args).output().expect("binary runs")
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn config(name: &str) -> String {
    repo_file(&format!("../../configs/{name}")).display().to_string()
}

fn run_ok(args: &[&str]) {
    let out = bec(args);
    assert!(out.status.success(), "bec {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_schema(artifact: &Path, schema: &str) {
    let schema = read_json(&repo_file(&format!("schemas/{schema}.schema.json")));
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let instance = read_json(artifact);
    let msgs: Vec<String> = match compiled.validate(&instance) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{} violates schema: {msgs:?}", artifact.display());
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line on stderr");
    serde_json::from_str(line).expect("stderr ends with error JSON")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn stationary_desk_writes_solution_and_convergence() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["stationary", "--config", &config("desk.json"), "--out", out]);
    let sol = dir.path().join("solution.json");
    assert_schema(&sol, "solution");
    let v = read_json(&sol);
    assert_eq!(v["phi"].as_array().unwrap().len(), 256);
    assert_eq!(v["excited"].as_array().unwrap().len(), 8);
    let conv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    let mut lines = conv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,density_change,condensate_residual,excited_residual,coupling_residual");
    assert_eq!(lines.count() as u64, v["iterations"].as_u64().unwrap());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let out = dir.path().to_str().unwrap();
        run_ok(&["stationary", "--config", &config("desk.json"), "--out", out]);
        run_ok(&["expand", "--config", &config("oscillatory.json"), "--out", out, "--order", "3"]);
        run_ok(&["evolve", "--config", &config("oscillatory.json"), "--out", out, "--tfinal", "0.05", "--dt", "0.005"]);
        run_ok(&["sweep", "--config", &config("oscillatory.json"), "--out", out, "--epsilons", "1,0.5"]);
    }
    for name in ["solution.json", "convergence.csv", "expansion.json", "initial_state.json", "observables.csv", "sweep.csv", "sweep.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"grid":{"dim":1,"half_width":8,"points":256},"trap":{"kind":"harmonic","coefficients":[1]},
            "microstructure":{"g0":0.1},"thermo":{"beta":1,"particles":100,"excited_states":8},"temperature":3}"#,
    );
    let out = bec(&["stationary", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert_eq!(e["error"]["key"], "temperature");
    assert!(!dir.path().join("solution.json").exists());
}

#[test]
fn invalid_value_exits_2_with_dotted_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"grid":{"dim":1,"half_width":8,"points":256},"trap":{"kind":"harmonic","coefficients":[1]},
            "microstructure":{"g0":0.1},"thermo":{"beta":1,"particles":"many","excited_states":8}}"#,
    );
    let out = bec(&["stationary", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["key"], "thermo.particles");
}

#[test]
fn missing_config_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = bec(&["stationary", "--config", "/nonexistent/run.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn full_eps_without_epsilon_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = bec(&["full-eps", "--config", &config("desk.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["key"], "epsilon");
}

#[test]
fn full_eps_refines_the_grid() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["full-eps", "--config", &config("oscillatory.json"), "--out", out, "--epsilon", "0.5"]);
    let path = dir.path().join("solution.json");
    assert_schema(&path, "solution");
    let v = read_json(&path);
    assert_eq!(v["epsilon"], 0.5);
    // 16 points per period on [-8, 8]
    assert_eq!(v["grid"]["points"], 512);
}

#[test]
fn sweep_period_must_divide_box_and_solver_errors_carry_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"grid":{"dim":1,"half_width":8,"points":256},"trap":{"kind":"harmonic","coefficients":[1]},
            "microstructure":{"g0":0.1},"thermo":{"beta":1,"particles":100,"excited_states":8},
            "sweep":{"epsilons":[0.3,0.2]}}"#,
    );
    let out = bec(&["sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["key"], "sweep.epsilons");

    let cfg = write_config(
        dir.path(),
        r#"{"grid":{"dim":1,"half_width":8,"points":256},"trap":{"kind":"harmonic","coefficients":[1]},
            "microstructure":{"g0":0.1},"epsilon":0.25,"thermo":{"beta":1,"particles":100,"excited_states":8}}"#,
    );
    let out = bec(&["stationary", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "module");
    assert_eq!(e["error"]["code"], "under_resolved");
    assert_eq!(e["error"]["context"], "stationary solve");
}

#[test]
fn expand_emits_every_requested_slice() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    for order in ["0", "1", "2", "3"] {
        run_ok(&["expand", "--config", &config("oscillatory.json"), "--out", out, "--order", order]);
        let path = dir.path().join("expansion.json");
        assert_schema(&path, "expansion");
        let v = read_json(&path);
        let k: usize = order.parse().unwrap();
        assert_eq!(v["slices"].as_array().unwrap().len(), k.min(2) + 1);
        assert_eq!(v["correctors"].is_null(), k < 2);
        assert_eq!(v["correctors"]["condensate_order3"].is_array(), k == 3);
    }
    let out4 = bec(&["expand", "--config", &config("oscillatory.json"), "--out", out, "--order", "4"]);
    assert_eq!(out4.status.code(), Some(2));
    assert_eq!(error_json(&out4)["error"]["key"], "order");
}

#[test]
fn evolve_writes_initial_state_and_series() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["evolve", "--config", &config("oscillatory.json"), "--out", out, "--tfinal", "0.1", "--dt", "0.005"]);
    assert_schema(&dir.path().join("initial_state.json"), "initial_state");
    let csv = fs::read_to_string(dir.path().join("observables.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("t,condensate_norm,max_overlap,zeta,theta,density_change,norm_1,"));
    // header, then t = 0, 0.05 and 0.1
    assert_eq!(lines.len(), 1 + 3);
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((last[0] - 0.1).abs() < 1e-12);
    assert!(last[5] < 1e-6, "stationary state moved: {}", last[5]);

    let bad = bec(&["evolve", "--config", &config("oscillatory.json"), "--out", out, "--tfinal", "0.1", "--dt", "0.03"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(error_json(&bad)["error"]["key"], "dynamics.dt");
}

#[test]
fn verify_asymptotics_passes_for_cosine_microstructure() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["verify-asymptotics", "--config", &config("oscillatory.json"), "--out", out, "--m", "3"]);
    let path = dir.path().join("asymptotics.json");
    assert_schema(&path, "asymptotics");
    let v = read_json(&path);
    assert_eq!(v["passed"], true);
    assert_eq!(v["cases"].as_array().unwrap().len(), 4);
}

fn footer(csv: &str, name: &str) -> f64 {
    let prefix = format!("# {name},");
    csv.lines().find_map(|l| l.strip_prefix(&prefix)).expect("footer field").parse().unwrap()
}

#[test]
fn small_sweep_rows_are_sorted_and_schema_valid() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["sweep", "--config", &config("oscillatory.json"), "--out", out, "--epsilons", "0.5,1,0.25"]);
    assert_schema(&dir.path().join("sweep.json"), "sweep");
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let eps: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(eps, vec![1.0, 0.5, 0.25]);
    assert!(footer(&csv, "slope").is_finite());
}

#[test]
fn desk_sweep_slope_is_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["sweep", "--config", &config("oscillatory.json"), "--out", out, "--epsilons", "0.125,0.0625,0.03125,0.015625"]);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let slope = footer(&csv, "slope");
    assert!((1.85..=2.15).contains(&slope), "slope {slope}");
}
