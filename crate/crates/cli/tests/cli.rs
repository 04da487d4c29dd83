use std::path::Path;
use std::process::{Command, Output};

fn coldsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldsim"))
        .args(args)
        .env_remove("COLDSIM_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(path).unwrap()
}

const NO_ADAPTERS: &str = "adapters=[]";

#[test]
fn plan_four_gpus_is_a_rotation() {
    let o = coldsim(&["plan", "--set", "cluster.gpu_count=4", "--set", NO_ADAPTERS]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), golden("plan_4gpu.txt"));
}

#[test]
fn plan_with_two_faults_reorders_survivors() {
    let o = coldsim(&["plan", "--set", "cluster.gpu_count=4", "--set", NO_ADAPTERS, "--faults", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text, golden("plan_4gpu_faults_1_2.txt"));
    assert!(text.contains("survivor 3 holds [3] block 2..4 order 2 3 0 1"));
}

#[test]
fn plan_single_gpu_is_trivial() {
    let o = coldsim(&["plan", "--set", "cluster.gpu_count=1", "--set", NO_ADAPTERS]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), golden("plan_1gpu.txt"));
}

#[test]
fn plan_reads_faults_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(
        &cfg,
        "adapters = []\n[cluster]\ngpu_count = 4\n[[faults.crash]]\ngpu = 1\ntime = 1.0\n[[faults.crash]]\ngpu = 2\ntime = 1.0\n",
    )
    .unwrap();
    let o = coldsim(&["plan", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), golden("plan_4gpu_faults_1_2.txt"));
}

#[test]
fn run_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = coldsim(&["run", "--set", "cluster.gpu_count=4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean TTFT"));
    for f in ["requests.csv", "throughput.csv", "breakdown.json", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let requests = std::fs::read_to_string(out.join("requests.csv")).unwrap();
    assert!(requests.starts_with("request_id,arrival,ttft,completion,adapter,mode\n"));
    assert_eq!(requests.lines().count(), 65);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_coldsim"))
        .args(["run", "--set", "workload.arrival={kind = \"burst\", count = 2}"])
        .env("COLDSIM_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("summary.json").is_file());
}

#[test]
fn strategy_override_changes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str, strategy: &str| {
        let out = dir.path().join(name);
        let o = coldsim(&[
            "run",
            "--set",
            "cluster.gpu_count=4",
            "--set",
            &format!("loading.strategy={strategy}"),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap()
    };
    let pp = read("pp", "pipeline");
    let full = read("full", "full_copy_gpu");
    assert_eq!(full["config"]["loading"]["strategy"], "full_copy_gpu");
    assert!(pp["ttft"]["mean"].as_f64().unwrap() < full["ttft"]["mean"].as_f64().unwrap());
}

#[test]
fn nonexistent_fault_gpu_fails_validation() {
    let o = coldsim(&[
        "validate",
        "--set",
        "cluster.gpu_count=4",
        "--set",
        "faults.crash=[{gpu = 9, time = 1.0}]",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("faults.crash[0].gpu"), "{}", stderr(&o));
}

#[test]
fn validation_lists_every_error() {
    let o = coldsim(&[
        "run",
        "--set",
        "batching.max_batch_size=0",
        "--set",
        "lora.epoch_length=-1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("batching.max_batch_size") && err.contains("lora.epoch_length"), "{err}");
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let o = coldsim(&["validate", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_key_is_rejected() {
    let o = coldsim(&["validate", "--set", "cluster.gpus=4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gpus"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_two() {
    // Crashing every GPU leaves nothing to recover on.
    let o = coldsim(&[
        "run",
        "--set",
        "faults.crash=[{gpu = 0, time = 0.5}, {gpu = 1, time = 0.5}]",
        "--out",
        tempfile::tempdir().unwrap().path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("unrecoverable"));
}

#[test]
fn compare_runs_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = coldsim(&[
        "compare",
        "--set",
        "cluster.gpu_count=4",
        "--set",
        "workload.arrival={kind = \"poisson\", rate = 8.0}",
        "--set",
        "workload.duration=1.0",
        "--strategies",
        "pipeline,full_copy_gpu",
        "--seeds",
        "1-5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.contains(",ok,")));
    assert!(dir.path().join("full_copy_gpu-seed3/summary.json").is_file());
    // Same seed, same arrivals, whatever the strategy.
    let arrivals = |cell: &str| {
        let text = std::fs::read_to_string(dir.path().join(cell).join("requests.csv")).unwrap();
        text.lines().map(|l| l.split(',').nth(1).unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(arrivals("pipeline-seed2"), arrivals("full_copy_gpu-seed2"));
    assert_ne!(arrivals("pipeline-seed2"), arrivals("pipeline-seed3"));
}

#[test]
fn compare_marks_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let o = coldsim(&[
        "compare",
        "--set",
        "faults.crash=[{gpu = 0, time = 0.5}, {gpu = 1, time = 0.5}]",
        "--seeds",
        "1,2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let table = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.contains(",failed,")).count(), 4);
}

#[test]
fn bad_seed_list_is_rejected() {
    let o = coldsim(&["compare", "--seeds", "5-1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn defaults_round_trip() {
    let o = coldsim(&["defaults"]);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d.toml");
    std::fs::write(&cfg, stdout(&o)).unwrap();
    let v = coldsim(&["validate", cfg.to_str().unwrap()]);
    assert!(v.status.success(), "{}", stderr(&v));
    assert_eq!(stdout(&v).trim(), "ok");
}
