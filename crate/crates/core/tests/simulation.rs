use std::collections::BTreeMap;

use coldsim::lora::{LoraMode, LoraScheduling};
use coldsim::metrics::{self, startup_breakdown, throughput_timeline};
use coldsim::recovery::RecoveryMode;
use coldsim::scenario::{AdapterConfig, ArrivalConfig, CrashConfig, LengthConfig};
use coldsim::switcher::ServingMode;
use coldsim::trace::{audit_links, TraceRecord};
use coldsim::{run, RunResult, Scenario, SimError, SimTime};

fn base(gpus: u32) -> Scenario {
    let mut s = Scenario::default();
    s.cluster.gpu_count = gpus;
    s
}

fn crash(gpu: u32, time: f64) -> CrashConfig {
    CrashConfig {
        gpu,
        time: Some(time),
        window: None,
        phase: Default::default(),
    }
}

fn adapter(id: &str) -> AdapterConfig {
    AdapterConfig {
        id: id.into(),
        base_model: None,
        size_fraction: 1e-4,
        owner_gpus: None,
    }
}

fn checked(s: &Scenario) -> RunResult {
    let r = run(s).unwrap();
    audit_links(&r.trace, &s.cluster).unwrap();
    r
}

/// Token indices per request, in emission order.
fn tokens_by_request(r: &RunResult) -> BTreeMap<u64, Vec<u32>> {
    let mut m: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for (_, req, i) in r.trace.tokens() {
        m.entry(req).or_default().push(i);
    }
    m
}

#[test]
fn every_request_gets_all_its_tokens() {
    let r = checked(&base(4));
    for req in &r.requests {
        assert!(req.is_finished());
        assert!(req.ttft.unwrap() <= req.latency().unwrap());
    }
    for (_, idx) in tokens_by_request(&r) {
        assert_eq!(idx, (0..=32).collect::<Vec<_>>());
    }
}

#[test]
fn throughput_bins_conserve_tokens() {
    let mut s = base(4);
    s.workload.arrival = ArrivalConfig::Poisson { rate: 8.0 };
    s.workload.duration = 3.0;
    let r = checked(&s);
    let bins = throughput_timeline(&r.trace, 0.5);
    let total: f64 = bins.iter().map(|b| b.tokens_per_sec * 0.5).sum();
    assert!((total - r.trace.tokens().count() as f64).abs() < 1e-6);
}

#[test]
fn breakdown_components_sum_to_ttft() {
    let r = checked(&base(2));
    let b = startup_breakdown(&r).unwrap();
    let sum = b.load_ckpt_dram + b.load_lora_dram + b.init_meta + b.gpu_load_base + b.gpu_load_lora + b.prefill;
    assert!((sum - b.total).abs() < 1e-9, "{b:?}");
    assert!([b.load_ckpt_dram, b.init_meta, b.gpu_load_base, b.gpu_load_lora, b.prefill]
        .iter()
        .all(|x| *x >= 0.0));
}

#[test]
fn warm_start_has_no_loading_stages() {
    let mut s = base(2);
    s.loading.warm_start = true;
    s.switch.enabled = false;
    let r = checked(&s);
    let b = startup_breakdown(&r).unwrap();
    assert_eq!(b.gpu_load_base + b.gpu_load_lora + b.init_meta + b.load_ckpt_dram, 0.0);
}

#[test]
fn single_lane_crash_moves_requests_to_survivors() {
    let mut s = base(4);
    s.loading.warm_start = true;
    s.workload.arrival = ArrivalConfig::Poisson { rate: 10.0 };
    s.workload.duration = 3.0;
    s.faults.crash = vec![crash(2, 1.0)];
    let r = checked(&s);
    assert_eq!(r.switch_time, Some(SimTime::ZERO));
    assert!(r.requests.iter().all(|q| q.is_finished()));
    assert!(r.modes.iter().all(|m| *m == Some(ServingMode::SingleGpu)));
    // Nothing runs on the dead GPU after the crash.
    let late_on_dead = r.trace.records.iter().any(|rec| {
        matches!(rec, TraceRecord::Compute { gpu: 2, start, .. } if *start > SimTime::from_secs_ceil(1.0))
    });
    assert!(!late_on_dead);
    for (_, idx) in tokens_by_request(&r) {
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len(), "a token was emitted twice");
    }
}

#[test]
fn switch_discards_surplus_adapter_parts() {
    let mut s = base(4);
    s.adapters = vec![adapter("B"), adapter("C")];
    s.workload.arrival = ArrivalConfig::Burst { count: 16 };
    let r = checked(&s);
    let switch = r.switch_time.expect("the full model lands on every GPU");
    assert!(r.trace.records.iter().any(|rec| matches!(rec, TraceRecord::StrategySwitch { .. })));
    let discards: Vec<_> = r
        .trace
        .records
        .iter()
        .filter_map(|rec| match rec {
            TraceRecord::Discard { time, parts, .. } => Some((*time, *parts)),
            _ => None,
        })
        .collect();
    assert!(!discards.is_empty());
    assert!(discards.iter().all(|(t, p)| *t >= switch && *p > 0));
    assert!(r.requests.iter().all(|q| q.is_finished()));
}

#[test]
fn disabled_switch_stays_pipelined() {
    let mut s = base(4);
    s.switch.enabled = false;
    let r = checked(&s);
    assert_eq!(r.switch_time, None);
    assert!(r.modes.iter().all(|m| *m == Some(ServingMode::PipelineParallel)));
}

#[test]
fn unknown_adapter_in_trace_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.trace");
    std::fs::write(&path, "# arrival prompt out adapter\n0 32 4 lora-a\n1000000 32 4 nope\n2000000,16,2,-\n").unwrap();
    let mut s = base(2);
    s.workload.arrival = ArrivalConfig::Trace { path };
    let r = checked(&s);
    assert_eq!(r.requests.len(), 3);
    let rejected: Vec<_> = r
        .trace
        .records
        .iter()
        .filter_map(|rec| match rec {
            TraceRecord::Rejected { request, reason, .. } => Some((*request, reason.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(rejected, vec![(1, "unknown adapter nope".to_string())]);
    assert!(r.requests[0].is_finished() && r.requests[2].is_finished());
    assert!(!r.requests[1].is_finished());
}

#[test]
fn trace_file_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("w.trace"), "0 8 1 -\n").unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "[workload.arrival]\nkind = \"trace\"\npath = \"w.trace\"\n").unwrap();
    let s = Scenario::from_path(&cfg, &[]).unwrap();
    let r = checked(&s);
    assert_eq!(r.requests.len(), 1);
    assert!(r.requests[0].is_finished());
}

#[test]
fn malformed_trace_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.trace");
    std::fs::write(&path, "0 8 1 -\n5 8\n").unwrap();
    let mut s = base(2);
    s.workload.arrival = ArrivalConfig::Trace { path };
    assert!(matches!(run(&s), Err(SimError::Parse { line: 2, .. })));
}

#[test]
fn outputs_are_written_and_echo_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let s = base(2);
    let r = run(&s).unwrap();
    let summary = metrics::write_outputs(dir.path(), &r, &s).unwrap();
    assert_eq!(summary.completed, 64);
    assert_eq!(summary.trace_hash, r.trace.hash());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["scenario_hash"], s.hash());
    // The echoed config parses back to the same scenario.
    let echoed: Scenario = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(echoed, s);
    assert!(echoed.validate().is_ok());
    let breakdown = std::fs::read_to_string(dir.path().join("breakdown.json")).unwrap();
    assert!(breakdown.contains("loading_fraction"));
    let tp = std::fs::read_to_string(dir.path().join("throughput.csv")).unwrap();
    assert!(tp.starts_with("bin_start,tokens,tokens_per_s\n"));
}

#[test]
fn toml_round_trip_keeps_the_hash() {
    let mut s = base(3);
    s.adapters.push(adapter("B"));
    s.workload.prompt_length = LengthConfig::LogNormal { mu: 4.0, sigma: 0.3 };
    let back = Scenario::from_toml_str(&s.to_toml(), &[]).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.hash(), s.hash());
}

#[test]
fn validation_collects_all_errors() {
    let mut s = base(4);
    s.faults.crash = vec![crash(9, 1.0)];
    s.batching.max_batch_size = 0;
    s.adapters.push(adapter("lora-a"));
    let errs = s.validate().unwrap_err();
    let fields: Vec<String> = errs
        .iter()
        .filter_map(|e| match e {
            SimError::Config { field, .. } => Some(field.clone()),
            _ => None,
        })
        .collect();
    for want in ["faults.crash[0].gpu", "batching.max_batch_size", "adapters[1].id"] {
        assert!(fields.iter().any(|f| f == want), "missing {want} in {fields:?}");
    }
}

#[test]
fn more_gpus_than_layers_is_invalid() {
    let s = Scenario::from_toml_str("[cluster]\ngpu_count = 64\n", &[]).unwrap();
    assert!(s.validate().is_err());
    assert!(run(&s).is_err());
}

#[test]
fn overrides_apply_dotted_paths() {
    let s = Scenario::from_toml_str(
        "",
        &["cluster.gpu_count=3".into(), "lora.mode=unmerged".into(), "recovery.mode=full".into()],
    )
    .unwrap();
    assert_eq!(s.cluster.gpu_count, 3);
    assert_eq!(s.lora.mode, LoraMode::Unmerged);
    assert_eq!(s.recovery.mode, RecoveryMode::Full);
    assert!(Scenario::from_toml_str("", &["nokey".into()]).is_err());
}

#[test]
fn all_gpus_crashing_is_unrecoverable() {
    let mut s = base(2);
    s.faults.crash = vec![crash(0, 0.5), crash(1, 0.5)];
    assert!(matches!(run(&s), Err(SimError::Unrecoverable(_))));
}

#[test]
fn crash_window_is_seeded() {
    let mut s = base(4);
    s.faults.crash = vec![CrashConfig {
        gpu: 1,
        time: None,
        window: Some([0.5, 1.5]),
        phase: Default::default(),
    }];
    let a = checked(&s);
    let b = checked(&s);
    assert_eq!(a.trace.hash(), b.trace.hash());
    let t = a.trace.first_crash().unwrap();
    assert!(t >= SimTime::from_secs_ceil(0.5) && t < SimTime::from_secs_ceil(1.5));
}

#[test]
fn both_recovery_modes_finish_every_request() {
    for mode in [RecoveryMode::Pp, RecoveryMode::Full] {
        let mut s = base(4);
        s.recovery.mode = mode;
        s.faults.crash = vec![crash(1, 1.0), crash(2, 1.0)];
        let r = checked(&s);
        assert!(r.requests.iter().all(|q| q.is_finished()), "{mode:?}");
        let recoveries = r
            .trace
            .records
            .iter()
            .filter(|rec| matches!(rec, TraceRecord::Recovery { .. }))
            .count();
        assert_eq!(recoveries, 1, "simultaneous crashes share one recovery");
    }
}

#[test]
fn unmerged_and_eager_modes_serve_mixed_adapters() {
    for (mode, sched) in [
        (LoraMode::Unmerged, LoraScheduling::Epoch),
        (LoraMode::Merged, LoraScheduling::Eager),
        (LoraMode::Merged, LoraScheduling::Epoch),
    ] {
        let mut s = base(2);
        s.adapters = vec![adapter("B"), adapter("C")];
        s.lora.mode = mode;
        s.lora.scheduling = sched;
        s.switch.enabled = false;
        s.workload.adapter_switch_probability = 0.5;
        s.workload.arrival = ArrivalConfig::Poisson { rate: 10.0 };
        s.workload.duration = 2.0;
        let r = checked(&s);
        assert!(r.requests.iter().all(|q| q.is_finished()), "{mode:?} {sched:?}");
        let merges = r.trace.records.iter().filter(|rec| matches!(rec, TraceRecord::Merge { .. })).count();
        if mode == LoraMode::Unmerged {
            assert_eq!(merges, 0);
        } else {
            assert!(merges > 0);
        }
    }
}
