mod support;

use std::net::TcpListener;
use std::process::Command;

use chunkstream::bench::{run_bench, Mode};
use chunkstream::distribution::StrategySpec;
use support::*;

#[test]
fn stream_plan_counts_connections_and_conserves_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let strategy = StrategySpec::by_hostname(StrategySpec::Binpacking, StrategySpec::Binpacking);
    let plan = two_host_plan(strategy.clone());
    let report = run_bench(&plan, dir.path(), bench_exe()).unwrap();
    assert!(!report.failed());
    let rep = &report.repetitions[0];
    assert!(rep.dumps > 5, "{rep:?}");
    assert!(rep.conserved);
    assert_eq!(rep.discarded, 0);
    let expected = report.strategies.iter().find(|s| s.strategy == strategy).unwrap().connections;
    assert_eq!(rep.data_connections, expected);
    assert_eq!(rep.contacted_pairs, expected);
    let load = rep.load.as_ref().unwrap();
    assert!(load.throughput.mean > 0.0 && load.whiskers.median > 0.0);

    let csv = std::fs::read_to_string(dir.path().join("rep-0/samples.csv")).unwrap();
    assert!(csv.starts_with("role,step,rank,bytes,seconds\n"));
    assert!(csv.lines().any(|l| l.starts_with("load,")) && csv.lines().any(|l| l.starts_with("store,")));
    for f in ["summary.json", "plan.json", "rep-0/summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn slow_readers_with_discard_drop_dumps_but_not_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let plan = bench_plan(serde_json::json!({
        "mode": "stream", "writers": 2, "readers": 1,
        "bytes_per_writer_per_step": 1024, "compute_delay_ms": 40, "reader_delay_ms": 200,
        "duration_s": 3, "repetitions": 1, "startup_grace_ms": 1500,
        "engine": {"engine": "stream", "queue_policy": "discard", "queue_depth": 1}
    }));
    let report = run_bench(&plan, dir.path(), bench_exe()).unwrap();
    let rep = &report.repetitions[0];
    assert!(rep.discarded > 0);
    assert!((rep.dumps as u64) < rep.produced, "{rep:?}");
    assert_eq!(rep.published + rep.discarded, rep.produced);
    assert!(rep.writer_step_s < 0.040 * 1.25, "writer slowed to {}", rep.writer_step_s);
}

#[test]
fn file_only_and_stream_to_file_plans_run() {
    for mode in [Mode::FileOnly, Mode::StreamToFile] {
        let dir = tempfile::tempdir().unwrap();
        let plan = bench_plan(serde_json::json!({
            "mode": mode, "writers": 2, "readers": 1,
            "bytes_per_writer_per_step": 8192, "compute_delay_ms": 30,
            "duration_s": 2, "repetitions": 2, "startup_grace_ms": 1000,
            "engine": if mode == Mode::FileOnly {
                serde_json::json!({"engine": "file"})
            } else {
                serde_json::json!({"engine": "stream", "queue_policy": "block"})
            },
            "sink": {"engine": "file"}
        }));
        let report = run_bench(&plan, dir.path(), bench_exe()).unwrap();
        assert_eq!(report.repetitions.len(), 2);
        for rep in &report.repetitions {
            assert!(rep.dumps > 5, "{mode:?}: {rep:?}");
            let stored = if mode == Mode::FileOnly { &rep.store } else { &rep.sink_store };
            assert!(stored.is_some());
        }
        if mode == Mode::StreamToFile {
            assert!(dir.path().join("rep-1/sink_samples.csv").exists());
        }
    }
}

#[test]
fn failed_child_is_reported_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let plan = serde_json::json!({
        "mode": "stream", "writers": 1, "readers": 1,
        "bytes_per_writer_per_step": 16, "duration_s": 1, "repetitions": 1, "startup_grace_ms": 200,
        "engine": {"engine": "stream", "port_range": [port, port]}
    });
    let plan_path = dir.path().join("plan.json");
    std::fs::write(&plan_path, plan.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = Command::new(bench_exe())
        .arg("--plan")
        .arg(&plan_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    let failure = summary["repetitions"][0]["failure"].as_str().unwrap();
    assert!(failure.contains("writer 0"), "{failure}");
    drop(taken);
}

#[test]
fn invalid_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("plan.json");
    std::fs::write(&plan_path, r#"{"mode": "stream", "writers": 0, "bytes_per_writer_per_step": 1, "duration_s": 1, "engine": {"engine": "stream"}}"#).unwrap();
    let out = Command::new(bench_exe()).arg("--plan").arg(&plan_path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("writers"));
}
