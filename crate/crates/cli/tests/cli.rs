use std::path::Path;
use std::process::{Command, Output};

use granary_core::sim::MetricsReport;
use granary_core::triggers::TriggerSpec;
use granary_core::{Mode, Workload, GB};
use serde_json::Value;

fn granary(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_granary"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = granary(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn metrics(path: &Path) -> MetricsReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Generates the skew scenario and runs it in both modes under `d`.
fn skew_runs(d: &Path) {
    ok(
        &[
            "gen",
            "--template",
            "skewed_join",
            "--out",
            "w.json",
            "--config-out",
            "c.json",
        ],
        d,
    );
    ok(&["run", "--workload", "w.json", "--config", "c.json", "--out", "dd"], d);
    ok(
        &[
            "run",
            "--workload",
            "w.json",
            "--config",
            "c.json",
            "--mode",
            "compute_centric",
            "--out",
            "cc",
        ],
        d,
    );
}

#[test]
fn run_writes_trace_and_metrics() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        &["gen", "--template", "batch_chain", "--jobs", "2", "--out", "w.json"],
        p,
    );
    let line = ok(&["run", "--workload", "w.json", "--out", "out"], p);
    assert!(line.contains("makespan") && line.contains("mean JCT"), "{line}");
    for f in ["trace.jsonl", "metrics.json", "manifest.json"] {
        assert!(p.join("out").join(f).is_file(), "{f}");
    }
    let m = metrics(&p.join("out/metrics.json"));
    assert_eq!(m.mode, Mode::DataDriven);
    assert_eq!(m.jobs.len(), 2);
}

#[test]
fn repeated_runs_produce_identical_files() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["gen", "--template", "streaming", "--jobs", "2", "--out", "w.json"], p);
    ok(&["run", "--workload", "w.json", "--out", "a"], p);
    ok(&["run", "--workload", "w.json", "--out", "b"], p);
    for f in ["trace.jsonl", "metrics.json"] {
        let read = |dir: &str| std::fs::read(p.join(dir).join(f)).unwrap();
        assert_eq!(read("a"), read("b"), "{f}");
    }
    // wall-clock time lives only in the manifest
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(p.join("a/manifest.json")).unwrap()).unwrap();
    assert!(manifest["started_unix_ms"].as_u64().unwrap() > 0);
}

#[test]
fn mode_flag_reaches_the_metrics() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        &["gen", "--template", "batch_chain", "--jobs", "1", "--out", "w.json"],
        p,
    );
    ok(
        &[
            "run",
            "--workload",
            "w.json",
            "--mode",
            "compute_centric",
            "--out",
            "cc",
        ],
        p,
    );
    let raw: Value = serde_json::from_str(&std::fs::read_to_string(p.join("cc/metrics.json")).unwrap()).unwrap();
    assert_eq!(raw["mode"], "compute_centric");
}

#[test]
fn bad_inputs_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let missing = granary(&["run", "--workload", "missing.json", "--out", "o"], p);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.json"));

    std::fs::write(p.join("w.json"), Workload::default().to_json_pretty()).unwrap();
    std::fs::write(p.join("c.json"), r#"{"theta": 0.0}"#).unwrap();
    assert_eq!(
        code(&granary(
            &["run", "--workload", "w.json", "--config", "c.json", "--out", "o"],
            p
        )),
        2
    );

    std::fs::write(
        p.join("dangling.json"),
        r#"{"jobs":[{"id":"j","arrival_time_s":0,"stages":[],"edges":[["a","b"]]}]}"#,
    )
    .unwrap();
    assert_eq!(
        code(&granary(&["run", "--workload", "dangling.json", "--out", "o"], p)),
        2
    );

    assert_eq!(
        code(&granary(
            &["run", "--workload", "w.json", "--out", "o", "--reps", "0"],
            p
        )),
        2
    );
    assert_eq!(code(&granary(&["gen", "--template", "nope", "--out", "x.json"], p)), 2);
}

#[test]
fn repetitions_use_consecutive_seeds() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        &["gen", "--template", "batch_chain", "--jobs", "2", "--out", "w.json"],
        p,
    );
    ok(
        &[
            "run",
            "--workload",
            "w.json",
            "--out",
            "r",
            "--reps",
            "3",
            "--seed",
            "10",
        ],
        p,
    );
    for s in 10..13 {
        let m = metrics(&p.join(format!("r/rep-{s}/metrics.json")));
        assert_eq!(m.seed, s);
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(p.join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["reps"].as_array().unwrap().len(), 3);
}

#[test]
fn self_comparison_has_unit_ratios() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    skew_runs(p);
    ok(&["compare", "dd", "dd", "--out", "cmp"], p);
    let c: Value = serde_json::from_str(&std::fs::read_to_string(p.join("cmp/comparison.json")).unwrap()).unwrap();
    let mut ratios = Vec::new();
    fn collect(v: &Value, out: &mut Vec<f64>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    match x {
                        Value::Number(n)
                            if k == "ratio" || ["mean", "p50", "p95", "min", "max"].contains(&k.as_str()) =>
                        {
                            out.push(n.as_f64().unwrap())
                        }
                        _ => collect(x, out),
                    }
                }
            }
            Value::Array(a) => a.iter().for_each(|x| collect(x, out)),
            _ => {}
        }
    }
    collect(&c, &mut ratios);
    assert!(ratios.len() >= 10);
    assert!(ratios.iter().all(|&r| r == 1.0), "{ratios:?}");
    let csv = std::fs::read_to_string(p.join("cmp/job_ratios.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "job,name,jct_a_s,jct_b_s,ratio");
}

#[test]
fn skew_comparison_reports_the_v2_speedup() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    skew_runs(p);
    let text = ok(&["compare", "cc", "dd", "--out", "cmp"], p);
    assert!(text.contains("skewed_join/v2"), "{text}");
    let c: Value = serde_json::from_str(&std::fs::read_to_string(p.join("cmp/comparison.json")).unwrap()).unwrap();
    let v2 = c["stages"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["stage"] == "v2")
        .unwrap();
    // 2.1x reported for the real system; 1.5x is the floor here
    assert!(v2["ratio"].as_f64().unwrap() >= 1.5, "{v2}");
}

#[test]
fn comparing_different_workloads_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    skew_runs(p);
    ok(&["gen", "--template", "straggler", "--out", "s.json"], p);
    ok(&["run", "--workload", "s.json", "--out", "other"], p);
    let out = granary(&["compare", "dd", "other"], p);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("workload mismatch"));
}

#[test]
fn ilp_solves_the_two_by_two_instance() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // Granule 0 holds 2 bytes on m0, granule 1 holds 1 byte on m1, each
    // adds 1. Of the four placements only [0, 1] keeps both local with
    // peak load 3; [0, 0] peaks at 4 and the other two pay a spread cost.
    std::fs::write(
        p.join("i.json"),
        r#"{"machines":2,"granules":[{"job":0,"b":[2,0],"e":1},{"job":0,"b":[0,1],"e":1}],"quotas":[100],"weights":[1,1,1]}"#,
    )
    .unwrap();
    let text = ok(&["ilp", "--instance", "i.json"], p);
    assert!(text.starts_with("optimum 3 "), "{text}");
    assert!(text.lines().next().unwrap().ends_with("placement [0, 1]"), "{text}");
    let json: Value = serde_json::from_str(&ok(&["ilp", "--instance", "i.json", "--json"], p)).unwrap();
    assert_eq!(json["optimum"]["objective"], 3.0);
    assert!(json["ratio"].as_f64().unwrap() >= 1.0);
}

#[test]
fn ilp_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(
        p.join("inf.json"),
        r#"{"machines":1,"granules":[{"job":0,"b":[0],"e":5}],"quotas":[4]}"#,
    )
    .unwrap();
    let out = granary(&["ilp", "--instance", "inf.json"], p);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));

    std::fs::write(
        p.join("big.json"),
        format!(
            r#"{{"machines":10,"granules":[{}],"quotas":[1000]}}"#,
            [r#"{"job":0,"b":[0,0,0,0,0,0,0,0,0,0],"e":1}"#; 10].join(",")
        ),
    )
    .unwrap();
    assert_eq!(code(&granary(&["ilp", "--instance", "big.json"], p)), 3);

    std::fs::write(
        p.join("bad.json"),
        r#"{"machines":2,"granules":[{"job":0,"b":[1],"e":1}],"quotas":[4]}"#,
    )
    .unwrap();
    assert_eq!(code(&granary(&["ilp", "--instance", "bad.json"], p)), 2);
}

#[test]
fn ilp_random_sweep_aggregates() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let text = ok(&["ilp", "--random", "100", "--seed", "3"], p);
    assert!(text.starts_with("100 instances:"), "{text}");
    let r: Value = serde_json::from_str(&ok(&["ilp", "--random", "100", "--seed", "3", "--json"], p)).unwrap();
    let n = |k: &str| r[k].as_u64().unwrap();
    assert_eq!(n("instances"), 100);
    assert_eq!(n("solved") + n("infeasible") + n("too_large"), 100);
    let (max, mean) = (r["max_ratio"].as_f64().unwrap(), r["mean_ratio"].as_f64().unwrap());
    assert!(1.0 <= mean && mean <= max, "{r}");
}

#[test]
fn gen_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        &[
            "gen",
            "--template",
            "batch_chain",
            "--jobs",
            "10",
            "--seed",
            "1",
            "--out",
            "a.json",
        ],
        p,
    );
    ok(
        &[
            "gen",
            "--template",
            "batch_chain",
            "--jobs",
            "10",
            "--seed",
            "1",
            "--out",
            "b.json",
        ],
        p,
    );
    assert_eq!(
        std::fs::read(p.join("a.json")).unwrap(),
        std::fs::read(p.join("b.json")).unwrap()
    );
    let w = Workload::from_json(&std::fs::read_to_string(p.join("a.json")).unwrap()).unwrap();
    assert_eq!(w.jobs.len(), 10);
}

#[test]
fn gen_graph_iterative_builds_a_pipelined_chain() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(
        &[
            "gen",
            "--template",
            "graph_iterative",
            "--iters",
            "5",
            "--jobs",
            "2",
            "--out",
            "g.json",
        ],
        p,
    );
    let w = Workload::from_json(&std::fs::read_to_string(p.join("g.json")).unwrap()).unwrap();
    for j in &w.jobs {
        assert_eq!(j.stages.len(), 5);
        let chain: Vec<[String; 2]> = j
            .stages
            .windows(2)
            .map(|s| [s[0].stage_id.clone(), s[1].stage_id.clone()])
            .collect();
        assert_eq!(j.edges, chain);
        assert!(j.stages[..4]
            .iter()
            .all(|s| matches!(s.trigger, TriggerSpec::Pipelining { .. })));
    }
}

#[test]
fn gen_skewed_join_matches_the_scenario() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["gen", "--template", "skewed_join", "--out", "w.json"], p);
    let w = Workload::from_json(&std::fs::read_to_string(p.join("w.json")).unwrap()).unwrap();
    let j = &w.jobs[0];
    // partitions of 1 GB and 4 GB under the baseline
    assert_eq!(j.stages[0].output.total_output_bytes(), 5 * GB);
    assert_eq!(j.stages[1].partitions, 2);
}
