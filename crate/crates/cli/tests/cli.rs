use std::path::Path;
use std::process::{Command, Output};

fn rebar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rebar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_detect_evaluate_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let out = rebar(&[
        "gen",
        "--nodes",
        "4",
        "--scenes",
        "2",
        "--seed",
        "3",
        "--out-dir",
        s(&gen),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scene_0003.ply", "scene_0004.ply", "truth_0003.json", "tool.ply"] {
        assert!(gen.join(f).exists(), "{f}");
    }

    let det = dir.path().join("det");
    let out = rebar(&[
        "detect",
        s(&gen.join("scene_0003.ply")),
        "--seed",
        "3",
        "--out-dir",
        s(&det),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(det.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["tying_poses"].as_array().unwrap().len(), 4);
    assert_eq!(result["tying_poses"][0]["q"].as_array().unwrap().len(), 4);
    for k in 0..4 {
        assert!(det.join(format!("node_{k:03}.ply")).exists());
    }

    let ev = dir.path().join("ev");
    let res = det.join("result.json");
    let truth = gen.join("truth_0003.json");
    let out = rebar(&["eval", "--result", s(&res), "--truth", s(&truth), "--out-dir", s(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["mean_node_detection"], 1.0);
    assert!(report["r_s"].as_f64().unwrap() >= 0.75);

    let out = rebar(&[
        "sweep",
        "--result",
        s(&res),
        "--truth",
        s(&truth),
        "--thresholds",
        "1,0.001,0.1",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t_g,r_s");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0.001,"));
    assert_eq!(lines[3], "1.0,1.0");
}

#[test]
fn csv_scenes_carry_labels_and_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = rebar(&[
        "gen",
        "--nodes",
        "4",
        "--obstacles",
        "1",
        "--format",
        "csv",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("scene_0000.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,y,z,label");
    assert!(text.lines().skip(1).any(|l| l.ends_with(",-1")));
    let det = dir.path().join("det");
    let out = rebar(&[
        "detect",
        s(&dir.path().join("scene_0000.csv")),
        "--format",
        "csv",
        "--out-dir",
        s(&det),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(det.join("node_000.csv").exists());
}

#[test]
fn demo_writes_results_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let out = rebar(&[
        "demo",
        "--nodes",
        "4",
        "--scenes",
        "2",
        "--jobs",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("demo.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("seed,n_truth,n_detected,detection_rate,order_ok"));
    assert!(lines[1].starts_with("0,4,4,1.0,true"));
    assert!(dir.path().join("result_0001.json").exists());
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let gen = rebar(&["gen", "--out-dir", s(dir.path())]);
    assert!(gen.status.success());
    let scene = dir.path().join("scene_0000.ply");

    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, r#"{"crop_radiuss": 0.05}"#).unwrap();
    let out = rebar(&["detect", s(&scene), "--config", s(&typo), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"crop_radius": -1.0}"#).unwrap();
    let out = rebar(&["detect", s(&scene), "--config", s(&invalid), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let partial = dir.path().join("partial.json");
    std::fs::write(&partial, r#"{"standoff": 0.25, "eval": {"t_g": 0.2}}"#).unwrap();
    let out = rebar(&[
        "detect",
        s(&scene),
        "--config",
        s(&partial),
        "--out-dir",
        s(&dir.path().join("p")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stage_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // a lone straight bar has no crossing to find
    let bar = dir.path().join("bar.csv");
    let rows: String = (0..2000).map(|i| format!("{},0,0\n", i as f64 * 0.0005)).collect();
    std::fs::write(&bar, rows).unwrap();
    let out = rebar(&["detect", s(&bar), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pre_detect"));

    let missing = dir.path().join("missing.ply");
    let out = rebar(&["detect", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
