use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
version = 1

[data.synthetic]
classes = 4
samples = 200
dims = [8, 8]
informativeness = [1.0, 0.5]
shared_factor = 0.7
noise_sigma = 0.5
seed = 0

[models]
hidden = [16, 16]
encoder_hidden = [16]
fusion_hidden = [16, 16]

[train.epochs]
s1 = 10
s2 = 10
s3 = 10
"#;

fn mstd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    assert!(mstd(&["gen-data", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(mstd(&["gen-data", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bundle = mstd_core::data::load_external(&a).unwrap();
    assert_eq!(bundle.samples(), 200);
    assert_eq!(bundle.dims(), vec![8, 8]);
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mstd(&["gen-data", "--config", "/nonexistent/cfg.toml", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfg.toml"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, format!("{TINY}\n[report]\nbogus = 1\n")).unwrap();
    let out = mstd(&["train", "--config", s(&p), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_eval_route_stats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    let t0 = std::time::Instant::now();
    let out = mstd(&["train", "--config", s(&cfg), "--stage", "all", "--seed", "3", "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t0.elapsed().as_secs() < 60);

    let log = mstd_core::pipeline::MetricsLog::read(&run.join("metrics.jsonl")).unwrap();
    let last_val = log.final_line("s3", "val").unwrap().clone();
    let out = mstd(&[
        "eval", "--checkpoint", s(&run.join("s3/student.mstd")), "--data", s(&cfg), "--split", "val", "--seed", "3",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["overall_accuracy"].as_f64().unwrap(), last_val.oa);
    assert_eq!(v["loss"].as_f64().unwrap(), last_val.loss);

    let out = mstd(&["eval", "--checkpoint", s(&run.join("s3/student.mstd")), "--data", s(&cfg), "--split", "test", "--seed", "3"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let oa = v["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));

    let out = mstd(&["route-stats", "--run-dir", s(&run)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(header[0], "epoch");
    assert!(header[1..].iter().any(|l| l.starts_with("MM")));
    assert!(header[1..].iter().any(|l| l.starts_with("CM")));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    for r in rows {
        let sum: f64 = r.split('\t').skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}

#[test]
fn training_twice_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        assert!(mstd(&["train", "--config", s(&cfg), "--out", s(run)]).status.success());
    }
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(b.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn stage3_without_stage2_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    assert!(mstd(&["train", "--config", s(&cfg), "--stage", "s1", "--out", s(&run)]).status.success());
    let out = mstd(&["train", "--config", s(&cfg), "--stage", "s3", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("masknet_1.mstd"));

    let fresh = dir.path().join("fresh");
    let out = mstd(&["train", "--config", s(&cfg), "--stage", "s2", "--out", s(&fresh)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model_0.mstd"));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ck = dir.path().join("bad.mstd");
    std::fs::write(&ck, b"MSTD\x01\x00garbage").unwrap();
    let out = mstd(&["eval", "--checkpoint", s(&ck), "--data", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_stage_and_method_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = mstd(&["train", "--config", s(&cfg), "--stage", "s4", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = mstd(&["compare", "--config", s(&cfg), "--seeds", "0,1", "--methods", "no_kd,crd"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mstd(&["compare", "--config", s(&cfg), "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_report_matches_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out_dir = dir.path().join("cmp");
    let out = mstd(&[
        "compare", "--config", s(&cfg), "--seeds", "0,1", "--methods", "kd_cm,mst", "--targets", "1,2", "--out", s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("population std"));

    let report: mstd_core::pipeline::Report =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    for t in [1, 2] {
        assert!(report.rows.iter().any(|r| r.target == t && r.method == mstd_core::pipeline::Method::NoKd));
    }
    for row in &report.rows {
        let v: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.target == row.target && c.method == row.method)
            .map(|c| c.test_oa)
            .collect();
        assert_eq!(v.len(), 2);
        let hand = (v[0] + v[1]) / 2.0;
        assert!((row.mean - hand).abs() < 1e-9);
        assert!((row.std - (v[0] - v[1]).abs() / 2.0).abs() < 1e-9);
    }
}
