use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmx_core::numerics::cmxt;
use cmx_core::Tensor;

fn cmx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmx"))
        .args(args)
        .env("CMX_THREADS", "1")
        .output()
        .expect("spawn cmx")
}

fn ok(args: &[&str]) -> Output {
    let out = cmx(args);
    assert!(
        out.status.success(),
        "cmx {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small network, short training, so the end-to-end commands stay fast.
fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "network": serde_json::to_value(cmx_core::network::NetworkConfig::small()).unwrap(),
        "train": { "epochs": epochs, "train_scenes": 2, "eval_scenes": 2 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn encode_empty_events_gives_zero_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ev.csv");
    std::fs::write(&csv, "t,x,y,p\n").unwrap();
    let out = dir.path().join("grid.cmxt");
    let o = ok(&[
        "encode",
        "events",
        p(&csv),
        "--height",
        "4",
        "--width",
        "5",
        "--out",
        p(&out),
    ]);
    let t = cmxt::load(&out).unwrap();
    assert_eq!(t.shape(), &[4, 5, 3]);
    assert!(t.data().iter().all(|&v| v == 0.0));
    let zeros = cmxt::encode(&Tensor::<f32>::zeros(&[4, 5, 3]).unwrap());
    let expected = {
        use sha2::Digest;
        use std::fmt::Write as _;
        sha2::Sha256::digest(&zeros).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    };
    assert_eq!(stdout(&o).trim(), format!("shape [4, 5, 3] sha256 {expected}"));
}

#[test]
fn encode_events_counts_and_upscale() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ev.csv");
    std::fs::write(&csv, "0.0,0,0,1\n0.5,1,0,-1\n1.0,0,0,1\n").unwrap();
    let out = dir.path().join("grid.cmxt");
    ok(&[
        "encode",
        "events",
        p(&csv),
        "--height",
        "1",
        "--width",
        "2",
        "--bins",
        "2",
        "--upscale",
        "6",
        "--out",
        p(&out),
    ]);
    let t = cmxt::load(&out).unwrap();
    assert_eq!(t.shape(), &[1, 2, 2]);
    assert_eq!(t.data().iter().sum::<f32>(), 1.0);
}

#[test]
fn malformed_csv_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "t,x,y,p\n0.1,0,0,1\n0.2,zero,0,1\n").unwrap();
    let out = dir.path().join("grid.cmxt");
    let o = cmx(&[
        "encode",
        "events",
        p(&csv),
        "--height",
        "2",
        "--width",
        "2",
        "--out",
        p(&out),
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.csv:3"), "{err}");
}

#[test]
fn encode_equal_polar_stack_gives_zero_dolp_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::<f32>::from_fn(&[3, 4], |i| 0.2 + 0.05 * i as f32).unwrap();
    let inputs: Vec<PathBuf> = (0..4)
        .map(|k| {
            let path = dir.path().join(format!("i{k}.cmxt"));
            cmxt::save(&path, &img).unwrap();
            path
        })
        .collect();
    let out = dir.path().join("dolp.cmxt");
    let mut args = vec!["encode", "polar"];
    args.extend(inputs.iter().map(|x| p(x)));
    args.extend(["--kind", "dolp", "--out", p(&out)]);
    let o = ok(&args);
    let t = cmxt::load(&out).unwrap();
    assert_eq!(t.shape(), &[3, 4, 3]);
    assert!(t.data().iter().all(|&v| v == 0.0));
    assert_eq!(std::fs::read(&out).unwrap(), cmxt::encode(&t));
    assert!(stdout(&o).starts_with("shape [3, 4, 3] sha256 "));

    let three: Vec<&str> = inputs[..3].iter().map(|x| p(x)).collect();
    let mut args = vec!["encode", "polar"];
    args.extend(three);
    args.extend(["--out", p(&out)]);
    assert!(!cmx(&args).status.success());
}

#[test]
fn encode_thermal_and_depth() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::<f32>::new(&[1, 2], vec![2.0, 4.0]).unwrap();
    let input = dir.path().join("img.cmxt");
    cmxt::save(&input, &img).unwrap();
    let out = dir.path().join("out.cmxt");
    ok(&["encode", "thermal", p(&input), "--out", p(&out)]);
    assert_eq!(cmxt::load(&out).unwrap().data(), &[2.0, 2.0, 2.0, 4.0, 4.0, 4.0]);
    ok(&["encode", "depth", p(&input), "--out", p(&out)]);
    assert_eq!(cmxt::load(&out).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.cmxt");
    let gt = dir.path().join("gt.cmxt");
    cmxt::save(&pred, &Tensor::<f32>::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    cmxt::save(&gt, &Tensor::<f32>::new(&[2, 2], vec![0.0, 1.0, 0.0, 255.0]).unwrap()).unwrap();
    let o = ok(&["metrics", "--pred", p(&pred), "--gt", p(&gt), "--classes", "2"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["command"], "metrics");
    assert!((v["pixel_acc"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((v["miou"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let a = ok(&["gradcheck", "--seed", "3"]);
    let b = ok(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["all_pass"], true);
    assert!(v.get("wall_time_s").is_none());
}

#[test]
fn train_toy_checkpoint_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let ckpt = dir.path().join("ckpt");
    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    ok(&[
        "train-toy",
        "--config",
        p(&cfg),
        "--seed",
        "5",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&r1),
    ]);
    ok(&["train-toy", "--config", p(&cfg), "--seed", "5", "--out", p(&r2)]);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&r1).unwrap()).unwrap();
    assert_eq!(v["losses"].as_array().unwrap().len(), 2);

    let scene = &cmx_core::harness::gen_synthetic(1, &Default::default(), 11).unwrap()[0];
    let rgb = dir.path().join("rgb.cmxt");
    let x = dir.path().join("x.cmxt");
    cmxt::save(&rgb, &scene.rgb).unwrap();
    cmxt::save(&x, &scene.x).unwrap();
    let pred = dir.path().join("pred.cmxt");
    assert!(
        !cmx(&["infer", "--checkpoint", p(&ckpt), "--rgb", p(&rgb), "--out", p(&pred)])
            .status
            .success()
    );
    let o = ok(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--rgb",
        p(&rgb),
        "--x",
        p(&x),
        "--out",
        p(&pred),
    ]);
    assert!(stdout(&o).starts_with("shape [32, 32] sha256 "));
    let t = cmxt::load(&pred).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0));
}

#[test]
fn ablate_table7_one_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let a = ok(&["ablate", "table7", "--config", p(&cfg), "--seed", "2"]);
    let b = ok(&["ablate", "table7", "--config", p(&cfg), "--seed", "2"]);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let names: Vec<&str> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["No & Avg", "CM-FRM & Avg", "No & FFM", "CM-FRM & FFM"]);
    let table = String::from_utf8_lossy(&a.stderr);
    assert!(table.contains("CM-FRM & FFM"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"netwrk": {}}"#).unwrap();
    let o = cmx(&["train-toy", "--config", p(&cfg), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
